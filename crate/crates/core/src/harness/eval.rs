use std::sync::Arc;

use crate::compressor::{
    compress_context, generate, GenerateOptions, RatioPolicy, Sampling, Session,
};
use crate::error::Result;
use crate::model::Model;
use crate::numerics::Scalar;
use crate::trainer::ByteTokenizer;

use super::needle::NeedleTask;

/// Compresses each task's context once and greedily answers every question
/// on top of it. Returns the decoded answers, one list per task.
pub fn answer_needles<T: Scalar>(
    model: &Model<T>,
    tasks: &[NeedleTask],
    policy: &RatioPolicy,
    max_new: usize,
) -> Result<Vec<Vec<String>>> {
    let tok = ByteTokenizer;
    let opts = GenerateOptions {
        max_new,
        sampling: Sampling::Greedy,
        stop: Some(ByteTokenizer::EOS),
        policy: policy.clone(),
    };
    tasks
        .iter()
        .map(|task| {
            let cache = compress_context(model, &tok.encode(&task.context), policy)?;
            task.questions()
                .iter()
                .map(|(q, _)| Ok(tok.decode(&generate(model, &cache, &tok.encode(q), &opts)?)))
                .collect()
        })
        .collect()
}

/// Multi-turn variant: the context goes into a [`Session`]; after each
/// question the exchange (question plus the model's answer) is appended to
/// the session before the next question is asked.
pub fn answer_needles_multi_turn<T: Scalar>(
    model: Arc<Model<T>>,
    tasks: &[NeedleTask],
    policy: &RatioPolicy,
    max_new: usize,
) -> Result<Vec<Vec<String>>> {
    let tok = ByteTokenizer;
    let opts = GenerateOptions {
        max_new,
        sampling: Sampling::Greedy,
        stop: Some(ByteTokenizer::EOS),
        policy: policy.clone(),
    };
    tasks
        .iter()
        .map(|task| {
            let mut session = Session::new(Arc::clone(&model), policy.clone());
            session.append(&tok.encode(&task.context))?;
            let mut answers = Vec::new();
            for (q, _) in task.questions() {
                let mut turn = tok.encode(&q);
                let out = session.generate(&turn, &opts)?;
                answers.push(tok.decode(&out));
                turn.extend(out.iter().filter(|&&t| t != ByteTokenizer::EOS));
                session.append(&turn)?;
            }
            Ok(answers)
        })
        .collect()
}
