use crate::compressor::{
    accumulate_on_tape, interleave_tokens, plan_chunks, ChunkSpec, RatioPolicy,
};
use crate::error::{Error, Result};
use crate::model::{forward_chunk, lm_logits, Bound, GradMode, Model, ModelConfig, TokenKind};
use crate::numerics::{Scalar, Tape, Tensor, Var};

pub const IGNORE_LABEL: i64 = -100;

/// Chunk layout of a training example for a given per-chunk ratio list.
pub fn training_plan(config: &ModelConfig, n: usize, ratios: &[usize]) -> Result<Vec<ChunkSpec>> {
    plan_chunks(config, n, &RatioPolicy::PerChunk(ratios.to_vec()), 0, n)
}

/// Labels aligned to the concatenated interleaved sequence. Beacon slots and
/// the whole first chunk are ignored; every other raw slot is labelled with
/// the next raw token. The final token has no successor and is ignored.
pub fn build_labels(plan: &[ChunkSpec], tokens: &[u32]) -> Vec<i64> {
    let mut labels = Vec::with_capacity(plan.iter().map(|c| c.kinds.len()).sum());
    for (c, chunk) in plan.iter().enumerate() {
        let mut t = chunk.start;
        for kind in chunk.kinds.kinds() {
            match kind {
                TokenKind::Beacon => labels.push(IGNORE_LABEL),
                TokenKind::Raw => {
                    let next = tokens.get(t + 1).filter(|_| c > 0);
                    labels.push(next.map_or(IGNORE_LABEL, |&x| x as i64));
                    t += 1;
                }
            }
        }
    }
    labels
}

pub struct ArLoss {
    /// Mean negative log-likelihood; a zero constant when `count == 0`.
    pub loss: Var,
    pub count: usize,
}

/// Runs the whole chunk loop on one tape so gradients reach every chunk.
/// `bounds[i]` supplies the parameters used for chunk `i`.
pub fn ar_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    bounds: &[&Bound],
    tokens: &[u32],
    plan: &[ChunkSpec],
    labels: &[i64],
) -> Result<ArLoss> {
    if bounds.len() != plan.len() {
        return Err(Error::Usage(format!(
            "{} parameter bindings for {} chunks",
            bounds.len(),
            plan.len()
        )));
    }
    let total: usize = plan.iter().map(|c| c.kinds.len()).sum();
    if labels.len() != total {
        return Err(Error::Usage(format!(
            "{} labels for {} interleaved positions",
            labels.len(),
            total
        )));
    }
    let last_labelled = {
        let mut offset = 0;
        let mut last = None;
        for (i, c) in plan.iter().enumerate() {
            if labels[offset..offset + c.kinds.len()]
                .iter()
                .any(|&l| l != IGNORE_LABEL)
            {
                last = Some(i);
            }
            offset += c.kinds.len();
        }
        last
    };
    let Some(last_labelled) = last_labelled else {
        let zero = tape.constant(Tensor::scalar(T::zero()));
        return Ok(ArLoss {
            loss: zero,
            count: 0,
        });
    };

    let mut prefix = vec![None; config.num_layers];
    let mut m = 0;
    let mut offset = 0;
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    for (i, chunk) in plan.iter().enumerate().take(last_labelled + 1) {
        let seq = interleave_tokens(
            &tokens[chunk.start..chunk.end],
            &chunk.kinds,
            config.beacon_token(),
        );
        let out = forward_chunk(tape, config, bounds[i], &seq, &prefix, m)?;
        let chunk_labels = &labels[offset..offset + seq.len()];
        let rows: Vec<usize> = (0..seq.len())
            .filter(|&r| chunk_labels[r] != IGNORE_LABEL)
            .collect();
        if !rows.is_empty() {
            let h = tape.gather_rows(out.hidden, &rows)?;
            logits.push(lm_logits(tape, config, bounds[i], h)?);
            targets.extend(rows.iter().map(|&r| chunk_labels[r]));
        }
        if i < last_labelled {
            prefix = accumulate_on_tape(tape, &prefix, &out.kv, &out.kinds)?;
            m += chunk.k;
        }
        offset += seq.len();
    }
    let logits = if logits.len() == 1 {
        logits[0]
    } else {
        tape.concat_rows(&logits)?
    };
    let ce = tape.cross_entropy(logits, &targets, IGNORE_LABEL)?;
    Ok(ArLoss {
        loss: ce.loss,
        count: ce.count,
    })
}

/// Compression-based auto-regressive loss of one example with the given
/// per-chunk ratios. Beacon parameters record gradients.
pub fn compression_ar_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    tokens: &[u32],
    ratios: &[usize],
) -> Result<(ArLoss, Bound)> {
    let bound = model.bind(tape, GradMode::BEACON);
    let plan = training_plan(&model.config, tokens.len(), ratios)?;
    let labels = build_labels(&plan, tokens);
    let bounds = vec![&bound; plan.len()];
    let loss = ar_loss_on_tape(tape, &model.config, &bounds, tokens, &plan, &labels)?;
    Ok((loss, bound))
}

/// Plain next-token loss over a single window of at most `w` tokens,
/// used to fit the base model.
pub fn causal_lm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    tokens: &[u32],
) -> Result<(ArLoss, Bound)> {
    let bound = model.bind(tape, GradMode::BASE);
    if tokens.len() < 2 {
        let zero = tape.constant(Tensor::scalar(T::zero()));
        return Ok((
            ArLoss {
                loss: zero,
                count: 0,
            },
            bound,
        ));
    }
    let prefix = vec![None; model.config.num_layers];
    let out = forward_chunk(tape, &model.config, &bound, tokens, &prefix, 0)?;
    let logits = lm_logits(tape, &model.config, &bound, out.hidden)?;
    let labels: Vec<i64> = (0..tokens.len())
        .map(|i| tokens.get(i + 1).map_or(IGNORE_LABEL, |&t| t as i64))
        .collect();
    let ce = tape.cross_entropy(logits, &labels, IGNORE_LABEL)?;
    Ok((
        ArLoss {
            loss: ce.loss,
            count: ce.count,
        },
        bound,
    ))
}
