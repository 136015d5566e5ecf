use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::eval::{answer_needles, answer_needles_multi_turn};
use super::needle::{base_corpus, beacon_corpus, gen_needle_tasks, read_tasks, score_needle};
use super::needle::{write_tasks, NeedleReport};
use crate::analyzer::{curve_csv, emit_curve, kv_cache_entries, CurveRow, FlopsSpec};
use crate::compressor::{
    compress_context, CompressedCache, GenerateOptions, RatioPolicy, Sampling, Session,
};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::trainer::{
    load_documents, prepare_corpus, ByteTokenizer, Phase, TrainConfig, TrainReport, Trainer,
};

/// Parses `2`, `adaptive`, `random:SEED` or a comma list such as `8,4,2`
/// (one ratio per chunk, the last repeating).
impl FromStr for RatioPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Usage(format!("unrecognised ratio policy {s:?}"));
        if s == "adaptive" {
            return Ok(RatioPolicy::adaptive_default());
        }
        if let Some(seed) = s.strip_prefix("random:") {
            return Ok(RatioPolicy::Random {
                seed: seed.parse().map_err(|_| bad())?,
            });
        }
        let list: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        match list.as_slice() {
            [a] => Ok(RatioPolicy::Constant(*a)),
            _ => Ok(RatioPolicy::PerChunk(list)),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub corpus: PathBuf,
    /// Checkpoint to start from; a fresh model is initialised when absent.
    pub init: Option<PathBuf>,
    pub out: PathBuf,
    pub metrics: PathBuf,
}

/// Trains per the config file and writes the checkpoint and metrics.
/// After a base phase the beacon weights are re-derived from the new base.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainReport> {
    let config = TrainConfig::load(&args.config)?;
    config.validate()?;
    let mut model = match &args.init {
        Some(p) => Model::<f32>::load(p)?,
        None => Model::init(config.model.clone(), config.seed)?,
    };
    let docs = load_documents(&args.corpus)?;
    let examples = prepare_corpus(
        &docs,
        &ByteTokenizer,
        config.min_len,
        config.max_len,
        config.seed,
    )?;
    let mut trainer = Trainer::new(config.clone(), &model)?;
    let mut metrics = create(&args.metrics)?;
    let report = trainer.run(&mut model, &examples, &mut metrics)?;
    metrics.flush()?;
    if config.phase == Phase::Base {
        model.reset_beacon()?;
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    model.save(&args.out)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressStats {
    pub n: usize,
    pub chunks: usize,
    pub m: usize,
    pub entries_per_layer: Vec<usize>,
    /// Raw tokens per cached entry.
    pub ratio: f64,
    /// Entry count the cost model predicts for a constant ratio, if one was used.
    pub predicted: Option<u64>,
}

pub fn cmd_compress(
    checkpoint: &Path,
    input: &Path,
    policy: &RatioPolicy,
    out: &Path,
) -> Result<CompressStats> {
    let model = Model::<f32>::load(checkpoint)?;
    let tokens = ByteTokenizer.encode(&read_text(input)?);
    let cache = compress_context(&model, &tokens, policy)?;
    cache.save(&model.config, out)?;
    let w = model.config.chunk_size;
    let predicted = match policy {
        RatioPolicy::Constant(a) => {
            Some(kv_cache_entries(tokens.len() as u64, w as u64, *a as u64)?.beacon)
        }
        _ => None,
    };
    Ok(CompressStats {
        n: tokens.len(),
        chunks: tokens.len().div_ceil(w),
        m: cache.m(),
        entries_per_layer: cache.entries_per_layer(),
        ratio: tokens.len() as f64 / cache.m().max(1) as f64,
        predicted,
    })
}

#[derive(Clone, Debug, Default)]
pub enum ContextSource {
    #[default]
    None,
    Snapshot(PathBuf),
    Text(PathBuf),
}

#[derive(Clone, Debug)]
pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    pub context: ContextSource,
    pub prompt: String,
    pub max_new: usize,
    pub policy: RatioPolicy,
    pub temperature: Option<(f64, u64)>,
    pub stop_at_eos: bool,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<String> {
    let model = Model::<f32>::load(&args.checkpoint)?;
    let cache = match &args.context {
        ContextSource::None => CompressedCache::empty(&model.config),
        ContextSource::Snapshot(p) => CompressedCache::load(&model.config, p)?,
        ContextSource::Text(p) => {
            compress_context(&model, &ByteTokenizer.encode(&read_text(p)?), &args.policy)?
        }
    };
    let opts = GenerateOptions {
        max_new: args.max_new,
        sampling: match args.temperature {
            Some((temperature, seed)) => Sampling::Temperature { temperature, seed },
            None => Sampling::Greedy,
        },
        stop: args.stop_at_eos.then_some(ByteTokenizer::EOS),
        policy: args.policy.clone(),
    };
    let session = Session::with_cache(Arc::new(model), args.policy.clone(), cache)?;
    let out = session.generate(&ByteTokenizer.encode(&args.prompt), &opts)?;
    Ok(ByteTokenizer.decode(&out))
}

#[derive(Clone, Debug)]
pub struct FlopsArgs {
    /// A named preset, or `None` for the model section of `config`.
    pub preset: Option<String>,
    pub config: Option<PathBuf>,
    pub alpha: Option<u64>,
    pub chunk_size: Option<u64>,
    pub lengths: Vec<u64>,
    pub ratios: Vec<u64>,
    pub out: Option<PathBuf>,
}

/// Lengths 8K, 16K, ..., 256K.
pub fn default_lengths() -> Vec<u64> {
    (1..=32).map(|i| i * 8192).collect()
}

pub fn cmd_flops(args: &FlopsArgs) -> Result<Vec<CurveRow>> {
    let mut spec = match (&args.preset, &args.config) {
        (Some(name), _) => FlopsSpec::preset(name)?,
        (None, Some(path)) => {
            let c = TrainConfig::load(path)?;
            FlopsSpec::from_model(&c.model, c.model.ratio_set[0])
        }
        (None, None) => FlopsSpec::default(),
    };
    if let Some(a) = args.alpha {
        spec = spec.with_alpha(a);
    }
    if let Some(w) = args.chunk_size {
        spec.chunk_size = w;
    }
    spec.validate()?;
    let ratios = if args.ratios.is_empty() {
        vec![spec.alpha]
    } else {
        args.ratios.clone()
    };
    let rows = emit_curve(&spec, &args.lengths, &ratios)?;
    if let Some(out) = &args.out {
        let mut f = create(out)?;
        f.write_all(curve_csv(&rows).as_bytes())?;
        f.flush()?;
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    /// Short windows for fitting the base model.
    Base,
    /// Long contexts with trailing questions for the beacon weights.
    Beacon,
}

#[derive(Clone, Debug)]
pub enum NeedleGenArgs {
    Tasks {
        seed: u64,
        context_len: usize,
        chunk_size: usize,
        depths: Vec<f64>,
        cases: usize,
        multi: bool,
        out: PathBuf,
    },
    Corpus {
        kind: CorpusKind,
        seed: u64,
        docs: usize,
        len: usize,
        out: PathBuf,
    },
}

/// Writes evaluation tasks (JSON lines) or a training corpus (one document
/// per line). Returns the number of records written.
pub fn cmd_needle_gen(args: &NeedleGenArgs) -> Result<usize> {
    match args {
        NeedleGenArgs::Tasks {
            seed,
            context_len,
            chunk_size,
            depths,
            cases,
            multi,
            out,
        } => {
            let tasks = gen_needle_tasks(*seed, *context_len, *chunk_size, depths, *cases, *multi)?;
            let mut f = create(out)?;
            write_tasks(&tasks, &mut f)?;
            f.flush()?;
            Ok(tasks.len())
        }
        NeedleGenArgs::Corpus {
            kind,
            seed,
            docs,
            len,
            out,
        } => {
            let lines = match kind {
                CorpusKind::Base => base_corpus(*seed, *docs, *len),
                CorpusKind::Beacon => beacon_corpus(*seed, *docs, *len),
            };
            let mut f = create(out)?;
            for l in &lines {
                writeln!(f, "{l}")?;
            }
            f.flush()?;
            Ok(lines.len())
        }
    }
}

#[derive(Clone, Debug)]
pub struct NeedleEvalArgs {
    pub checkpoint: PathBuf,
    pub tasks: PathBuf,
    pub policy: RatioPolicy,
    pub max_new: usize,
    /// Ask the questions of a task in turn, appending each exchange to the context.
    pub multi_turn: bool,
    pub report: Option<PathBuf>,
}

pub fn cmd_needle_eval(args: &NeedleEvalArgs) -> Result<NeedleReport> {
    let model = Model::<f32>::load(&args.checkpoint)?;
    let tasks = read_tasks(BufReader::new(File::open(&args.tasks)?))?;
    let outputs = if args.multi_turn {
        answer_needles_multi_turn(Arc::new(model), &tasks, &args.policy, args.max_new)?
    } else {
        answer_needles(&model, &tasks, &args.policy, args.max_new)?
    };
    let report = score_needle(&outputs, &tasks)?;
    if let Some(out) = &args.report {
        let mut f = create(out)?;
        serde_json::to_writer_pretty(&mut f, &report).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f)?;
        f.flush()?;
    }
    Ok(report)
}
