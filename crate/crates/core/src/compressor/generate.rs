use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cache::{append_context, encode_and_accumulate, CompressedCache};
use super::plan::RatioPolicy;
use crate::error::{Error, Result};
use crate::model::{forward_chunk, last_raw_logits, lm_logits, GradMode, Model, TokenKindMask};
use crate::numerics::{Scalar, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub max_new: usize,
    pub sampling: Sampling,
    /// Decoding stops after emitting this token.
    pub stop: Option<u32>,
    /// Ratio used when the local tail fills a chunk and gets compressed.
    pub policy: RatioPolicy,
}

impl GenerateOptions {
    pub fn greedy(max_new: usize, alpha: usize) -> Self {
        Self {
            max_new,
            sampling: Sampling::Greedy,
            stop: None,
            policy: RatioPolicy::Constant(alpha),
        }
    }
}

/// Uncompressed keys/values of the local tail, per layer.
struct Tail<T> {
    tokens: Vec<u32>,
    layers: Vec<(Tensor<T>, Tensor<T>)>,
}

/// Runs `tokens` as raw rows on top of the compressed cache and the current
/// tail, appends their activations to the tail and returns the logits of
/// the last row.
fn extend_tail<T: Scalar>(
    model: &Model<T>,
    cache: &CompressedCache<T>,
    tail: &mut Tail<T>,
    tokens: &[u32],
) -> Result<Tensor<T>> {
    let config = &model.config;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, GradMode::NONE);
    let width = config.kv_width();
    let mut prefix = Vec::with_capacity(config.num_layers);
    for (c, (tk, tv)) in cache.layers().iter().zip(&tail.layers) {
        let keys = Tensor::concat_rows(&[&c.keys, tk])?;
        let values = Tensor::concat_rows(&[&c.values, tv])?;
        prefix.push((keys.shape()[0] > 0).then(|| (tape.constant(keys), tape.constant(values))));
    }
    let prefix_len = cache.m() + tail.tokens.len();
    let out = forward_chunk(&mut tape, config, &bound, tokens, &prefix, prefix_len)?;
    for ((tk, tv), &(k, v)) in tail.layers.iter_mut().zip(&out.kv) {
        *tk = Tensor::concat_rows(&[tk, tape.value(k)])?;
        *tv = Tensor::concat_rows(&[tv, tape.value(v)])?;
        debug_assert_eq!(tk.shape()[1], width);
    }
    tail.tokens.extend_from_slice(tokens);
    let logits = last_raw_logits(
        &mut tape,
        config,
        &bound,
        out.hidden,
        &TokenKindMask::all_raw(tokens.len()),
    )?;
    Ok(tape.value(logits).clone())
}

fn pick<T: Scalar>(logits: &Tensor<T>, sampling: &Sampling, rng: &mut ChaCha8Rng) -> Result<u32> {
    let row = logits.data();
    match sampling {
        Sampling::Greedy => {
            let mut best = 0;
            for (i, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = i;
                }
            }
            Ok(best as u32)
        }
        Sampling::Temperature { temperature, .. } => {
            if !(*temperature > 0.0) {
                return Err(Error::Usage(format!(
                    "temperature {temperature} must be positive"
                )));
            }
            let max = row
                .iter()
                .map(|x| x.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = row
                .iter()
                .map(|x| ((x.as_f64() - max) / temperature).exp())
                .collect();
            let dist = WeightedIndex::new(&weights).map_err(|e| Error::Numeric(e.to_string()))?;
            Ok(dist.sample(rng) as u32)
        }
    }
}

/// Decodes up to `max_new` tokens after `tail`, conditioning on the
/// compressed cache plus the raw tail. The cache itself is left untouched;
/// a tail that fills a chunk is compressed into a private copy.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    cache: &CompressedCache<T>,
    tail: &[u32],
    opts: &GenerateOptions,
) -> Result<Vec<u32>> {
    let config = &model.config;
    if opts.max_new == 0 {
        return Err(Error::Usage("max_new must be at least 1".into()));
    }
    if tail.is_empty() || tail.len() >= config.chunk_size {
        return Err(Error::Usage(format!(
            "prompt tail must hold 1..{} tokens, got {}",
            config.chunk_size,
            tail.len()
        )));
    }
    let seed = match opts.sampling {
        Sampling::Temperature { seed, .. } => seed,
        Sampling::Greedy => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = cache.clone();
    let width = config.kv_width();
    let empty_tail = || Tail {
        tokens: Vec::new(),
        layers: vec![(Tensor::zeros(&[0, width]), Tensor::zeros(&[0, width])); config.num_layers],
    };
    let mut local = empty_tail();
    let mut logits = extend_tail(model, &cache, &mut local, tail)?;
    let mut out = Vec::with_capacity(opts.max_new);
    while out.len() < opts.max_new {
        let next = pick(&logits, &opts.sampling, &mut rng)?;
        out.push(next);
        if opts.stop == Some(next) || out.len() == opts.max_new {
            break;
        }
        if local.tokens.len() + 1 == config.chunk_size {
            let mut chunk = std::mem::take(&mut local.tokens);
            chunk.push(next);
            let total = cache.consumed_tokens() + chunk.len();
            let alpha = opts.policy.alpha(config, cache.full_chunks(), total)?;
            let enc = encode_and_accumulate(model, &mut cache, &chunk, alpha)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, GradMode::NONE);
            let hidden = tape.constant(enc.hidden);
            let l = last_raw_logits(&mut tape, config, &bound, hidden, &enc.kinds)?;
            logits = tape.value(l).clone();
            local = empty_tail();
        } else {
            logits = extend_tail(model, &cache, &mut local, &[next])?;
        }
    }
    Ok(out)
}

/// Logits of every raw row after `tail`, given the cache. Used for scoring.
pub fn tail_logits<T: Scalar>(
    model: &Model<T>,
    cache: &CompressedCache<T>,
    tail: &[u32],
) -> Result<Tensor<T>> {
    let config = &model.config;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, GradMode::NONE);
    let prefix = cache.prefix(&mut tape);
    let out = forward_chunk(&mut tape, config, &bound, tail, &prefix, cache.m())?;
    let logits = lm_logits(&mut tape, config, &bound, out.hidden)?;
    Ok(tape.value(logits).clone())
}

/// A multi-turn conversation over one growing compressed context.
pub struct Session<T> {
    model: Arc<Model<T>>,
    policy: RatioPolicy,
    cache: CompressedCache<T>,
    chunks_encoded: usize,
}

impl<T: Scalar> Session<T> {
    pub fn new(model: Arc<Model<T>>, policy: RatioPolicy) -> Self {
        let cache = CompressedCache::empty(&model.config);
        Self {
            model,
            policy,
            cache,
            chunks_encoded: 0,
        }
    }

    pub fn with_cache(
        model: Arc<Model<T>>,
        policy: RatioPolicy,
        cache: CompressedCache<T>,
    ) -> Result<Self> {
        if cache.config_hash() != model.config.hash() {
            return Err(Error::ConfigMismatch {
                expected: model.config.hash(),
                found: cache.config_hash().into(),
            });
        }
        Ok(Self {
            model,
            policy,
            cache,
            chunks_encoded: 0,
        })
    }

    /// Compresses another turn of context.
    pub fn append(&mut self, tokens: &[u32]) -> Result<usize> {
        let n = append_context(&self.model, &mut self.cache, tokens, &self.policy)?;
        self.chunks_encoded += n;
        Ok(n)
    }

    pub fn generate(&self, tail: &[u32], opts: &GenerateOptions) -> Result<Vec<u32>> {
        generate(&self.model, &self.cache, tail, opts)
    }

    pub fn cache(&self) -> &CompressedCache<T> {
        &self.cache
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn policy(&self) -> &RatioPolicy {
        &self.policy
    }

    /// Chunk encodings performed by this session so far.
    pub fn chunks_encoded(&self) -> usize {
        self.chunks_encoded
    }
}
