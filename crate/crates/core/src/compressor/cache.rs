use std::path::Path;

use serde::{Deserialize, Serialize};

use super::plan::{interleave_tokens, plan_chunks, RatioPolicy};
use crate::error::{Error, Result};
use crate::io::Container;
use crate::model::{forward_chunk, GradMode, Model, ModelConfig, Prefix, TokenKindMask};
use crate::numerics::{Scalar, Tape, Tensor, Var};

pub const CACHE_KIND: &str = "cache";

/// Accumulated beacon keys and values of one layer, `m × (h^k·d)`, stored
/// before rotary embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache<T> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheMeta {
    config_hash: String,
    m: usize,
    consumed_tokens: usize,
    full_chunks: usize,
    residual: Vec<u32>,
    provisional: usize,
}

/// Compressed context of a session.
///
/// A context that ends mid-chunk has its short last chunk compressed like
/// any other, but the raw tokens of that chunk are remembered together with
/// the number of beacon entries they produced. The next append drops those
/// entries and re-encodes the tokens as the head of a longer chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedCache<T> {
    config_hash: String,
    layers: Vec<LayerCache<T>>,
    m: usize,
    consumed_tokens: usize,
    full_chunks: usize,
    residual: Vec<u32>,
    provisional: usize,
}

impl<T: Scalar> CompressedCache<T> {
    pub fn empty(config: &ModelConfig) -> Self {
        let width = config.kv_width();
        let layer = LayerCache {
            keys: Tensor::zeros(&[0, width]),
            values: Tensor::zeros(&[0, width]),
        };
        Self {
            config_hash: config.hash(),
            layers: vec![layer; config.num_layers],
            m: 0,
            consumed_tokens: 0,
            full_chunks: 0,
            residual: Vec::new(),
            provisional: 0,
        }
    }

    /// Accumulated beacon entries per layer.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn consumed_tokens(&self) -> usize {
        self.consumed_tokens
    }

    pub fn full_chunks(&self) -> usize {
        self.full_chunks
    }

    /// Raw tokens of a trailing partial chunk, if any.
    pub fn residual(&self) -> &[u32] {
        &self.residual
    }

    pub fn layers(&self) -> &[LayerCache<T>] {
        &self.layers
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Key/value rows actually stored, per layer.
    pub fn entries_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.keys.shape()[0]).collect()
    }

    fn check_config(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.hash();
        if self.config_hash != expected {
            return Err(Error::ConfigMismatch {
                expected,
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }

    /// Places the cache on a tape as constants, one `(K, V)` pair per layer.
    pub fn prefix(&self, tape: &mut Tape<T>) -> Prefix {
        self.layers
            .iter()
            .map(|l| {
                (self.m > 0).then(|| {
                    (
                        tape.constant(l.keys.clone()),
                        tape.constant(l.values.clone()),
                    )
                })
            })
            .collect()
    }

    fn push_rows(&mut self, rows: Vec<(Tensor<T>, Tensor<T>)>, k: usize) -> Result<()> {
        for (layer, (nk, nv)) in self.layers.iter_mut().zip(rows) {
            layer.keys = Tensor::concat_rows(&[&layer.keys, &nk])?;
            layer.values = Tensor::concat_rows(&[&layer.values, &nv])?;
        }
        self.m += k;
        Ok(())
    }

    fn truncate(&mut self, m: usize) -> Result<()> {
        for layer in &mut self.layers {
            let width = layer.keys.shape()[1];
            let keep = m * width;
            layer.keys = Tensor::new(vec![m, width], layer.keys.data()[..keep].to_vec())?;
            layer.values = Tensor::new(vec![m, width], layer.values.data()[..keep].to_vec())?;
        }
        self.m = m;
        Ok(())
    }

    pub fn to_container(&self, config: &ModelConfig) -> Result<Container<T>> {
        self.check_config(config)?;
        let meta = CacheMeta {
            config_hash: self.config_hash.clone(),
            m: self.m,
            consumed_tokens: self.consumed_tokens,
            full_chunks: self.full_chunks,
            residual: self.residual.clone(),
            provisional: self.provisional,
        };
        let mut tensors = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            tensors.push((format!("layers.{i}.keys"), l.keys.clone()));
            tensors.push((format!("layers.{i}.values"), l.values.clone()));
        }
        Ok(Container {
            kind: CACHE_KIND.into(),
            config: config.clone(),
            meta: serde_json::to_value(meta).map_err(|e| Error::Format(e.to_string()))?,
            tensors,
        })
    }

    /// Restores a snapshot, rejecting one produced under another config.
    pub fn from_container(mut c: Container<T>, config: &ModelConfig) -> Result<Self> {
        if c.kind != CACHE_KIND {
            return Err(Error::Format(format!(
                "expected a cache snapshot, found {:?}",
                c.kind
            )));
        }
        let meta: CacheMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::Format(format!("cache meta: {e}")))?;
        let expected = config.hash();
        if meta.config_hash != expected || c.config.hash() != expected {
            return Err(Error::ConfigMismatch {
                expected,
                found: meta.config_hash,
            });
        }
        let width = config.kv_width();
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let keys = c.take(&format!("layers.{i}.keys"))?;
            let values = c.take(&format!("layers.{i}.values"))?;
            for t in [&keys, &values] {
                if t.shape() != [meta.m, width] {
                    return Err(Error::Format(format!(
                        "layer {i}: shape {:?}, expected [{}, {}]",
                        t.shape(),
                        meta.m,
                        width
                    )));
                }
            }
            layers.push(LayerCache { keys, values });
        }
        Ok(Self {
            config_hash: meta.config_hash,
            layers,
            m: meta.m,
            consumed_tokens: meta.consumed_tokens,
            full_chunks: meta.full_chunks,
            residual: meta.residual,
            provisional: meta.provisional,
        })
    }

    pub fn save(&self, config: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
        self.to_container(config)?.write(path)
    }

    pub fn load(config: &ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::read(path)?, config)
    }
}

/// Extends a per-layer prefix with the beacon rows of a freshly encoded
/// chunk. Raw rows are dropped.
pub fn accumulate_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    prefix: &Prefix,
    chunk_kv: &[(Var, Var)],
    kinds: &TokenKindMask,
) -> Result<Prefix> {
    let beacons = kinds.beacon_indices();
    prefix
        .iter()
        .zip(chunk_kv)
        .map(|(pre, &(k, v))| {
            if beacons.is_empty() {
                return Ok(*pre);
            }
            let bk = tape.gather_rows(k, &beacons)?;
            let bv = tape.gather_rows(v, &beacons)?;
            Ok(Some(match pre {
                Some((pk, pv)) => (tape.concat_rows(&[*pk, bk])?, tape.concat_rows(&[*pv, bv])?),
                None => (bk, bv),
            }))
        })
        .collect()
}

/// Result of encoding one chunk on top of a cache.
pub struct Encoded<T> {
    /// Last-layer hidden states of the interleaved chunk.
    pub hidden: Tensor<T>,
    pub kinds: TokenKindMask,
    /// Keys each query row could see: cached entries plus the chunk itself.
    pub keys_seen: usize,
}

/// Encodes one chunk of raw tokens at ratio `alpha` and appends its beacon
/// activations to `cache`.
pub fn encode_and_accumulate<T: Scalar>(
    model: &Model<T>,
    cache: &mut CompressedCache<T>,
    raw: &[u32],
    alpha: usize,
) -> Result<Encoded<T>> {
    let config = &model.config;
    cache.check_config(config)?;
    let (kinds, k) = super::plan::interleave(config, raw.len(), alpha)?;
    let tokens = interleave_tokens(raw, &kinds, config.beacon_token());
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, GradMode::NONE);
    let prefix = cache.prefix(&mut tape);
    let out = forward_chunk(&mut tape, config, &bound, &tokens, &prefix, cache.m)?;
    let beacons = kinds.beacon_indices();
    let mut rows = Vec::with_capacity(out.kv.len());
    for &(kv, vv) in &out.kv {
        let bk = tape.gather_rows(kv, &beacons)?;
        let bv = tape.gather_rows(vv, &beacons)?;
        rows.push((tape.value(bk).clone(), tape.value(bv).clone()));
    }
    let keys_seen = cache.m + tokens.len();
    cache.push_rows(rows, k)?;
    Ok(Encoded {
        hidden: tape.value(out.hidden).clone(),
        kinds,
        keys_seen,
    })
}

/// Compresses a whole context from scratch.
pub fn compress_context<T: Scalar>(
    model: &Model<T>,
    tokens: &[u32],
    policy: &RatioPolicy,
) -> Result<CompressedCache<T>> {
    if tokens.is_empty() {
        return Err(Error::Usage("cannot compress an empty context".into()));
    }
    let mut cache = CompressedCache::empty(&model.config);
    append_context(model, &mut cache, tokens, policy)?;
    Ok(cache)
}

/// Continues compression with more tokens. Returns the number of chunks
/// encoded by this call.
pub fn append_context<T: Scalar>(
    model: &Model<T>,
    cache: &mut CompressedCache<T>,
    tokens: &[u32],
    policy: &RatioPolicy,
) -> Result<usize> {
    let config = &model.config;
    cache.check_config(config)?;
    if tokens.is_empty() {
        return Ok(0);
    }
    let mut pending = std::mem::take(&mut cache.residual);
    if !pending.is_empty() {
        cache.truncate(cache.m - cache.provisional)?;
        cache.consumed_tokens -= pending.len();
        cache.provisional = 0;
    }
    pending.extend_from_slice(tokens);
    let total = cache.consumed_tokens + pending.len();
    let plan = plan_chunks(config, pending.len(), policy, cache.full_chunks, total)?;
    for chunk in &plan {
        let raw = &pending[chunk.start..chunk.end];
        encode_and_accumulate(model, cache, raw, chunk.alpha)?;
        cache.consumed_tokens += raw.len();
        if raw.len() == config.chunk_size {
            cache.full_chunks += 1;
        } else {
            cache.residual = raw.to_vec();
            cache.provisional = chunk.k;
        }
    }
    Ok(plan.len())
}
