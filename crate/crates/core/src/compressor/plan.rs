use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TokenKind, TokenKindMask};

/// Splits `0..n` into consecutive windows of `w` tokens; the last one may be
/// shorter.
pub fn partition(n: usize, w: usize) -> Result<Vec<Range<usize>>> {
    if w == 0 {
        return Err(Error::Usage("chunk size must be positive".into()));
    }
    Ok((0..n).step_by(w).map(|s| s..(s + w).min(n)).collect())
}

/// Raw/beacon layout of one chunk: one beacon after every `alpha` raw
/// tokens, plus a closing beacon for a short remainder.
pub fn interleave(
    config: &ModelConfig,
    chunk_len: usize,
    alpha: usize,
) -> Result<(TokenKindMask, usize)> {
    config.check_ratio(alpha)?;
    if chunk_len == 0 || chunk_len > config.chunk_size {
        return Err(Error::Usage(format!(
            "chunk length {} outside 1..={}",
            chunk_len, config.chunk_size
        )));
    }
    let k = chunk_len.div_ceil(alpha);
    let mut kinds = Vec::with_capacity(chunk_len + k);
    for i in 0..chunk_len {
        kinds.push(TokenKind::Raw);
        if (i + 1) % alpha == 0 || i + 1 == chunk_len {
            kinds.push(TokenKind::Beacon);
        }
    }
    Ok((TokenKindMask::new(kinds), k))
}

/// Token ids of an interleaved chunk, beacons written as `beacon`.
pub fn interleave_tokens(raw: &[u32], kinds: &TokenKindMask, beacon: u32) -> Vec<u32> {
    let mut it = raw.iter();
    kinds
        .kinds()
        .iter()
        .map(|k| match k {
            TokenKind::Raw => *it.next().expect("mask matches raw length"),
            TokenKind::Beacon => beacon,
        })
        .collect()
}

/// How each chunk picks its compression ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioPolicy {
    Constant(usize),
    /// Explicit ratio per chunk index; the last entry repeats.
    PerChunk(Vec<usize>),
    /// Uniform draw from the ratio set, a pure function of seed and chunk index.
    Random {
        seed: u64,
    },
    /// `(max_len, alpha)` pairs in increasing `max_len`: the first entry that
    /// fits the total context length wins, otherwise the last one.
    Adaptive(Vec<(usize, usize)>),
}

impl RatioPolicy {
    /// Default thresholds for desk-scale contexts.
    pub fn adaptive_default() -> Self {
        Self::Adaptive(vec![(128, 2), (256, 4), (usize::MAX, 8)])
    }

    pub fn alpha(
        &self,
        config: &ModelConfig,
        chunk_index: usize,
        total_len: usize,
    ) -> Result<usize> {
        let a = match self {
            Self::Constant(a) => *a,
            Self::PerChunk(v) => *v
                .get(chunk_index)
                .or(v.last())
                .ok_or_else(|| Error::Config("empty per-chunk ratio list".into()))?,
            Self::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(chunk_index as u64);
                *config
                    .ratio_set
                    .choose(&mut rng)
                    .ok_or_else(|| Error::Config("ratio set is empty".into()))?
            }
            Self::Adaptive(table) => {
                if table.windows(2).any(|p| p[0].0 >= p[1].0) {
                    return Err(Error::Config(
                        "adaptive thresholds must be strictly increasing".into(),
                    ));
                }
                table
                    .iter()
                    .find(|(max_len, _)| total_len <= *max_len)
                    .or(table.last())
                    .map(|(_, a)| *a)
                    .ok_or_else(|| Error::Config("empty adaptive ratio table".into()))?
            }
        };
        config.check_ratio(a)?;
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkSpec {
    pub start: usize,
    pub end: usize,
    pub alpha: usize,
    pub k: usize,
    pub kinds: TokenKindMask,
}

impl ChunkSpec {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Chunk layout for `n` tokens whose first chunk has index `first_chunk`
/// within a context of `total_len` tokens.
pub fn plan_chunks(
    config: &ModelConfig,
    n: usize,
    policy: &RatioPolicy,
    first_chunk: usize,
    total_len: usize,
) -> Result<Vec<ChunkSpec>> {
    partition(n, config.chunk_size)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let alpha = policy.alpha(config, first_chunk + i, total_len)?;
            let (kinds, k) = interleave(config, r.len(), alpha)?;
            Ok(ChunkSpec {
                start: r.start,
                end: r.end,
                alpha,
                k,
                kinds,
            })
        })
        .collect()
}
