//! Beacon-aware transformer layer: raw and beacon rows share every module
//! except the query/key/value projections.

use super::config::ModelConfig;
use super::params::{Bound, BoundLayer};
use crate::error::{Error, Result};
use crate::numerics::{Mask, Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Raw,
    Beacon,
}

/// Raw/beacon flag per position of an interleaved chunk.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TokenKindMask {
    kinds: Vec<TokenKind>,
}

impl TokenKindMask {
    pub fn new(kinds: Vec<TokenKind>) -> Self {
        Self { kinds }
    }

    pub fn all_raw(len: usize) -> Self {
        Self {
            kinds: vec![TokenKind::Raw; len],
        }
    }

    pub fn kinds(&self) -> &[TokenKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn raw_indices(&self) -> Vec<usize> {
        self.indices(TokenKind::Raw)
    }

    pub fn beacon_indices(&self) -> Vec<usize> {
        self.indices(TokenKind::Beacon)
    }

    pub fn beacon_count(&self) -> usize {
        self.kinds
            .iter()
            .filter(|k| **k == TokenKind::Beacon)
            .count()
    }

    fn indices(&self, kind: TokenKind) -> Vec<usize> {
        self.kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == kind)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Rows of an interleaved chunk embedded into a `(w + k) × D` matrix.
pub fn embed<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    bound: &Bound,
    tokens: &[u32],
) -> Result<(Var, TokenKindMask)> {
    let sentinel = config.beacon_token();
    let mut kinds = Vec::with_capacity(tokens.len());
    let mut raw_ids = Vec::new();
    for &t in tokens {
        if t == sentinel {
            kinds.push(TokenKind::Beacon);
        } else if (t as usize) < config.vocab_size {
            kinds.push(TokenKind::Raw);
            raw_ids.push(t as usize);
        } else {
            return Err(Error::Data(format!(
                "token id {} outside vocabulary of {}",
                t, config.vocab_size
            )));
        }
    }
    let kinds = TokenKindMask::new(kinds);
    let raw_idx = kinds.raw_indices();
    let beacon_idx = kinds.beacon_indices();
    let mut parts = Vec::new();
    if !raw_idx.is_empty() {
        parts.push((tape.gather_rows(bound.embed, &raw_ids)?, raw_idx.as_slice()));
    }
    let zeros = vec![0; beacon_idx.len()];
    if !beacon_idx.is_empty() {
        parts.push((
            tape.gather_rows(bound.beacon_embed, &zeros)?,
            beacon_idx.as_slice(),
        ));
    }
    if parts.is_empty() {
        return Err(Error::Usage("cannot embed an empty sequence".into()));
    }
    let h = tape.scatter_rows(&parts, tokens.len())?;
    Ok((h, kinds))
}

/// Projects raw rows with the base weights and beacon rows with the beacon
/// weights, then scatters both back to their original positions.
pub fn project_qkv_dual<T: Scalar>(
    tape: &mut Tape<T>,
    layer: &BoundLayer,
    h: Var,
    kinds: &TokenKindMask,
) -> Result<(Var, Var, Var)> {
    let rows = tape.value(h).dims2()?.0;
    if rows != kinds.len() {
        return Err(Error::Dimension(format!(
            "{} hidden rows for {} token kinds",
            rows,
            kinds.len()
        )));
    }
    let raw = kinds.raw_indices();
    let beacon = kinds.beacon_indices();
    let raw_w = [layer.wq, layer.wk, layer.wv];
    let beacon_w = [layer.beacon_wq, layer.beacon_wk, layer.beacon_wv];
    let mut out = [h; 3];
    if beacon.is_empty() {
        for (o, w) in out.iter_mut().zip(raw_w) {
            *o = tape.matmul(h, w)?;
        }
    } else if raw.is_empty() {
        for (o, w) in out.iter_mut().zip(beacon_w) {
            *o = tape.matmul(h, w)?;
        }
    } else {
        let hr = tape.gather_rows(h, &raw)?;
        let hb = tape.gather_rows(h, &beacon)?;
        for (o, (wr, wb)) in out.iter_mut().zip(raw_w.into_iter().zip(beacon_w)) {
            let pr = tape.matmul(hr, wr)?;
            let pb = tape.matmul(hb, wb)?;
            *o = tape.scatter_rows(&[(pr, &raw), (pb, &beacon)], rows)?;
        }
    }
    Ok((out[0], out[1], out[2]))
}

/// Query/key positions for one attention call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Positions {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

impl Positions {
    /// Condensed layout: `prefix` accumulated entries sit at `0..prefix`,
    /// the current rows continue from there.
    pub fn condensed(prefix: usize, rows: usize) -> Self {
        Self {
            queries: (prefix..prefix + rows).collect(),
            keys: (0..prefix + rows).collect(),
        }
    }
}

pub struct Attention {
    /// `rows × (h^q · d)`, heads concatenated.
    pub output: Var,
    /// Attention weights per query head, `rows × keys`.
    pub weights: Vec<Var>,
}

/// Masked multi-head attention of the current rows over `{prefix; chunk}`.
/// Keys and values arrive unrotated; rotation uses the given positions.
#[allow(clippy::too_many_arguments)]
pub fn attend_with_cache<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    q: Var,
    k: Var,
    v: Var,
    prefix: Option<(Var, Var)>,
    positions: &Positions,
) -> Result<Attention> {
    let rows = tape.value(q).dims2()?.0;
    let prefix_rows = match prefix {
        Some((pk, pv)) => {
            let r = tape.value(pk).dims2()?.0;
            if tape.value(pv).dims2()?.0 != r {
                return Err(Error::State(
                    "cached keys and values differ in length".into(),
                ));
            }
            r
        }
        None => 0,
    };
    if positions.queries.len() != rows || positions.keys.len() != prefix_rows + rows {
        return Err(Error::State(format!(
            "positions cover {} queries / {} keys, expected {} / {}",
            positions.queries.len(),
            positions.keys.len(),
            rows,
            prefix_rows + rows
        )));
    }
    if positions.queries.first().is_some_and(|&p| p != prefix_rows) {
        return Err(Error::State(format!(
            "first query position {} does not follow {} cached entries",
            positions.queries[0], prefix_rows
        )));
    }
    let (keys, values) = match prefix {
        Some((pk, pv)) => (tape.concat_rows(&[pk, k])?, tape.concat_rows(&[pv, v])?),
        None => (k, v),
    };
    let d = config.head_dim;
    let hq = config.query_heads;
    let hk = config.kv_heads;
    let group = hq / hk;
    let qr = tape.rope(q, &positions.queries, hq, config.rope_base)?;
    let qr = tape.scale(qr, T::from_f64(1.0 / (d as f64).sqrt()))?;
    let kr = tape.rope(keys, &positions.keys, hk, config.rope_base)?;
    let mask = Mask::causal(&positions.queries, &positions.keys);

    let mut kv_heads = Vec::with_capacity(hk);
    for g in 0..hk {
        let kh = tape.slice_cols(kr, g * d, d)?;
        let vh = tape.slice_cols(values, g * d, d)?;
        kv_heads.push((kh, vh));
    }
    let mut heads = Vec::with_capacity(hq);
    let mut weights = Vec::with_capacity(hq);
    for h in 0..hq {
        let (kh, vh) = kv_heads[h / group];
        let qh = tape.slice_cols(qr, h * d, d)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let w = tape.softmax_rows(scores, Some(&mask))?;
        heads.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let output = tape.concat_cols(&heads)?;
    Ok(Attention { output, weights })
}

pub struct LayerOutput {
    pub hidden: Var,
    /// Unrotated keys of every row of this chunk.
    pub keys: Var,
    pub values: Var,
    pub attention: Vec<Var>,
}

/// Pre-norm attention block and pre-norm gated MLP, both with residuals.
pub fn layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    layer: &BoundLayer,
    h: Var,
    kinds: &TokenKindMask,
    prefix: Option<(Var, Var)>,
    positions: &Positions,
) -> Result<LayerOutput> {
    let eps = T::from_f64(config.norm_eps);
    let x = tape.rms_norm(h, layer.attn_norm, eps)?;
    let (q, k, v) = project_qkv_dual(tape, layer, x, kinds)?;
    let att = attend_with_cache(tape, config, q, k, v, prefix, positions)?;
    let o = tape.matmul(att.output, layer.wo)?;
    let h1 = tape.add(h, o)?;
    let y = tape.rms_norm(h1, layer.mlp_norm, eps)?;
    let gate = tape.matmul(y, layer.w_gate)?;
    let gate = tape.silu(gate)?;
    let up = tape.matmul(y, layer.w_up)?;
    let m = tape.mul(gate, up)?;
    let down = tape.matmul(m, layer.w_down)?;
    let hidden = tape.add(h1, down)?;
    Ok(LayerOutput {
        hidden,
        keys: k,
        values: v,
        attention: att.weights,
    })
}

/// Final norm followed by the LM head, for any set of hidden rows.
pub fn lm_logits<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    bound: &Bound,
    rows: Var,
) -> Result<Var> {
    let x = tape.rms_norm(rows, bound.final_norm, T::from_f64(config.norm_eps))?;
    tape.matmul(x, bound.lm_head)
}

/// Next-token logits from the last raw row of a chunk.
pub fn last_raw_logits<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    bound: &Bound,
    hidden: Var,
    kinds: &TokenKindMask,
) -> Result<Var> {
    let last = kinds
        .kinds()
        .iter()
        .rposition(|k| *k == TokenKind::Raw)
        .ok_or_else(|| Error::Usage("chunk has no raw token to decode from".into()))?;
    let row = tape.gather_rows(hidden, &[last])?;
    lm_logits(tape, config, bound, row)
}

/// Per-layer prefix entries visible to a chunk.
pub type Prefix = Vec<Option<(Var, Var)>>;

pub struct ChunkForward {
    /// Last-layer hidden states before the final norm.
    pub hidden: Var,
    pub kinds: TokenKindMask,
    /// Unrotated `(keys, values)` of every chunk row, per layer.
    pub kv: Vec<(Var, Var)>,
    pub attention: Vec<Vec<Var>>,
}

/// Runs one interleaved chunk through all layers on top of `prefix`
/// (`prefix_len` entries per layer).
pub fn forward_chunk<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    bound: &Bound,
    tokens: &[u32],
    prefix: &Prefix,
    prefix_len: usize,
) -> Result<ChunkForward> {
    if prefix.len() != config.num_layers {
        return Err(Error::State(format!(
            "prefix has {} layers, model {}",
            prefix.len(),
            config.num_layers
        )));
    }
    let (mut h, kinds) = embed(tape, config, bound, tokens)?;
    let positions = Positions::condensed(prefix_len, tokens.len());
    let mut kv = Vec::with_capacity(config.num_layers);
    let mut attention = Vec::with_capacity(config.num_layers);
    for (layer, pre) in bound.layers.iter().zip(prefix) {
        let out = layer_forward(tape, config, layer, h, &kinds, *pre, &positions)?;
        h = out.hidden;
        kv.push((out.keys, out.values));
        attention.push(out.attention);
    }
    Ok(ChunkForward {
        hidden: h,
        kinds,
        kv,
        attention,
    })
}
