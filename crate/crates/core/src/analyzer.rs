//! Closed-form forward FLOPs and KV-cache sizes for full attention versus
//! beacon compression. All counts are exact `u128` integers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Architecture and compression settings for cost accounting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsSpec {
    pub layers: u64,
    pub hidden: u64,
    pub query_heads: u64,
    pub kv_heads: u64,
    pub head_dim: u64,
    pub intermediate: u64,
    pub vocab: u64,
    pub chunk_size: u64,
    pub alpha: u64,
    /// Count softmax over `s` query rows instead of the squared total length.
    pub corrected_softmax: bool,
}

impl Default for FlopsSpec {
    fn default() -> Self {
        Self::preset("llama2-7b").expect("known preset")
    }
}

impl FlopsSpec {
    pub const PRESETS: [&'static str; 3] = ["llama2-7b", "qwen2-7b", "llama3-8b"];

    /// 7B/8B-class shapes with `w = 1024` and `α = 8`.
    pub fn preset(name: &str) -> Result<Self> {
        let (layers, hidden, query_heads, kv_heads, intermediate, vocab) = match name {
            "llama2-7b" => (32, 4096, 32, 32, 11008, 32000),
            "qwen2-7b" => (28, 3584, 28, 4, 18944, 152064),
            "llama3-8b" => (32, 4096, 32, 8, 14336, 128256),
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        };
        Ok(Self {
            layers,
            hidden,
            query_heads,
            kv_heads,
            head_dim: 128,
            intermediate,
            vocab,
            chunk_size: 1024,
            alpha: 8,
            corrected_softmax: false,
        })
    }

    pub fn from_model(config: &ModelConfig, alpha: usize) -> Self {
        Self {
            layers: config.num_layers as u64,
            hidden: config.hidden_size as u64,
            query_heads: config.query_heads as u64,
            kv_heads: config.kv_heads as u64,
            head_dim: config.head_dim as u64,
            intermediate: config.intermediate_size as u64,
            vocab: config.vocab_size as u64,
            chunk_size: config.chunk_size as u64,
            alpha: alpha as u64,
            corrected_softmax: false,
        }
    }

    pub fn with_alpha(&self, alpha: u64) -> Self {
        Self {
            alpha,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.layers,
            self.hidden,
            self.query_heads,
            self.kv_heads,
            self.head_dim,
            self.intermediate,
            self.vocab,
            self.chunk_size,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("every dimension must be positive".into()));
        }
        check_alpha(self.chunk_size, self.alpha)
    }
}

fn check_alpha(w: u64, alpha: u64) -> Result<()> {
    if alpha < 2 || !w.is_multiple_of(alpha) {
        return Err(Error::Config(format!(
            "ratio {alpha} must be at least 2 and divide chunk size {w}"
        )));
    }
    Ok(())
}

/// The five attention terms of one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionFlops {
    pub qkv: u128,
    pub qk: u128,
    pub softmax: u128,
    pub av: u128,
    pub out: u128,
}

impl AttentionFlops {
    pub fn total(&self) -> u128 {
        self.qkv + self.qk + self.softmax + self.av + self.out
    }
}

/// Attention FLOPs of one layer for `s` new rows over `s_pst` cached rows.
pub fn attention_terms(spec: &FlopsSpec, s: u64, s_pst: u64) -> AttentionFlops {
    let (s, p) = (s as u128, s_pst as u128);
    let (dm, d) = (spec.hidden as u128, spec.head_dim as u128);
    let (hq, hk) = (spec.query_heads as u128, spec.kv_heads as u128);
    let total = s + p;
    AttentionFlops {
        qkv: 2 * s * dm * d * hq + 2 * 2 * s * dm * d * hk,
        qk: 2 * hq * s * total * d,
        softmax: if spec.corrected_softmax {
            hq * s * total
        } else {
            hq * total * total
        },
        av: 2 * hq * s * total * d,
        out: 2 * s * d * hq * dm,
    }
}

pub fn f_att(spec: &FlopsSpec, s: u64, s_pst: u64) -> u128 {
    if s == 0 {
        return 0;
    }
    attention_terms(spec, s, s_pst).total()
}

/// Gated MLP and LM head terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OtherFlops {
    pub up: u128,
    pub gate: u128,
    pub down: u128,
    pub lm: u128,
}

impl OtherFlops {
    pub fn total(&self) -> u128 {
        self.up + self.gate + self.down + self.lm
    }

    /// Per-layer part (everything except the LM head).
    pub fn mlp(&self) -> u128 {
        self.up + self.gate + self.down
    }
}

pub fn other_terms(spec: &FlopsSpec, s: u64) -> OtherFlops {
    let s = s as u128;
    let (dm, i, v) = (
        spec.hidden as u128,
        spec.intermediate as u128,
        spec.vocab as u128,
    );
    OtherFlops {
        up: 2 * s * dm * 2 * i,
        gate: s * i,
        down: 2 * s * dm * i,
        lm: 2 * s * dm * v,
    }
}

/// Single-layer MLP plus LM head, as a plain sum of the four terms.
pub fn f_oth(spec: &FlopsSpec, s: u64) -> u128 {
    other_terms(spec, s).total()
}

/// Whole-model cost of `s` rows: attention and MLP per layer, LM head once.
fn forward(spec: &FlopsSpec, att: u128, s: u64) -> u128 {
    let o = other_terms(spec, s);
    spec.layers as u128 * o.mlp() + o.lm + att
}

/// Forward FLOPs of a full-attention pass over `n` tokens.
pub fn flops_full(spec: &FlopsSpec, n: u64) -> u128 {
    forward(spec, spec.layers as u128 * f_att(spec, n, 0), n)
}

/// Forward FLOPs of chunk-by-chunk beacon encoding of `n` tokens. A short
/// last chunk uses its actual length and `⌈len/α⌉` beacons.
pub fn flops_beacon(spec: &FlopsSpec, n: u64) -> u128 {
    let (w, a) = (spec.chunk_size, spec.alpha);
    let mut att = 0u128;
    let mut m = 0u64;
    let mut start = 0u64;
    while start < n {
        let len = w.min(n - start);
        let k = len.div_ceil(a);
        att += f_att(spec, len + k, m);
        m += k;
        start += len;
    }
    forward(spec, spec.layers as u128 * att, n + n.div_ceil(a))
}

/// Cached key/value rows per layer after processing `n` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KvEntries {
    pub full: u64,
    /// Accumulated beacon entries; a raw tail kept during decoding is not
    /// included.
    pub beacon: u64,
}

pub fn kv_cache_entries(n: u64, w: u64, alpha: u64) -> Result<KvEntries> {
    if w == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    check_alpha(w, alpha)?;
    let beacon = (n / w) * (w / alpha) + (n % w).div_ceil(alpha);
    Ok(KvEntries { full: n, beacon })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub n: u64,
    pub flops_full: u128,
    /// `(alpha, flops_beacon)` per requested ratio.
    pub beacon: Vec<(u64, u128)>,
}

impl CurveRow {
    pub fn reduction(&self, alpha: u64) -> Option<f64> {
        self.beacon
            .iter()
            .find(|(a, _)| *a == alpha)
            .map(|(_, f)| self.flops_full as f64 / *f as f64)
    }
}

pub fn emit_curve(spec: &FlopsSpec, lengths: &[u64], ratios: &[u64]) -> Result<Vec<CurveRow>> {
    if lengths.windows(2).any(|p| p[0] > p[1]) {
        return Err(Error::Usage("lengths must be sorted ascending".into()));
    }
    let specs: Vec<FlopsSpec> = ratios.iter().map(|&a| spec.with_alpha(a)).collect();
    for s in &specs {
        s.validate()?;
    }
    Ok(lengths
        .iter()
        .map(|&n| CurveRow {
            n,
            flops_full: flops_full(spec, n),
            beacon: specs
                .iter()
                .map(|s| (s.alpha, flops_beacon(s, n)))
                .collect(),
        })
        .collect())
}

/// Comma-separated rendering with a header row.
pub fn curve_csv(rows: &[CurveRow]) -> String {
    let ratios: Vec<u64> = rows
        .first()
        .map(|r| r.beacon.iter().map(|(a, _)| *a).collect())
        .unwrap_or_default();
    let mut out = String::from("n,flops_full");
    for a in &ratios {
        out.push_str(&format!(",flops_beacon_x{a}"));
    }
    for a in &ratios {
        out.push_str(&format!(",ratio_x{a}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{}", r.n, r.flops_full));
        for (_, f) in &r.beacon {
            out.push_str(&format!(",{f}"));
        }
        for a in &ratios {
            out.push_str(&format!(",{:.6}", r.reduction(*a).unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    out
}
