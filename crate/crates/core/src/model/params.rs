use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

pub const BASE_PREFIX: &str = "base.";
pub const BEACON_PREFIX: &str = "beacon.";

pub type Param<T> = Arc<Tensor<T>>;

#[derive(Clone, Debug)]
pub struct BaseLayer<T> {
    pub attn_norm: Param<T>,
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub wo: Param<T>,
    pub mlp_norm: Param<T>,
    pub w_gate: Param<T>,
    pub w_up: Param<T>,
    pub w_down: Param<T>,
}

/// Frozen weights of the underlying language model.
#[derive(Clone, Debug)]
pub struct BaseParams<T> {
    pub embed: Param<T>,
    pub layers: Vec<BaseLayer<T>>,
    pub final_norm: Param<T>,
    pub lm_head: Param<T>,
}

#[derive(Clone, Debug)]
pub struct BeaconLayer<T> {
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
}

/// Trainable beacon weights: per-layer projections plus one embedding row
/// (`1 × D`) shared by every beacon slot.
#[derive(Clone, Debug)]
pub struct BeaconParams<T> {
    pub embed: Param<T>,
    pub layers: Vec<BeaconLayer<T>>,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Param<T> {
    // Uniform on [-a, a] has standard deviation a / sqrt(3).
    let a = std * 3f64.sqrt();
    let dist = Uniform::new_inclusive(-a, a);
    Arc::new(Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng))))
}

fn ones<T: Scalar>(n: usize) -> Param<T> {
    Arc::new(Tensor::full(&[n], T::one()))
}

impl<T: Scalar> BaseParams<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_size;
        let q = config.query_heads * config.head_dim;
        let kv = config.kv_width();
        let i = config.intermediate_size;
        let resid = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        let embed = uniform(&mut rng, &[config.vocab_size, d], 1.0);
        let layers = (0..config.num_layers)
            .map(|_| BaseLayer {
                attn_norm: ones(d),
                wq: uniform(&mut rng, &[d, q], 1.0 / (d as f64).sqrt()),
                wk: uniform(&mut rng, &[d, kv], 1.0 / (d as f64).sqrt()),
                wv: uniform(&mut rng, &[d, kv], 1.0 / (d as f64).sqrt()),
                wo: uniform(&mut rng, &[q, d], resid / (q as f64).sqrt()),
                mlp_norm: ones(d),
                w_gate: uniform(&mut rng, &[d, i], 1.0 / (d as f64).sqrt()),
                w_up: uniform(&mut rng, &[d, i], 1.0 / (d as f64).sqrt()),
                w_down: uniform(&mut rng, &[i, d], resid / (i as f64).sqrt()),
            })
            .collect();
        Self {
            embed,
            layers,
            final_norm: ones(d),
            lm_head: uniform(&mut rng, &[d, config.vocab_size], 0.02),
        }
    }

    pub fn named(&self) -> Vec<(String, &Param<T>)> {
        let mut out = vec![(format!("{BASE_PREFIX}embed"), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("{BASE_PREFIX}layers.{l}.{n}");
            out.extend([
                (p("attn_norm"), &layer.attn_norm),
                (p("wq"), &layer.wq),
                (p("wk"), &layer.wk),
                (p("wv"), &layer.wv),
                (p("wo"), &layer.wo),
                (p("mlp_norm"), &layer.mlp_norm),
                (p("w_gate"), &layer.w_gate),
                (p("w_up"), &layer.w_up),
                (p("w_down"), &layer.w_down),
            ]);
        }
        out.push((format!("{BASE_PREFIX}final_norm"), &self.final_norm));
        out.push((format!("{BASE_PREFIX}lm_head"), &self.lm_head));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.embed];
        for layer in &mut self.layers {
            out.extend([
                &mut layer.attn_norm,
                &mut layer.wq,
                &mut layer.wk,
                &mut layer.wv,
                &mut layer.wo,
                &mut layer.mlp_norm,
                &mut layer.w_gate,
                &mut layer.w_up,
                &mut layer.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    /// SHA-256 over names, shapes and little-endian values, in order.
    pub fn hash(&self) -> String {
        hash_named(&self.named())
    }
}

impl<T: Scalar> BeaconParams<T> {
    /// Beacon projections start as copies of the raw projections and the
    /// shared embedding as the mean token embedding.
    pub fn from_base(base: &BaseParams<T>) -> Result<Self> {
        let (vocab, d) = base.embed.dims2()?;
        let mut mean = vec![T::zero(); d];
        for r in 0..vocab {
            for (m, x) in mean.iter_mut().zip(base.embed.row(r)) {
                *m += *x;
            }
        }
        let inv = T::from_f64(1.0 / vocab as f64);
        mean.iter_mut().for_each(|m| *m *= inv);
        let layers = base
            .layers
            .iter()
            .map(|l| BeaconLayer {
                wq: Arc::new((*l.wq).clone()),
                wk: Arc::new((*l.wk).clone()),
                wv: Arc::new((*l.wv).clone()),
            })
            .collect();
        Ok(Self {
            embed: Arc::new(Tensor::new(vec![1, d], mean)?),
            layers,
        })
    }

    pub fn named(&self) -> Vec<(String, &Param<T>)> {
        let mut out = vec![(format!("{BEACON_PREFIX}embed"), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("{BEACON_PREFIX}layers.{l}.{n}");
            out.extend([
                (p("wq"), &layer.wq),
                (p("wk"), &layer.wk),
                (p("wv"), &layer.wv),
            ]);
        }
        out
    }

    /// Same order as [`BeaconParams::named`].
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.embed];
        for layer in &mut self.layers {
            out.extend([&mut layer.wq, &mut layer.wk, &mut layer.wv]);
        }
        out
    }

    pub fn hash(&self) -> String {
        hash_named(&self.named())
    }
}

fn hash_named<T: Scalar>(named: &[(String, &Param<T>)]) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for (name, t) in named {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        buf.clear();
        t.data().iter().for_each(|x| x.extend_le(&mut buf));
        h.update(&buf);
    }
    hex::encode(h.finalize())
}

/// Which parameter groups record gradients on a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradMode {
    pub base: bool,
    pub beacon: bool,
}

impl GradMode {
    pub const NONE: Self = Self {
        base: false,
        beacon: false,
    };
    pub const BEACON: Self = Self {
        base: false,
        beacon: true,
    };
    pub const BASE: Self = Self {
        base: true,
        beacon: false,
    };
}

/// Per-layer handles of parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
    pub beacon_wq: Var,
    pub beacon_wk: Var,
    pub beacon_wv: Var,
}

#[derive(Clone, Debug)]
pub struct Bound {
    pub embed: Var,
    pub beacon_embed: Var,
    pub layers: Vec<BoundLayer>,
    pub final_norm: Var,
    pub lm_head: Var,
}

impl Bound {
    /// Handles in [`BeaconParams::named`] order.
    pub fn beacon_vars(&self) -> Vec<Var> {
        let mut out = vec![self.beacon_embed];
        for l in &self.layers {
            out.extend([l.beacon_wq, l.beacon_wk, l.beacon_wv]);
        }
        out
    }

    /// Handles in [`BaseParams::named`] order.
    pub fn base_vars(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend([
                l.attn_norm,
                l.wq,
                l.wk,
                l.wv,
                l.wo,
                l.mlp_norm,
                l.w_gate,
                l.w_up,
                l.w_down,
            ]);
        }
        out.push(self.final_norm);
        out.push(self.lm_head);
        out
    }
}

/// Checks that a tensor matches an expected shape, naming it on failure.
pub(crate) fn expect_shape<T: Scalar>(name: &str, t: &Tensor<T>, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Format(format!(
            "{name}: expected shape {shape:?}, found {:?}",
            t.shape()
        )));
    }
    Ok(())
}

pub(crate) fn bind_all<T: Scalar>(
    tape: &mut Tape<T>,
    base: &BaseParams<T>,
    beacon: &BeaconParams<T>,
    mode: GradMode,
) -> Bound {
    let mut b = |p: &Param<T>, g: bool| tape.leaf_shared(Arc::clone(p), g);
    let embed = b(&base.embed, mode.base);
    let beacon_embed = b(&beacon.embed, mode.beacon);
    let layers = base
        .layers
        .iter()
        .zip(&beacon.layers)
        .map(|(l, bl)| BoundLayer {
            attn_norm: b(&l.attn_norm, mode.base),
            wq: b(&l.wq, mode.base),
            wk: b(&l.wk, mode.base),
            wv: b(&l.wv, mode.base),
            wo: b(&l.wo, mode.base),
            mlp_norm: b(&l.mlp_norm, mode.base),
            w_gate: b(&l.w_gate, mode.base),
            w_up: b(&l.w_up, mode.base),
            w_down: b(&l.w_down, mode.base),
            beacon_wq: b(&bl.wq, mode.beacon),
            beacon_wk: b(&bl.wk, mode.beacon),
            beacon_wv: b(&bl.wv, mode.beacon),
        })
        .collect();
    Bound {
        embed,
        beacon_embed,
        layers,
        final_norm: b(&base.final_norm, mode.base),
        lm_head: b(&base.lm_head, mode.base),
    }
}
