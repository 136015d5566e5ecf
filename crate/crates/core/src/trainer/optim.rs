use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Param;
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// Independent draw per chunk.
    #[default]
    ChunkWise,
    /// One draw shared by every chunk of an example.
    InstanceWise,
}

/// Seeded source of per-chunk compression ratios.
#[derive(Clone, Debug)]
pub struct RatioSchedule {
    rng: ChaCha8Rng,
    ratio_set: Vec<usize>,
    mode: RatioMode,
}

impl RatioSchedule {
    pub fn new(seed: u64, ratio_set: Vec<usize>, mode: RatioMode) -> Result<Self> {
        if ratio_set.is_empty() {
            return Err(Error::Config("ratio set is empty".into()));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            ratio_set,
            mode,
        })
    }

    pub fn sample(&mut self, num_chunks: usize) -> Result<Vec<usize>> {
        if num_chunks == 0 {
            return Err(Error::Usage("need at least one chunk".into()));
        }
        let mode = self.mode;
        let mut draw = || *self.ratio_set.choose(&mut self.rng).expect("non-empty");
        Ok(match mode {
            RatioMode::ChunkWise => (0..num_chunks).map(|_| draw()).collect(),
            RatioMode::InstanceWise => vec![draw(); num_chunks],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
}

impl AdamWConfig {
    pub fn new(lr: f64, total_steps: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            total_steps,
        }
    }
}

/// AdamW moments for one parameter group, with linear decay to zero and
/// no warmup.
#[derive(Clone, Debug)]
pub struct OptState<T> {
    pub config: AdamWConfig,
    names: Vec<String>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: usize,
}

impl<T: Scalar> OptState<T> {
    /// One moment pair per named parameter.
    pub fn new(config: AdamWConfig, params: &[(String, &Param<T>)]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Learning rate of the next update.
    pub fn lr(&self) -> f64 {
        let total = self.config.total_steps.max(1) as f64;
        self.config.lr * (1.0 - self.step as f64 / total).max(0.0)
    }

    /// Applies one update. `params` and `grads` follow the order given at
    /// construction.
    pub fn update(&mut self, params: Vec<&mut Param<T>>, grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::State(format!(
                "optimizer holds {} parameters, got {} and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let c = self.config;
        let lr = self.lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if g.shape() != p.shape() {
                return Err(Error::State(format!(
                    "gradient shape {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let p = Arc::make_mut(p);
            let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = mi.as_f64() / bc1;
                let vhat = vi.as_f64() / bc2;
                let upd = mhat / (vhat.sqrt() + c.eps) + c.weight_decay * x.as_f64();
                *x = T::from_f64(x.as_f64() - lr * upd);
            }
        }
        Ok(())
    }
}
