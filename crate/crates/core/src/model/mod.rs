//! Decoder-only transformer whose self-attention routes beacon rows through
//! their own query/key/value projections.

mod config;
mod forward;
mod params;

use std::path::Path;
use std::sync::Arc;

pub use config::ModelConfig;
pub use forward::{
    attend_with_cache, embed, forward_chunk, last_raw_logits, layer_forward, lm_logits,
    project_qkv_dual, Attention, ChunkForward, LayerOutput, Positions, Prefix, TokenKind,
    TokenKindMask,
};
pub use params::{
    BaseLayer, BaseParams, BeaconLayer, BeaconParams, Bound, BoundLayer, GradMode, Param,
    BASE_PREFIX, BEACON_PREFIX,
};

use crate::error::{Error, Result};
use crate::io::Container;
use crate::numerics::{Scalar, Tape, Tensor};
use params::{bind_all, expect_shape};

pub const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub base: BaseParams<T>,
    pub beacon: BeaconParams<T>,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized base weights with beacon weights copied from them.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let base = BaseParams::init(&config, seed);
        let beacon = BeaconParams::from_base(&base)?;
        Ok(Self {
            config,
            base,
            beacon,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>, mode: GradMode) -> Bound {
        bind_all(tape, &self.base, &self.beacon, mode)
    }

    /// Re-derives the beacon weights from the current base weights.
    pub fn reset_beacon(&mut self) -> Result<()> {
        self.beacon = BeaconParams::from_base(&self.base)?;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let c = |p: &Param<T>| Arc::new(p.cast::<U>());
        Model {
            config: self.config.clone(),
            base: BaseParams {
                embed: c(&self.base.embed),
                layers: self
                    .base
                    .layers
                    .iter()
                    .map(|l| BaseLayer {
                        attn_norm: c(&l.attn_norm),
                        wq: c(&l.wq),
                        wk: c(&l.wk),
                        wv: c(&l.wv),
                        wo: c(&l.wo),
                        mlp_norm: c(&l.mlp_norm),
                        w_gate: c(&l.w_gate),
                        w_up: c(&l.w_up),
                        w_down: c(&l.w_down),
                    })
                    .collect(),
                final_norm: c(&self.base.final_norm),
                lm_head: c(&self.base.lm_head),
            },
            beacon: BeaconParams {
                embed: c(&self.beacon.embed),
                layers: self
                    .beacon
                    .layers
                    .iter()
                    .map(|l| BeaconLayer {
                        wq: c(&l.wq),
                        wk: c(&l.wk),
                        wv: c(&l.wv),
                    })
                    .collect(),
            },
        }
    }

    pub fn to_container(&self) -> Container<T> {
        let tensors = self
            .base
            .named()
            .into_iter()
            .chain(self.beacon.named())
            .map(|(n, t)| (n, (**t).clone()))
            .collect();
        Container {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.clone(),
            meta: serde_json::json!({
                "config_hash": self.config.hash(),
                "base_hash": self.base.hash(),
                "beacon_hash": self.beacon.hash(),
            }),
            tensors,
        }
    }

    pub fn from_container(mut c: Container<T>) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "expected a checkpoint, found {:?}",
                c.kind
            )));
        }
        let mut model = Self::init(c.config.clone(), 0)?;
        let names: Vec<String> = model.base.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.base.params_mut()) {
            let t = c.take(name)?;
            expect_shape(name, &t, slot.shape())?;
            *slot = Arc::new(t);
        }
        let names: Vec<String> = model.beacon.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.beacon.params_mut()) {
            let t = c.take(name)?;
            expect_shape(name, &t, slot.shape())?;
            *slot = Arc::new(t);
        }
        if let Some((extra, _)) = c.tensors.first() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }

    /// Logits for every position of a single raw sequence, as a plain
    /// causal language model (no beacons, no prefix).
    pub fn vanilla_logits(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, GradMode::NONE);
        let prefix = vec![None; self.config.num_layers];
        let out = forward_chunk(&mut tape, &self.config, &bound, tokens, &prefix, 0)?;
        let logits = lm_logits(&mut tape, &self.config, &bound, out.hidden)?;
        Ok(tape.value(logits).clone())
    }
}

#[cfg(test)]
mod tests;
