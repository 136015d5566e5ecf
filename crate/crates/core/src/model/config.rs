use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Architecture hyperparameters. The defaults describe the desk-scale model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub intermediate_size: usize,
    pub vocab_size: usize,
    /// Raw tokens per chunk (`w`).
    pub chunk_size: usize,
    /// Admissible compression ratios.
    pub ratio_set: Vec<usize>,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_size: 128,
            query_heads: 4,
            kv_heads: 2,
            head_dim: 32,
            intermediate_size: 512,
            vocab_size: 256,
            chunk_size: 64,
            ratio_set: vec![2, 4, 8, 16, 32],
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_layers == 0 || self.vocab_size == 0 || self.chunk_size == 0 {
            return bad("layers, vocabulary and chunk size must be positive".into());
        }
        if self.kv_heads == 0 || self.query_heads == 0 || self.head_dim == 0 {
            return bad("head counts and head dimension must be positive".into());
        }
        if self.hidden_size != self.query_heads * self.head_dim {
            return bad(format!(
                "hidden size {} != query heads {} x head dim {}",
                self.hidden_size, self.query_heads, self.head_dim
            ));
        }
        if !self.query_heads.is_multiple_of(self.kv_heads) {
            return bad(format!(
                "query heads {} not divisible by kv heads {}",
                self.query_heads, self.kv_heads
            ));
        }
        if !self.head_dim.is_multiple_of(2) {
            return bad(format!(
                "head dimension {} must be even for rotary embedding",
                self.head_dim
            ));
        }
        if self.ratio_set.is_empty() {
            return bad("ratio set is empty".into());
        }
        for &a in &self.ratio_set {
            if a < 2 {
                return bad(format!("compression ratio {} must be at least 2", a));
            }
            if !self.chunk_size.is_multiple_of(a) {
                return bad(format!(
                    "chunk size {} not divisible by ratio {}",
                    self.chunk_size, a
                ));
            }
        }
        if !(self.norm_eps > 0.0) || !(self.rope_base > 0.0) {
            return bad("norm_eps and rope_base must be positive".into());
        }
        Ok(())
    }

    pub fn check_ratio(&self, alpha: usize) -> Result<()> {
        if self.ratio_set.contains(&alpha) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "ratio {} not in ratio set {:?}",
                alpha, self.ratio_set
            )))
        }
    }

    /// Token id reserved for beacon slots, one past the vocabulary.
    pub fn beacon_token(&self) -> u32 {
        self.vocab_size as u32
    }

    pub fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
