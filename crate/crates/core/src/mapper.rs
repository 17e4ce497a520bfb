//! The visual mapper: a two-layer feed-forward projection from the encoder's
//! embedding width `d_v` into the decoder's word-embedding width `d_t`.
//!
//! One parameter set serves both the per-patch projection and the pooled
//! image representation.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapperActivation {
    Tanh,
    /// Linear mapper; mainly for tests that rely on linearity.
    Identity,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MapperConfig {
    pub d_v: usize,
    pub d_t: usize,
    /// Intermediate width; `None` means `d_t`.
    pub hidden: Option<usize>,
    pub activation: MapperActivation,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            d_v: 32,
            d_t: 48,
            hidden: None,
            activation: MapperActivation::Tanh,
        }
    }
}

impl MapperConfig {
    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(self.d_t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 || self.d_t == 0 {
            return Err(Error::Config("mapper: widths must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MapperParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> MapperParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MapperParams<U> {
        MapperParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }
}

impl MapperParams<Tensor> {
    pub fn init(cfg: &MapperConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden_width();
        MapperParams {
            w1: Tensor::uniform(vec![cfg.d_v, h], 1.0 / (cfg.d_v as f64).sqrt(), rng).with_grad(),
            b1: Tensor::zeros(vec![h]).with_grad(),
            w2: Tensor::uniform(vec![h, cfg.d_t], 1.0 / (h as f64).sqrt(), rng).with_grad(),
            b2: Tensor::zeros(vec![cfg.d_t]).with_grad(),
        }
    }
}

/// Project `[k, d_v]` patch embeddings row-wise to `[k, d_t]`:
/// linear, activation, linear.
pub fn map_patches(
    tape: &mut Tape,
    patch_embeddings: Var,
    cfg: &MapperConfig,
    params: &MapperParams<Var>,
) -> Result<Var> {
    let in_width = *tape.shape(patch_embeddings).last().unwrap_or(&0);
    if in_width != cfg.d_v {
        return Err(Error::ShapeMismatch {
            op: "map_patches",
            lhs: tape.shape(patch_embeddings).to_vec(),
            rhs: vec![cfg.d_v],
        });
    }
    let pre = tape.matmul(patch_embeddings, params.w1)?;
    let pre = tape.add_bias(pre, params.b1)?;
    let act = match cfg.activation {
        MapperActivation::Tanh => tape.tanh(pre),
        MapperActivation::Identity => pre,
    };
    let out = tape.matmul(act, params.w2)?;
    tape.add_bias(out, params.b2)
}

/// Apply the same mapper to the pooled `[d_v]` vector, producing `[d_t]`.
pub fn map_pooled(
    tape: &mut Tape,
    pooled: Var,
    cfg: &MapperConfig,
    params: &MapperParams<Var>,
) -> Result<Var> {
    let shape = tape.shape(pooled).to_vec();
    if shape != [cfg.d_v] {
        return Err(Error::ShapeMismatch {
            op: "map_pooled",
            lhs: shape,
            rhs: vec![cfg.d_v],
        });
    }
    let row = tape.reshape(pooled, vec![1, cfg.d_v])?;
    let mapped = map_patches(tape, row, cfg, params)?;
    tape.reshape(mapped, vec![cfg.d_t])
}
