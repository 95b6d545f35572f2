//! Fixed-size self-attention block.
//!
//! Features are area-downsampled to `m×m`, key and query come from 1×1
//! projections of that grid, and the downsampled features themselves act as
//! values. The attended grid is upsampled back, passed through a 3×3 conv
//! and added to the input with unit weight.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sigan_autodiff::{no_grad, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::{normal_tensor, Bound, ParamStore};
use crate::pyramid::{resize_var, ResizeMode};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaConfig {
    /// Side of the internal attention grid.
    pub size: usize,
    /// Divisor for key/query channels.
    pub channel_reduction: usize,
    /// Number of coarsest scales that carry attention (`k`).
    pub scales: usize,
    /// Trunk blocks followed by an attention block.
    pub layers: Vec<usize>,
}

impl Default for SaConfig {
    fn default() -> Self {
        Self {
            size: 16,
            channel_reduction: 8,
            scales: 3,
            layers: vec![0, 1, 2],
        }
    }
}

impl SaConfig {
    /// Checks everything that does not depend on the scale count.
    pub fn validate(&self, valid_layers: usize) -> Result<()> {
        if self.size == 0 {
            return Err(Error::config("sa_size", "must be positive"));
        }
        if self.channel_reduction == 0 {
            return Err(Error::config("sa_channel_reduction", "must be at least 1"));
        }
        if self.scales == 0 {
            return Err(Error::config("sa_scales", "must be at least 1"));
        }
        if let Some(&bad) = self.layers.iter().find(|&&l| l >= valid_layers) {
            return Err(Error::config(
                "sa_layers",
                format!("layer {bad} out of range; valid positions are 0..{valid_layers}"),
            ));
        }
        Ok(())
    }

    pub fn reduced_channels(&self, channels: usize) -> usize {
        (channels / self.channel_reduction).max(1)
    }
}

/// Bound parameters of one attention block.
pub struct SaWeights<'a> {
    pub key_weight: &'a Var,
    pub key_bias: &'a Var,
    pub query_weight: &'a Var,
    pub query_bias: &'a Var,
    pub out_weight: &'a Var,
    pub out_bias: &'a Var,
}

impl<'a> SaWeights<'a> {
    pub fn from_bound(bound: &'a Bound, prefix: &str) -> Self {
        Self {
            key_weight: bound.get(&format!("{prefix}.key.weight")),
            key_bias: bound.get(&format!("{prefix}.key.bias")),
            query_weight: bound.get(&format!("{prefix}.query.weight")),
            query_bias: bound.get(&format!("{prefix}.query.bias")),
            out_weight: bound.get(&format!("{prefix}.out.weight")),
            out_bias: bound.get(&format!("{prefix}.out.bias")),
        }
    }
}

/// Adds a block's parameters under `prefix`. Output bias starts at zero.
pub fn init_params(store: &mut ParamStore, prefix: &str, channels: usize, cfg: &SaConfig, rng: &mut impl Rng) {
    let r = cfg.reduced_channels(channels);
    store.insert(format!("{prefix}.key.weight"), normal_tensor(&[r, channels], 0.0, 0.02, rng));
    store.insert(format!("{prefix}.key.bias"), Tensor::zeros(&[r]));
    store.insert(format!("{prefix}.query.weight"), normal_tensor(&[r, channels], 0.0, 0.02, rng));
    store.insert(format!("{prefix}.query.bias"), Tensor::zeros(&[r]));
    store.insert(
        format!("{prefix}.out.weight"),
        normal_tensor(&[channels, channels, 3, 3], 0.0, 0.02, rng),
    );
    store.insert(format!("{prefix}.out.bias"), Tensor::zeros(&[channels]));
}

fn add_bias(x: &Var, bias: &Var) -> Var {
    x.add(&bias.expand_inner(x.shape()))
}

/// Attention matrix `[m², m²]` (rows = queries) and the attended grid
/// `[C, m, m]`, before upsampling.
pub fn attend(features: &Var, w: &SaWeights, size: usize) -> (Var, Var) {
    let c = features.shape()[0];
    let positions = size * size;
    let grid = resize_var(features, (size, size), ResizeMode::Area).reshape(&[c, positions]);
    let keys = add_bias(&w.key_weight.matmul(&grid), w.key_bias);
    let queries = add_bias(&w.query_weight.matmul(&grid), w.query_bias);
    let attn = queries.transpose2d().matmul(&keys).softmax_rows();
    let attended = grid.matmul(&attn.transpose2d()).reshape(&[c, size, size]);
    (attn, attended)
}

/// `features + conv3×3(upsample(attend(features)))`.
pub fn sa_forward(features: &Var, w: &SaWeights, size: usize) -> Var {
    let (h, wd) = (features.shape()[1], features.shape()[2]);
    let (_, attended) = attend(features, w, size);
    let up = resize_var(&attended, (h, wd), ResizeMode::Bilinear);
    let out = add_bias(&up.conv2d(w.out_weight, 1), w.out_bias);
    features.add(&out)
}

/// The row-stochastic attention matrix for inspection.
pub fn attention_rows(features: &Tensor, w: &SaWeights, size: usize) -> Tensor {
    no_grad(|| attend(&Var::constant(features.clone()), w, size).0.value().clone())
}
