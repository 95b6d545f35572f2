#![allow(dead_code)]

use sigan::{RunConfig, Tensor};

/// A deterministic 3×h×w test texture in [-1, 1]: colored blobs over
/// diagonal stripes, varied by `variant`.
pub fn texture(h: usize, w: usize, variant: u32) -> Tensor {
    let v = variant as f32;
    let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..5)
        .map(|i| {
            let t = i as f32 + 1.7 * v;
            (
                (0.5 + 0.4 * (1.3 * t).sin()) * h as f32,
                (0.5 + 0.4 * (2.1 * t + 0.5).cos()) * w as f32,
                0.08 * h.min(w) as f32 * (1.0 + 0.5 * (t * 0.7).sin().abs()),
                [(t * 0.9).sin(), (t * 1.7 + 1.0).cos(), (t * 2.3 + 2.0).sin()],
            )
        })
        .collect();
    let period = 6.0 + 2.0 * v;
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (yf, xf) = (y as f32, x as f32);
        let stripe = 0.35 * ((xf + yf) * std::f32::consts::TAU / period).sin();
        let mut val = stripe + 0.2 * (c as f32 - 1.0) * (yf / h as f32 - 0.5);
        for &(cy, cx, r, col) in &blobs {
            let d2 = (yf - cy).powi(2) + (xf - cx).powi(2);
            val += 0.8 * col[c] * (-d2 / (2.0 * r * r)).exp();
        }
        val.clamp(-1.0, 1.0)
    })
}

/// Four scales on a 64px image with narrow nets.
pub fn desk_config(epochs: usize) -> RunConfig {
    RunConfig {
        seed: 7,
        min_size: 25,
        max_size: 64,
        scale_factor: 0.75,
        base_channels: 16,
        max_channels: 32,
        sa_scales: 2,
        sa_size: 8,
        epochs,
        ..RunConfig::default()
    }
}

/// Two scales (25 and 19 px) for fast smoke tests.
pub fn toy_config(epochs: usize) -> RunConfig {
    RunConfig {
        seed: 3,
        min_size: 19,
        max_size: 25,
        scale_factor: 0.75,
        base_channels: 8,
        max_channels: 8,
        sa_scales: 1,
        sa_size: 8,
        epochs,
        ..RunConfig::default()
    }
}
