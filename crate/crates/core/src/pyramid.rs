//! Scale geometry and the real-image pyramid.
//!
//! Level 0 is the finest scale (the training image, capped at `max_size`),
//! level `N` the coarsest. Each level is derived from level 0 with
//! anti-aliased area resampling.

use serde::{Deserialize, Serialize};
use sigan_autodiff::{SeparableMap, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    /// Lower bound on the coarsest scale's shorter side.
    pub min_size: usize,
    /// Upper bound on the finest scale's longer side.
    pub max_size: usize,
    /// Per-axis ratio between consecutive scales, in (0, 1).
    pub scale_factor: f64,
    /// Keep at most this many (finest) scales.
    pub scales_cap: Option<usize>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            min_size: 25,
            max_size: 250,
            scale_factor: 0.75,
            scales_cap: None,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_factor > 0.0 && self.scale_factor < 1.0) {
            return Err(Error::config("scale_factor", "must lie strictly between 0 and 1"));
        }
        if self.min_size < 8 {
            return Err(Error::config("min_size", "must be at least 8"));
        }
        if self.max_size < self.min_size {
            return Err(Error::config("max_size", "must be at least min_size"));
        }
        if let Some(cap) = self.scales_cap {
            if cap < 2 {
                return Err(Error::config("scales_cap", "at least 2 scales are required"));
            }
        }
        Ok(())
    }
}

/// Round to nearest, ties toward zero.
fn round_half_down(x: f64) -> usize {
    (x - 0.5).ceil().max(0.0) as usize
}

/// Per-scale `(height, width)` from finest to coarsest.
pub fn plan_scales(image_dims: (usize, usize), cfg: &PyramidConfig) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    let (h, w) = image_dims;
    if h.min(w) < cfg.min_size {
        return Err(Error::config(
            "min_size",
            format!("image {h}x{w} is smaller than min_size {}", cfg.min_size),
        ));
    }
    let longer = h.max(w);
    let first = if longer > cfg.max_size {
        let f = cfg.max_size as f64 / longer as f64;
        (round_half_down(h as f64 * f), round_half_down(w as f64 * f))
    } else {
        (h, w)
    };
    if first.0.min(first.1) < cfg.min_size {
        return Err(Error::config(
            "max_size",
            format!(
                "capping to max_size {} leaves {}x{}, below min_size {}",
                cfg.max_size, first.0, first.1, cfg.min_size
            ),
        ));
    }
    let mut dims = vec![first];
    loop {
        let (ph, pw) = *dims.last().unwrap();
        let next = (
            round_half_down(ph as f64 * cfg.scale_factor),
            round_half_down(pw as f64 * cfg.scale_factor),
        );
        if next.0.min(next.1) < cfg.min_size {
            break;
        }
        dims.push(next);
    }
    if let Some(cap) = cfg.scales_cap {
        dims.truncate(cap);
    }
    if dims.len() < 2 {
        return Err(Error::config(
            "min_size",
            format!(
                "image {h}x{w} yields a single scale; at least 2 are required (lower min_size or scale_factor)"
            ),
        ));
    }
    Ok(dims)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePyramid {
    levels: Vec<Tensor>,
}

impl ImagePyramid {
    pub fn from_levels(levels: Vec<Tensor>) -> Self {
        assert!(levels.len() >= 2, "a pyramid needs at least two levels");
        Self { levels }
    }

    /// Number of scales, `N + 1`.
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Index `N` of the coarsest scale.
    pub fn coarsest(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i]
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn dims(&self, i: usize) -> (usize, usize) {
        let (_, h, w) = self.levels[i].chw();
        (h, w)
    }

    pub fn all_dims(&self) -> Vec<(usize, usize)> {
        (0..self.len()).map(|i| self.dims(i)).collect()
    }
}

pub fn build_pyramid(image: &Tensor, cfg: &PyramidConfig) -> Result<ImagePyramid> {
    let (c, h, w) = image.chw();
    if c != 3 {
        return Err(Error::Argument(format!("expected a 3-channel image, got {c} channels")));
    }
    let dims = plan_scales((h, w), cfg)?;
    let finest = if dims[0] == (h, w) {
        image.clone()
    } else {
        resize(image, dims[0], ResizeMode::Area)
    };
    let mut levels = vec![finest];
    for &d in &dims[1..] {
        levels.push(resize(&levels[0], d, ResizeMode::Area));
    }
    Ok(ImagePyramid { levels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    Bilinear,
    Area,
    /// Area along shrinking axes, bilinear along growing ones.
    Auto,
}

/// `[n_out, n_in]` box-filter weights: each output pixel averages the input
/// interval it covers, with fractional overlap at the ends.
fn area_matrix(n_in: usize, n_out: usize) -> Tensor {
    let s = n_in as f64 / n_out as f64;
    let mut m = vec![0.0f32; n_out * n_in];
    for j in 0..n_out {
        let (lo, hi) = (j as f64 * s, (j + 1) as f64 * s);
        let first = lo.floor() as usize;
        let last = (hi.ceil() as usize).min(n_in);
        for i in first..last {
            let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
            m[j * n_in + i] = (overlap / s) as f32;
        }
    }
    Tensor::new(&[n_out, n_in], m)
}

/// `[n_out, n_in]` linear-interpolation weights with half-pixel centers and
/// edge clamping.
fn bilinear_matrix(n_in: usize, n_out: usize) -> Tensor {
    let s = n_in as f64 / n_out as f64;
    let mut m = vec![0.0f32; n_out * n_in];
    for j in 0..n_out {
        let src = ((j as f64 + 0.5) * s - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[j * n_in + i0] += (1.0 - frac) as f32;
        m[j * n_in + i1] += frac as f32;
    }
    Tensor::new(&[n_out, n_in], m)
}

fn axis_matrix(n_in: usize, n_out: usize, mode: ResizeMode) -> Tensor {
    match mode {
        ResizeMode::Area => area_matrix(n_in, n_out),
        ResizeMode::Bilinear => bilinear_matrix(n_in, n_out),
        ResizeMode::Auto if n_out <= n_in => area_matrix(n_in, n_out),
        ResizeMode::Auto => bilinear_matrix(n_in, n_out),
    }
}

/// The separable linear map taking `from` dims to `to` dims.
pub fn resize_map(from: (usize, usize), to: (usize, usize), mode: ResizeMode) -> SeparableMap {
    assert!(to.0 >= 1 && to.1 >= 1, "resize target must be at least 1x1");
    SeparableMap::new(axis_matrix(from.0, to.0, mode), axis_matrix(from.1, to.1, mode))
}

pub fn resize(image: &Tensor, to: (usize, usize), mode: ResizeMode) -> Tensor {
    let (_, h, w) = image.chw();
    if (h, w) == to {
        return image.clone();
    }
    resize_map((h, w), to, mode).apply(image)
}

/// Differentiable [`resize`].
pub fn resize_var(x: &Var, to: (usize, usize), mode: ResizeMode) -> Var {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if (h, w) == to {
        return x.clone();
    }
    x.separable(&resize_map((h, w), to, mode))
}

/// Bilinear upsampling used between scales.
pub fn upsample(image: &Tensor, to: (usize, usize)) -> Tensor {
    resize(image, to, ResizeMode::Auto)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(min: usize, max: usize, r: f64) -> PyramidConfig {
        PyramidConfig {
            min_size: min,
            max_size: max,
            scale_factor: r,
            scales_cap: None,
        }
    }

    #[test]
    fn plan_250_square() {
        // Hand loop: h <- round(h * 0.75) until below 25.
        let dims = plan_scales((250, 250), &cfg(25, 250, 0.75)).unwrap();
        let sides: Vec<usize> = dims.iter().map(|d| d.0).collect();
        assert_eq!(sides, vec![250, 187, 140, 105, 79, 59, 44, 33, 25]);
        assert!(dims.iter().all(|d| d.0 == d.1));
    }

    #[test]
    fn plan_single_scale_is_rejected() {
        let err = plan_scales((25, 25), &cfg(25, 250, 0.75)).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn plan_landscape_half() {
        let dims = plan_scales((100, 50), &cfg(25, 250, 0.5)).unwrap();
        assert_eq!(dims, vec![(100, 50), (50, 25)]);
    }

    #[test]
    fn plan_caps_the_longer_side() {
        let dims = plan_scales((600, 300), &cfg(25, 250, 0.75)).unwrap();
        assert_eq!(dims[0], (250, 125));
    }

    #[test]
    fn plan_rejects_small_images_and_bad_config() {
        assert!(plan_scales((20, 40), &cfg(25, 250, 0.75)).is_err());
        assert!(plan_scales((100, 100), &cfg(25, 250, 1.0)).is_err());
        assert!(plan_scales((100, 100), &cfg(4, 250, 0.5)).is_err());
        assert!(plan_scales((100, 100), &cfg(25, 20, 0.5)).is_err());
    }

    #[test]
    fn scales_cap_keeps_finest_levels() {
        let mut c = cfg(25, 250, 0.75);
        c.scales_cap = Some(3);
        let dims = plan_scales((64, 64), &c).unwrap();
        assert_eq!(dims, vec![(64, 64), (48, 48), (36, 36)]);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::full(&[3, 64, 48], 0.25);
        let pyr = build_pyramid(&img, &cfg(25, 250, 0.75)).unwrap();
        for level in pyr.levels() {
            assert!(level.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        }
    }

    #[test]
    fn finest_level_is_the_input_bit_exactly() {
        let img = Tensor::from_fn(&[3, 40, 30], |i| ((i * 7919) % 200) as f32 / 100.0 - 1.0);
        let pyr = build_pyramid(&img, &cfg(10, 250, 0.75)).unwrap();
        assert_eq!(pyr.level(0), &img);
        assert_eq!(pyr.all_dims(), plan_scales((40, 30), &cfg(10, 250, 0.75)).unwrap());
    }

    #[test]
    fn checkerboard_blocks_average() {
        // 1-pixel checkerboard: each 2x2 block averages to 0.5.
        let img = Tensor::from_fn(&[1, 4, 4], |i| ((i / 4 + i % 4) % 2) as f32);
        let out = resize(&img, (2, 2), ResizeMode::Area);
        assert_eq!(out.data(), &[0.5, 0.5, 0.5, 0.5]);

        // Pyramid: 2x2 blocks of distinct values at 16x16 halve to block means.
        let img = Tensor::from_fn(&[3, 16, 16], |i| {
            let (y, x) = ((i / 16) % 16, i % 16);
            ((y / 2 + x / 2) % 2) as f32 * 0.5 + (x % 2) as f32 * 0.25
        });
        let pyr = build_pyramid(&img, &cfg(8, 250, 0.5)).unwrap();
        let coarse = pyr.level(1);
        for y in 0..8 {
            for x in 0..8 {
                let mut mean = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        mean += img.data()[(2 * y + dy) * 16 + 2 * x + dx] / 4.0;
                    }
                }
                assert!((coarse.data()[y * 8 + x] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bilinear_ramp_matches_closed_form() {
        // f(t) = t on input pixel centers 0 and 1; outputs sample f at the
        // clamped source coordinates (j + 0.5) / 2 - 0.5.
        let img = Tensor::new(&[1, 1, 2], vec![0.0, 1.0]);
        let out = resize(&img, (1, 4), ResizeMode::Bilinear);
        let expected: Vec<f32> = (0..4)
            .map(|j| ((j as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0) as f32)
            .collect();
        assert_eq!(out.data(), expected.as_slice());
        assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn same_dims_is_identity() {
        let img = Tensor::from_fn(&[3, 5, 7], |i| i as f32 * 0.01);
        for mode in [ResizeMode::Area, ResizeMode::Bilinear, ResizeMode::Auto] {
            assert_eq!(resize(&img, (5, 7), mode), img);
        }
    }

    proptest! {
        #[test]
        fn resize_round_trip_shape_and_constants(
            h in 1usize..40, w in 1usize..40, h2 in 1usize..40, w2 in 1usize..40, c in -1.0f32..1.0,
        ) {
            let img = Tensor::full(&[3, h, w], c);
            for mode in [ResizeMode::Area, ResizeMode::Bilinear] {
                let there = resize(&img, (h2, w2), mode);
                prop_assert_eq!(there.shape(), &[3, h2, w2]);
                prop_assert!(there.data().iter().all(|&v| (v - c).abs() < 1e-6));
                let back = resize(&there, (h, w), mode);
                prop_assert_eq!(back.shape(), &[3, h, w]);
            }
        }
    }
}
