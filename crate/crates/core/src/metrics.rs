//! SIFID and the sample-diversity score.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sigan_autodiff::tensor::{conv2d, max_pool2d};
use sigan_autodiff::Tensor;

use crate::checkpoint::read_tensors;
use crate::error::{Error, Result};
use crate::params::normal_tensor;

/// Diagonal jitter added to covariances that are not safely positive
/// definite.
pub const COV_JITTER: f64 = 1e-6;

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + tr(C₁ + C₂ − 2 (C₁C₂)^{1/2})`.
///
/// Both covariances are symmetrized; one that is not positive definite gets
/// [`COV_JITTER`] on its diagonal. The trace of the product's square root
/// is taken as `tr((C₁^{1/2} C₂ C₁^{1/2})^{1/2})`, which has the same
/// eigenvalues but is symmetric.
pub fn frechet_distance(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(Error::Argument("feature statistics differ in dimension".into()));
    }
    let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
    if !finite(cov1) || !finite(cov2) || !mu1.iter().chain(mu2.iter()).all(|v| v.is_finite()) {
        return Err(Error::Argument("non-finite feature statistics".into()));
    }
    let prep = |c: &DMatrix<f64>| {
        let s = symmetrize(c);
        if min_eigenvalue(&s) > COV_JITTER {
            s
        } else {
            s + DMatrix::identity(d, d) * COV_JITTER
        }
    };
    let (c1, c2) = (prep(cov1), prep(cov2));
    let s1 = sqrt_psd(&c1);
    let inner = symmetrize(&(&s1 * &c2 * &s1));
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    Ok((mu1 - mu2).norm_squared() + c1.trace() + c2.trace() - 2.0 * tr_sqrt)
}

/// Mean and sample covariance of the columns of a `[F, P]` feature matrix.
pub fn feature_stats(features: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (f, p) = features.shape();
    let mu = features.column_mean();
    let centered = DMatrix::from_fn(f, p, |i, j| features[(i, j)] - mu[i]);
    let denom = (p.max(2) - 1) as f64;
    let cov = &centered * centered.transpose() / denom;
    (mu, cov)
}

/// Where in the feature stack activations are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TapPoint {
    /// Output of the second conv layer.
    SecondLayer,
    /// Last activation before the second max-pool.
    #[default]
    BeforeSecondPool,
}

pub trait FeatureExtractor {
    /// `[F, H', W']` activations of a `[3, H, W]` image in `[-1, 1]`.
    fn features(&self, image: &Tensor) -> Tensor;
}

struct ConvLayer {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn forward(&self, x: &Tensor) -> Tensor {
        let y = conv2d(x, &self.weight, self.stride, self.pad);
        let shape = y.shape().to_vec();
        y.add(&self.bias.expand_inner(&shape)).map(|v| v.max(0.0))
    }
}

/// A fixed, seeded random conv stack: conv(3→32), conv(32→32), max-pool,
/// conv(32→64), all 3×3 with ReLU. Needs no downloaded weights.
pub struct RandomConvExtractor {
    layers: Vec<ConvLayer>,
    tap: TapPoint,
}

impl RandomConvExtractor {
    pub fn new(seed: u64, tap: TapPoint) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |cin: usize, cout: usize| {
            let std = (2.0 / (cin * 9) as f32).sqrt();
            ConvLayer {
                weight: normal_tensor(&[cout, cin, 3, 3], 0.0, std, &mut rng),
                bias: Tensor::zeros(&[cout]),
                stride: 1,
                pad: 1,
            }
        };
        let layers = vec![layer(3, 32), layer(32, 32), layer(32, 64)];
        Self { layers, tap }
    }
}

impl Default for RandomConvExtractor {
    fn default() -> Self {
        Self::new(0, TapPoint::default())
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn features(&self, image: &Tensor) -> Tensor {
        let h = self.layers[0].forward(image);
        let h = self.layers[1].forward(&h);
        if self.tap == TapPoint::SecondLayer {
            return h;
        }
        let h = max_pool2d(&h, 2, 2);
        self.layers[2].forward(&h)
    }
}

/// The stem of an Inception-v3 network with batch norm folded into conv
/// biases, loaded from a tensor file (see `tools/export_inception.py`).
///
/// Layers: `conv1a` 3×3 s2, `conv2a` 3×3, `conv2b` 3×3 pad 1, max-pool 3 s2,
/// `conv3b` 1×1, `conv4a` 3×3, then the second max-pool.
pub struct InceptionStem {
    layers: Vec<ConvLayer>,
    tap: TapPoint,
}

impl InceptionStem {
    pub const LAYERS: [(&'static str, usize, usize); 5] =
        [("conv1a", 2, 0), ("conv2a", 1, 0), ("conv2b", 1, 1), ("conv3b", 1, 0), ("conv4a", 1, 0)];

    pub fn load(path: &Path, tap: TapPoint) -> Result<Self> {
        let mut tensors = read_tensors(path)?;
        let mut take = |name: String| {
            let i = tensors
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::checkpoint(path, format!("missing tensor `{name}`")))?;
            Ok::<_, Error>(tensors.swap_remove(i).1)
        };
        let mut layers = Vec::new();
        for (name, stride, pad) in Self::LAYERS {
            let weight = take(format!("{name}.weight"))?;
            let bias = take(format!("{name}.bias"))?;
            if weight.shape().len() != 4 || bias.shape() != [weight.shape()[0]] {
                return Err(Error::checkpoint(path, format!("`{name}` has malformed shapes")));
            }
            if let Some(prev) = layers.last().map(|l: &ConvLayer| l.weight.shape()[0]) {
                if weight.shape()[1] != prev {
                    return Err(Error::checkpoint(path, format!("`{name}` input channels do not chain")));
                }
            }
            layers.push(ConvLayer { weight, bias, stride, pad });
        }
        if layers[0].weight.shape()[1] != 3 {
            return Err(Error::checkpoint(path, "first layer must take 3 channels"));
        }
        Ok(Self { layers, tap })
    }
}

fn pool3(x: &Tensor) -> Tensor {
    let (_, h, w) = x.chw();
    if h < 3 || w < 3 {
        return x.clone();
    }
    max_pool2d(x, 3, 2)
}

impl FeatureExtractor for InceptionStem {
    fn features(&self, image: &Tensor) -> Tensor {
        let h = self.layers[0].forward(image);
        let h = self.layers[1].forward(&h);
        if self.tap == TapPoint::SecondLayer {
            return h;
        }
        let h = self.layers[2].forward(&h);
        let h = pool3(&h);
        let h = self.layers[3].forward(&h);
        self.layers[4].forward(&h)
    }
}

fn feature_matrix(features: &Tensor) -> DMatrix<f64> {
    let (f, h, w) = features.chw();
    let p = h * w;
    DMatrix::from_fn(f, p, |i, j| features.data()[i * p + j] as f64)
}

/// Fréchet distance between the per-position feature statistics of two
/// images of equal size.
pub fn sifid(real: &Tensor, fake: &Tensor, extractor: &dyn FeatureExtractor) -> Result<f64> {
    if real.shape() != fake.shape() {
        return Err(Error::Argument(format!(
            "images differ in shape: {:?} vs {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let fr = feature_matrix(&extractor.features(real));
    let ff = feature_matrix(&extractor.features(fake));
    let (f, p) = fr.shape();
    if p < f + 1 {
        warn!("only {p} feature positions for {f} channels; the covariance estimate is rank deficient and jittered");
    }
    let (m1, c1) = feature_stats(&fr);
    let (m2, c2) = feature_stats(&ff);
    frechet_distance(&m1, &c1, &m2, &c2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    /// `[3, H, W]` population std over samples, in `[0, 1]` pixel units.
    pub std_map: Tensor,
    pub scalar: f64,
    /// `scalar` divided by the real image's mean pixel value.
    pub normalized: f64,
}

impl DiversityReport {
    /// Channel-averaged std map, `[1, H, W]`.
    pub fn heatmap(&self) -> Tensor {
        let (c, h, w) = self.std_map.chw();
        let d = self.std_map.data();
        Tensor::from_fn(&[1, h, w], |i| (0..c).map(|ch| d[ch * h * w + i]).sum::<f32>() / c as f32)
    }
}

fn to_unit(v: f32) -> f64 {
    (v as f64 + 1.0) * 0.5
}

/// Per-pixel, per-channel spread of a set of samples.
pub fn diversity(samples: &[Tensor], real: &Tensor) -> Result<DiversityReport> {
    if samples.len() < 2 {
        return Err(Error::Argument(format!("diversity needs at least 2 samples, got {}", samples.len())));
    }
    let shape = samples[0].shape();
    if let Some(bad) = samples.iter().find(|s| s.shape() != shape) {
        return Err(Error::Argument(format!("sample shapes differ: {:?} vs {:?}", shape, bad.shape())));
    }
    let n = samples.len() as f64;
    let numel = samples[0].numel();
    let mut std = vec![0.0f32; numel];
    let mut total = 0.0;
    for (i, out) in std.iter_mut().enumerate() {
        let mean = samples.iter().map(|s| to_unit(s.data()[i])).sum::<f64>() / n;
        let var = samples.iter().map(|s| (to_unit(s.data()[i]) - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        *out = sd as f32;
        total += sd;
    }
    let scalar = total / numel as f64;
    let real_mean = real.data().iter().map(|&v| to_unit(v)).sum::<f64>() / real.numel() as f64;
    Ok(DiversityReport {
        std_map: Tensor::new(shape, std),
        scalar,
        normalized: scalar / real_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn identical_statistics_have_zero_distance() {
        let mu = dv(&[0.3, -1.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!(frechet_distance(&mu, &cov, &mu, &cov).unwrap().abs() < 1e-6);
        let singular = DMatrix::zeros(2, 2);
        assert!(frechet_distance(&mu, &singular, &mu, &singular).unwrap().abs() < 1e-6);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let d = frechet_distance(
            &dv(&[0.0]),
            &DMatrix::from_element(1, 1, 1.0),
            &dv(&[1.0]),
            &DMatrix::from_element(1, 1, 4.0),
        )
        .unwrap();
        assert!((d - 2.0).abs() < 1e-8, "{d}");
    }

    #[test]
    fn diagonal_covariances_add_per_dimension() {
        let (m1, s1, m2, s2) = ([0.0, 2.0, -1.0], [1.0, 9.0, 0.25], [1.0, 2.5, 0.0], [4.0, 1.0, 2.25]);
        let d = frechet_distance(
            &dv(&m1),
            &DMatrix::from_diagonal(&dv(&s1)),
            &dv(&m2),
            &DMatrix::from_diagonal(&dv(&s2)),
        )
        .unwrap();
        let expected: f64 = (0..3)
            .map(|i| (m1[i] - m2[i]).powi(2) + (s1[i].sqrt() - s2[i].sqrt()).powi(2))
            .sum();
        assert!((d - expected).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mu = dv(&[0.0, 0.0]);
        let cov = DMatrix::identity(2, 2);
        assert!(frechet_distance(&mu, &cov, &dv(&[0.0]), &DMatrix::identity(1, 1)).is_err());
        let nan = DMatrix::from_element(2, 2, f64::NAN);
        assert!(frechet_distance(&mu, &cov, &mu, &nan).is_err());
    }

    #[test]
    fn feature_stats_use_sample_covariance() {
        let f = DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 4.0]);
        let (mu, cov) = feature_stats(&f);
        assert_eq!(mu[0], 2.5);
        assert!((cov[(0, 0)] - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_extreme_samples_have_half_std() {
        let a = Tensor::full(&[3, 4, 4], -1.0);
        let b = Tensor::full(&[3, 4, 4], 1.0);
        let r = diversity(&[a.clone(), b], &Tensor::zeros(&[3, 4, 4])).unwrap();
        assert_eq!(r.scalar, 0.5);
        assert_eq!(r.normalized, 1.0);
        assert!(r.std_map.data().iter().all(|&v| v == 0.5));
        assert!(diversity(&[a], &Tensor::zeros(&[3, 4, 4])).is_err());
    }

    #[test]
    fn identical_samples_have_zero_diversity() {
        let a = Tensor::from_fn(&[3, 5, 5], |i| (i as f32 * 0.37).sin());
        let r = diversity(&[a.clone(), a.clone(), a.clone()], &a).unwrap();
        assert_eq!(r.scalar, 0.0);
        assert_eq!(r.heatmap().shape(), &[1, 5, 5]);
    }

    #[test]
    fn extractor_shapes_and_determinism() {
        let img = Tensor::from_fn(&[3, 20, 24], |i| ((i * 7919) % 200) as f32 / 100.0 - 1.0);
        let e = RandomConvExtractor::new(3, TapPoint::BeforeSecondPool);
        let f = e.features(&img);
        assert_eq!(f.shape(), &[64, 10, 12]);
        assert_eq!(f, RandomConvExtractor::new(3, TapPoint::BeforeSecondPool).features(&img));
        let f2 = RandomConvExtractor::new(3, TapPoint::SecondLayer).features(&img);
        assert_eq!(f2.shape(), &[32, 20, 24]);
    }
}
