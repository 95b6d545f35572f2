//! Gaussian smoothing of real images before they reach the critic.
//!
//! At self-attention scales the critic sees the real image blurred with a
//! freshly drawn `σ ~ U(σ_min, σ_max)`; reconstruction targets use the fixed
//! `σ_rec`. Generated images are never smoothed.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sigan_autodiff::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSpec {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_rec: f64,
}

impl SmoothingSpec {
    /// `σ_rec` defaults to the midpoint of the range.
    pub fn new(sigma_min: f64, sigma_max: f64, sigma_rec: Option<f64>) -> Result<Self> {
        let spec = Self {
            sigma_min,
            sigma_max,
            sigma_rec: sigma_rec.unwrap_or(0.5 * (sigma_min + sigma_max)),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min.is_finite()) {
            return Err(Error::config("sigma_min", "must be positive"));
        }
        if !(self.sigma_max >= self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::config("sigma_max", "must be at least sigma_min"));
        }
        if !(self.sigma_min..=self.sigma_max).contains(&self.sigma_rec) {
            return Err(Error::config("sigma_rec", "must lie in [sigma_min, sigma_max]"));
        }
        Ok(())
    }

    pub fn draw_sigma(&self, rng: &mut impl Rng) -> f64 {
        if self.sigma_min == self.sigma_max {
            return self.sigma_min;
        }
        Uniform::new_inclusive(self.sigma_min, self.sigma_max)
            .expect("validated range")
            .sample(rng)
    }
}

/// Radius of the truncated kernel: `ceil(3σ)`.
fn radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Normalized 1D sampled Gaussian of length `2·ceil(3σ) + 1`.
pub fn gaussian_kernel_1d(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let r = radius(sigma) as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / z).collect())
}

/// Square 2D kernel, the outer product of the 1D kernel with itself.
pub fn gaussian_kernel(sigma: f64) -> Result<Tensor> {
    let k = gaussian_kernel_1d(sigma)?;
    let n = k.len();
    Ok(Tensor::from_fn(&[n, n], |i| (k[i / n] * k[i % n]) as f32))
}

/// Mirror index with the edge sample repeated (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian blur of every channel with edge-repeating reflection.
pub fn smooth(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let k = gaussian_kernel_1d(sigma)?;
    let r = (k.len() / 2) as isize;
    let (c, h, w) = image.chw();
    let src = image.data();
    let mut tmp = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    acc += kv * row[reflect(x as isize + t as isize - r, w)] as f64;
                }
                tmp[(ch * h + y) * w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    acc += kv * tmp[(ch * h + reflect(y as isize + t as isize - r, h)) * w + x];
                }
                out[(ch * h + y) * w + x] = acc as f32;
            }
        }
    }
    Ok(Tensor::new(&[c, h, w], out))
}

/// A real sample for the critic: `image` blurred with a freshly drawn σ.
pub fn sample_real(image: &Tensor, spec: &SmoothingSpec, rng: &mut impl Rng) -> Tensor {
    let sigma = spec.draw_sigma(rng);
    smooth(image, sigma).expect("validated sigma")
}
