//! Inference on a fully trained model stack.

use rand_chacha::ChaCha8Rng;
use sigan_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::networks::{generate_once, score, MIN_CRITIC_SIDE};
use crate::pyramid::{resize, ResizeMode};
use crate::trainer::{descend, step_down, Trainer};

/// Outside-mask distance over which edits fade out.
pub const FEATHER_WIDTH: usize = 5;
const FEATHER_SIGMA: f64 = 2.5;

pub struct Sampler<'a> {
    run: &'a Trainer,
}

impl<'a> Sampler<'a> {
    pub fn new(run: &'a Trainer) -> Result<Self> {
        if !run.is_complete() {
            return Err(Error::Contract(format!(
                "model is not fully trained ({} of {} scales)",
                run.trained().len(),
                run.pyramid().len()
            )));
        }
        Ok(Self { run })
    }

    pub fn coarsest(&self) -> usize {
        self.run.coarsest()
    }

    pub fn finest_dims(&self) -> (usize, usize) {
        self.run.pyramid().dims(0)
    }

    /// Per-scale dims when the finest output is `out`; every scale is
    /// stretched by the same per-axis factor.
    pub fn scaled_dims(&self, out: Option<(usize, usize)>) -> Result<Vec<(usize, usize)>> {
        let base = self.run.pyramid().all_dims();
        let Some(out) = out else {
            return Ok(base);
        };
        let (fy, fx) = (out.0 as f64 / base[0].0 as f64, out.1 as f64 / base[0].1 as f64);
        let mut dims: Vec<(usize, usize)> = base
            .iter()
            .map(|&(h, w)| ((h as f64 * fy).round() as usize, (w as f64 * fx).round() as usize))
            .collect();
        dims[0] = out;
        if let Some((n, &(h, w))) = dims.iter().enumerate().find(|(_, d)| d.0.min(d.1) < MIN_CRITIC_SIDE) {
            return Err(Error::Argument(format!(
                "output size gives scale {n} dims {h}x{w}, below the {MIN_CRITIC_SIDE}px minimum"
            )));
        }
        Ok(dims)
    }

    /// `count` samples starting at `start_scale`. Below the coarsest scale
    /// the chain starts from the downsampled real image, with feedback from
    /// the critic one scale up scoring the real image at its own scale.
    pub fn generate(
        &self,
        start_scale: usize,
        count: usize,
        rng: &mut ChaCha8Rng,
        out_dims: Option<(usize, usize)>,
    ) -> Result<Vec<Tensor>> {
        let coarsest = self.coarsest();
        if start_scale > coarsest {
            return Err(Error::Argument(format!(
                "start scale {start_scale} is beyond the coarsest scale {coarsest}"
            )));
        }
        let dims = self.scaled_dims(out_dims)?;
        let start = if start_scale < coarsest {
            let pyr = self.run.pyramid();
            let prior = resize(pyr.level(start_scale), dims[start_scale], ResizeMode::Auto);
            let above = resize(pyr.level(start_scale + 1), dims[start_scale + 1], ResizeMode::Auto);
            Some(self.entry(start_scale, prior, &above)?)
        } else {
            None
        };
        (0..count)
            .map(|_| {
                let input = start.as_ref().map(|(p, f)| (p, f.as_ref()));
                descend(self.run.trained(), coarsest, &dims, start_scale, input, 0, true, rng)
            })
            .collect()
    }

    /// Prior and feedback for entering the chain at scale `s`.
    fn entry(&self, s: usize, prior: Tensor, above: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let model = &self.scale(s).model;
        let (_, h, w) = prior.chw();
        let fb = if model.has_feedback {
            Some(score(&self.scale(s + 1).model, above)?.upsampled((h, w)).scores)
        } else {
            None
        };
        Ok((prior, fb))
    }

    fn scale(&self, n: usize) -> &crate::trainer::TrainedScale {
        self.run.scale(n).expect("complete model")
    }

    /// The zero-noise reconstruction path; equals the stored finest
    /// reconstruction.
    pub fn reconstruct(&self) -> Result<Tensor> {
        let coarsest = self.coarsest();
        let dims = self.run.pyramid().all_dims();
        let mut x = generate_once(&self.scale(coarsest).model, None, self.run.z_rec(), None)?;
        for n in (0..coarsest).rev() {
            let (prior, fb) = step_down(&self.scale(n + 1).model, &self.scale(n).model, &x, dims[n])?;
            x = generate_once(&self.scale(n).model, Some(&prior), &Tensor::zeros(&[3, dims[n].0, dims[n].1]), fb.as_ref())?;
        }
        Ok(x)
    }

    /// Repaints `composite` by injecting it at `inject_scale` and running the
    /// finer scales. Output has the finest dims.
    pub fn harmonize(&self, composite: &Tensor, inject_scale: usize, noise_on: bool, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let coarsest = self.coarsest();
        if inject_scale >= coarsest {
            return Err(Error::Argument(format!(
                "injection scale must be below the coarsest scale {coarsest}, got {inject_scale}"
            )));
        }
        if composite.shape().len() != 3 || composite.shape()[0] != 3 {
            return Err(Error::Argument(format!("composite must be 3xHxW, got {:?}", composite.shape())));
        }
        let dims = self.run.pyramid().all_dims();
        let prior = resize(composite, dims[inject_scale], ResizeMode::Auto);
        let above = resize(composite, dims[inject_scale + 1], ResizeMode::Auto);
        let (prior, fb) = self.entry(inject_scale, prior, &above)?;
        descend(
            self.run.trained(),
            coarsest,
            &dims,
            inject_scale,
            Some((&prior, fb.as_ref())),
            0,
            noise_on,
            rng,
        )
    }

    /// Harmonizes `edited` and keeps the result only inside `mask` (feathered
    /// outward); elsewhere the edited image passes through unchanged.
    pub fn edit(
        &self,
        edited: &Tensor,
        mask: &Tensor,
        inject_scale: usize,
        noise_on: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let (c, h, w) = edited.chw();
        if c != 3 || (h, w) != self.finest_dims() {
            return Err(Error::Argument(format!(
                "edited image must be 3x{}x{}, got {:?}",
                self.finest_dims().0,
                self.finest_dims().1,
                edited.shape()
            )));
        }
        if mask.shape() != [1, h, w] {
            return Err(Error::Argument(format!("mask must be 1x{h}x{w}, got {:?}", mask.shape())));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Argument("mask must be binary (0 or 1 everywhere)".into()));
        }
        let harmonized = self.harmonize(edited, inject_scale, noise_on, rng)?;
        let weight = feather(mask);
        let wd = weight.data();
        let mut out = edited.clone();
        for ch in 0..3 {
            let range = ch * h * w..(ch + 1) * h * w;
            for ((o, &hv), &m) in out.data_mut()[range.clone()]
                .iter_mut()
                .zip(&harmonized.data()[range])
                .zip(wd)
            {
                *o = m * hv + (1.0 - m) * *o;
            }
        }
        Ok(out)
    }
}

/// Blend weights for a binary mask: 1 inside, a Gaussian fall-off of the
/// distance to the mask within [`FEATHER_WIDTH`] pixels outside, 0 beyond.
pub fn feather(mask: &Tensor) -> Tensor {
    let (_, h, w) = mask.chw();
    let m = mask.data();
    let r = FEATHER_WIDTH as isize;
    let mut out = vec![0.0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = (y * w as isize + x) as usize;
            if m[i] == 1.0 {
                out[i] = 1.0;
                continue;
            }
            let mut best = i64::MAX;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    if m[(yy * w as isize + xx) as usize] == 1.0 {
                        best = best.min((dy * dy + dx * dx) as i64);
                    }
                }
            }
            if best <= (r * r) as i64 {
                out[i] = (-(best as f64) / (2.0 * FEATHER_SIGMA * FEATHER_SIGMA)).exp() as f32;
            }
        }
    }
    Tensor::new(&[1, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feather_profile() {
        let mut m = Tensor::zeros(&[1, 20, 20]);
        m.data_mut()[10 * 20 + 10] = 1.0;
        let f = feather(&m);
        let at = |y: usize, x: usize| f.data()[y * 20 + x];
        assert_eq!(at(10, 10), 1.0);
        assert!((at(10, 11) as f64 - (-1.0 / 12.5f64).exp()).abs() < 1e-6);
        assert!((at(13, 14) as f64 - (-25.0 / 12.5f64).exp()).abs() < 1e-6);
        assert_eq!(at(10, 16), 0.0);
        assert_eq!(at(14, 14), 0.0);
        assert!(f.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn feather_of_empty_and_full_masks() {
        let z = Tensor::zeros(&[1, 6, 7]);
        assert_eq!(feather(&z), z);
        let o = Tensor::ones(&[1, 6, 7]);
        assert_eq!(feather(&o), o);
    }
}
