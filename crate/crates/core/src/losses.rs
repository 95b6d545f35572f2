//! WGAN-GP critic loss and the generator's adversarial + reconstruction loss.
//!
//! Critics are passed as closures returning a score map; the scalar score is
//! the spatial mean of that map.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sigan_autodiff::{grad, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Reconstruction weight.
    pub alpha: f32,
    /// Gradient-penalty weight.
    pub lambda_gp: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            lambda_gp: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be non-negative"));
        }
        if !(self.lambda_gp >= 0.0 && self.lambda_gp.is_finite()) {
            return Err(Error::config("lambda_gp", "must be non-negative"));
        }
        Ok(())
    }
}

pub struct CriticLoss {
    /// Minimized by the critic step.
    pub total: Var,
    /// `mean D(fake) − mean D(real)`.
    pub adversarial: f32,
    pub penalty: f32,
}

pub struct GeneratorLoss {
    pub total: Var,
    /// `−mean D(fake)`.
    pub adversarial: f32,
    /// Mean squared reconstruction error.
    pub reconstruction: f32,
}

fn check_same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{what}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// `(‖∇ D(x̂)‖₂ − 1)²` at `x̂ = ε·real + (1−ε)·fake`, one `ε ~ U[0, 1]` per
/// image. The result stays on the tape so it can be minimized.
pub fn gradient_penalty<D>(critic: D, real: &Tensor, fake: &Tensor, rng: &mut impl Rng) -> Result<Var>
where
    D: Fn(&Var) -> Result<Var>,
{
    check_same_shape(real.shape(), fake.shape(), "gradient penalty")?;
    let eps: f32 = rng.random_range(0.0..=1.0);
    let mixed = real.scale(eps).add(&fake.scale(1.0 - eps));
    penalty_at(critic, &mixed)
}

/// Gradient penalty at a given interpolate.
pub fn penalty_at<D>(critic: D, point: &Tensor) -> Result<Var>
where
    D: Fn(&Var) -> Result<Var>,
{
    let x = Var::leaf(point.clone());
    let score = critic(&x)?.mean();
    let g = grad(&score, &[&x], true).remove(0);
    Ok(g.l2_norm().add_scalar(-1.0).square())
}

/// Critic objective `mean D(fake) − mean D(real) + λ·gp`.
pub fn critic_loss<D>(critic: D, real: &Tensor, fake: &Tensor, lambda_gp: f32, rng: &mut impl Rng) -> Result<CriticLoss>
where
    D: Fn(&Var) -> Result<Var>,
{
    check_same_shape(real.shape(), fake.shape(), "critic loss")?;
    let d_real = critic(&Var::constant(real.clone()))?.mean();
    let d_fake = critic(&Var::constant(fake.clone()))?.mean();
    let adversarial = d_fake.sub(&d_real);
    let gp = gradient_penalty(&critic, real, fake, rng)?;
    let total = adversarial.add(&gp.scale(lambda_gp));
    Ok(CriticLoss {
        adversarial: adversarial.item(),
        penalty: gp.item(),
        total,
    })
}

/// Generator objective `−mean D(fake) + α·MSE(fake_rec, target_rec)`.
pub fn generator_loss<D>(critic: D, fake: &Var, fake_rec: &Var, target_rec: &Tensor, alpha: f32) -> Result<GeneratorLoss>
where
    D: Fn(&Var) -> Result<Var>,
{
    check_same_shape(fake_rec.shape(), target_rec.shape(), "reconstruction loss")?;
    let adversarial = critic(fake)?.mean().scale(-1.0);
    let rec = fake_rec.sub(&Var::constant(target_rec.clone())).square().mean();
    let total = adversarial.add(&rec.scale(alpha));
    Ok(GeneratorLoss {
        adversarial: adversarial.item(),
        reconstruction: rec.item(),
        total,
    })
}
