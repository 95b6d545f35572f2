//! Coarse-to-fine training: one scale at a time, from the coarsest down,
//! each frozen once trained.

use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sigan_autodiff::{no_grad, Adam, Tensor, Var};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{critic_loss, generator_loss};
use crate::networks::{critic_forward, generate_once, generator_forward, score, FeedbackMap, ScaleModel, MIN_CRITIC_SIDE};
use crate::params::{noise, Bound, ParamStore};
use crate::pyramid::{build_pyramid, upsample, ImagePyramid};
use crate::smoothing::smooth;

/// Losses of one epoch, as written to `log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub scale: usize,
    pub epoch: usize,
    /// Blur applied to the real image in the last critic step.
    pub sigma: Option<f64>,
    pub d_loss: f32,
    pub d_adv: f32,
    pub gp: f32,
    pub g_loss: f32,
    pub g_adv: f32,
    /// Reconstruction MSE before this epoch's generator update.
    pub rec: f32,
}

/// A frozen scale and what it hands to the scale below.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedScale {
    pub model: ScaleModel,
    /// Output of the reconstruction path at this scale.
    pub rec: Tensor,
    /// This scale's critic scores on `rec`, at this scale's dims.
    pub rec_scores: Tensor,
    pub log: Vec<EpochLog>,
}

/// The RNG for everything drawn while training scale `n`. Stream 0 is
/// reserved for the fixed reconstruction noise.
pub fn scale_rng(seed: u64, n: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n as u64 + 1);
    rng
}

/// The fixed noise driving the reconstruction path at the coarsest scale.
pub fn reconstruction_noise(seed: u64, dims: (usize, usize)) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    noise(&[3, dims.0, dims.1], &mut rng)
}

/// Runs frozen generators from `start` down to `stop`.
///
/// `scales` holds trained scales coarsest first, so scale `n` is
/// `scales[coarsest - n]`. At `start == coarsest` the chain begins from
/// noise; otherwise `start_input` supplies the prior and feedback for the
/// starting scale. With `noise_on == false` all injected noise is zero.
#[allow(clippy::too_many_arguments)]
pub(crate) fn descend(
    scales: &[TrainedScale],
    coarsest: usize,
    dims: &[(usize, usize)],
    start: usize,
    start_input: Option<(&Tensor, Option<&Tensor>)>,
    stop: usize,
    noise_on: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let model = |n: usize| &scales[coarsest - n].model;
    let mut draw = |n: usize| {
        let shape = [3, dims[n].0, dims[n].1];
        if noise_on {
            noise(&shape, rng)
        } else {
            Tensor::zeros(&shape)
        }
    };
    let mut x = match start_input {
        None => {
            if start != coarsest {
                return Err(Error::Contract(format!("scale {start} needs a prior to start from")));
            }
            generate_once(model(start), None, &draw(start), None)?
        }
        Some((prior, fb)) => generate_once(model(start), Some(prior), &draw(start), fb)?,
    };
    for n in (stop..start).rev() {
        let (prior, fb) = step_down(model(n + 1), model(n), &x, dims[n])?;
        x = generate_once(model(n), Some(&prior), &draw(n), fb.as_ref())?;
    }
    Ok(x)
}

/// Prior and feedback for `below`, from an image produced one scale up.
pub(crate) fn step_down(above: &ScaleModel, below: &ScaleModel, image: &Tensor, dims: (usize, usize)) -> Result<(Tensor, Option<Tensor>)> {
    let prior = upsample(image, dims);
    let fb = if below.has_feedback {
        Some(score(above, image)?.upsampled(dims).scores)
    } else {
        None
    };
    Ok((prior, fb))
}

fn rmse(a: &Tensor, b: &Tensor) -> f32 {
    a.mse(b).sqrt() as f32
}

fn apply_grads(adam: &mut Adam, params: &mut ParamStore, bound: &Bound, loss: &Var) {
    let grads = bound.grads(loss);
    adam.step(params.iter_mut().map(|(name, t)| (name, t, &grads[name])));
}

fn check_finite(v: f32, scale: usize, epoch: usize, what: &'static str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { scale, epoch, what })
    }
}

pub struct Trainer {
    config: RunConfig,
    pyramid: ImagePyramid,
    z_rec: Tensor,
    /// Trained scales, coarsest first.
    trained: Vec<TrainedScale>,
    run_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: RunConfig, image: &Tensor) -> Result<Self> {
        config.validate()?;
        let pyramid = build_pyramid(image, &config.pyramid())?;
        let (h, w) = pyramid.dims(pyramid.coarsest());
        if h.min(w) < MIN_CRITIC_SIDE {
            return Err(Error::config(
                "min_size",
                format!("coarsest scale {h}x{w} is below the critic's {MIN_CRITIC_SIDE}px receptive field"),
            ));
        }
        let z_rec = reconstruction_noise(config.seed, (h, w));
        Ok(Self {
            config,
            pyramid,
            z_rec,
            trained: Vec::new(),
            run_dir: None,
        })
    }

    pub(crate) fn from_parts(config: RunConfig, pyramid: ImagePyramid, z_rec: Tensor, trained: Vec<TrainedScale>) -> Self {
        Self {
            config,
            pyramid,
            z_rec,
            trained,
            run_dir: None,
        }
    }

    /// Reopens a run directory, possibly partially trained.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut t = checkpoint::load_run(dir)?;
        t.run_dir = Some(dir.to_path_buf());
        Ok(t)
    }

    /// Checkpoints into `dir` after every finished scale.
    pub fn with_run_dir(mut self, dir: &Path) -> Result<Self> {
        checkpoint::init_run(dir, &self.config, &self.pyramid)?;
        self.run_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn run_dir(&self) -> Option<&Path> {
        self.run_dir.as_deref()
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn pyramid(&self) -> &ImagePyramid {
        &self.pyramid
    }

    pub fn coarsest(&self) -> usize {
        self.pyramid.coarsest()
    }

    pub fn z_rec(&self) -> &Tensor {
        &self.z_rec
    }

    pub fn trained(&self) -> &[TrainedScale] {
        &self.trained
    }

    pub fn scale(&self, n: usize) -> Option<&TrainedScale> {
        let idx = self.coarsest().checked_sub(n)?;
        self.trained.get(idx)
    }

    pub fn is_trained(&self, n: usize) -> bool {
        self.scale(n).is_some()
    }

    pub fn is_complete(&self) -> bool {
        self.trained.len() == self.pyramid.len()
    }

    /// The scale that has to be trained next.
    pub fn next_scale(&self) -> Option<usize> {
        (!self.is_complete()).then(|| self.coarsest() - self.trained.len())
    }

    /// All epoch logs so far, coarsest scale first.
    pub fn log(&self) -> Vec<EpochLog> {
        self.trained.iter().flat_map(|s| s.log.iter().cloned()).collect()
    }

    /// Scores `image` (at scale `n_above`'s dims) with that scale's critic and
    /// resizes the map to the dims of scale `n_above − 1`.
    pub fn compute_feedback(&self, n_above: usize, image: &Tensor) -> Result<FeedbackMap> {
        if n_above == 0 {
            return Err(Error::Argument("the finest scale feeds no scale below".into()));
        }
        let s = self
            .scale(n_above)
            .ok_or_else(|| Error::Contract(format!("scale {n_above} is not trained")))?;
        Ok(score(&s.model, image)?.upsampled(self.pyramid.dims(n_above - 1)))
    }

    /// Trains every remaining scale, checkpointing after each.
    pub fn train_all(&mut self) -> Result<()> {
        while let Some(n) = self.next_scale() {
            self.train_scale(n)?;
        }
        if let Some(dir) = &self.run_dir {
            checkpoint::write_manifest(dir, self)?;
        }
        Ok(())
    }

    /// Trains scale `n`; scales above it must be done and `n` itself not.
    pub fn train_scale(&mut self, n: usize) -> Result<&TrainedScale> {
        match self.next_scale() {
            Some(next) if next == n => {}
            Some(next) => {
                return Err(Error::Contract(format!(
                    "scale {n} cannot be trained now; scale {next} is next"
                )))
            }
            None => return Err(Error::Contract(format!("all scales are trained, scale {n} included"))),
        }
        let started = std::time::Instant::now();
        let trained = self.fit(n)?;
        info!(
            "scale {n} done in {:.1}s, reconstruction mse {:.5}",
            started.elapsed().as_secs_f64(),
            trained.log.last().map_or(f32::NAN, |l| l.rec)
        );
        self.trained.push(trained);
        if let Some(dir) = &self.run_dir {
            checkpoint::save_scale(dir, self, n)?;
        }
        Ok(self.trained.last().expect("just pushed"))
    }

    fn fit(&self, n: usize) -> Result<TrainedScale> {
        let cfg = &self.config;
        let coarsest = self.coarsest();
        let dims = self.pyramid.all_dims();
        let real = self.pyramid.level(n);
        let attention_scale = cfg.arch().has_attention(n, coarsest);
        let smoothing = cfg.smoothing()?;
        let mut rng = scale_rng(cfg.seed, n);

        let mut model = ScaleModel::new(n, coarsest, &cfg.arch(), &mut rng);
        if cfg.warm_start {
            if let Some(above) = self.scale(n + 1) {
                model.generator.params.copy_matching(&above.model.generator.params);
                model.critic.params.copy_matching(&above.model.critic.params);
            }
        }

        // Reconstruction path inputs stay fixed for the whole scale.
        let (rec_prior, rec_fb, rec_noise) = match self.scale(n + 1) {
            None => (None, None, self.z_rec.clone()),
            Some(above) => {
                let prior = upsample(&above.rec, dims[n]);
                let fb = model
                    .has_feedback
                    .then(|| upsample(&above.rec_scores, dims[n]));
                (Some(prior), fb, Tensor::zeros(&[3, dims[n].0, dims[n].1]))
            }
        };
        if let Some(prior) = &rec_prior {
            model.noise_amp = cfg.noise_amp_base * rmse(prior, real);
        }
        let rec_target = if attention_scale {
            smooth(real, smoothing.sigma_rec)?
        } else {
            real.clone()
        };

        let mut adam_g = Adam::new(cfg.lr_g, cfg.beta1, cfg.beta2);
        let mut adam_d = Adam::new(cfg.lr_d, cfg.beta1, cfg.beta2);
        let decay_epoch = cfg.decay_epoch();
        let mut log = Vec::with_capacity(cfg.epochs);

        for epoch in 0..cfg.epochs {
            if epoch == decay_epoch && epoch > 0 {
                adam_g.lr *= cfg.lr_decay_factor;
                adam_d.lr *= cfg.lr_decay_factor;
            }

            // Fresh prior and feedback from a new sample of the frozen scales.
            let (prior, fb) = match self.scale(n + 1) {
                None => (None, None),
                Some(above) => {
                    let x = descend(&self.trained, coarsest, &dims, coarsest, None, n + 1, true, &mut rng)?;
                    let (p, f) = step_down(&above.model, &model, &x, dims[n])?;
                    (Some(p), f)
                }
            };
            let shape = [3, dims[n].0, dims[n].1];

            let mut entry = EpochLog {
                scale: n,
                epoch,
                sigma: None,
                d_loss: 0.0,
                d_adv: 0.0,
                gp: 0.0,
                g_loss: 0.0,
                g_adv: 0.0,
                rec: 0.0,
            };

            for _ in 0..cfg.d_steps {
                let z = noise(&shape, &mut rng);
                let fake = generate_once(&model, prior.as_ref(), &z, fb.as_ref())?;
                let real_in = if attention_scale {
                    let sigma = smoothing.draw_sigma(&mut rng);
                    entry.sigma = Some(sigma);
                    smooth(real, sigma)?
                } else {
                    real.clone()
                };
                let bound = model.critic.params.bind(true);
                let critic = |x: &Var| critic_forward(&model, &bound, x);
                let loss = critic_loss(critic, &real_in, &fake, cfg.lambda_gp, &mut rng)?;
                let total = loss.total.item();
                check_finite(total, n, epoch, "critic loss")?;
                apply_grads(&mut adam_d, &mut model.critic.params, &bound, &loss.total);
                entry.d_loss = total;
                entry.d_adv = loss.adversarial;
                entry.gp = loss.penalty;
            }

            for _ in 0..cfg.g_steps {
                let z = noise(&shape, &mut rng);
                let g_bound = model.generator.params.bind(true);
                let d_bound = model.critic.params.bind(false);
                let fake = generator_forward(&model, &g_bound, prior.as_ref(), &z, fb.as_ref())?;
                let rec = generator_forward(&model, &g_bound, rec_prior.as_ref(), &rec_noise, rec_fb.as_ref())?;
                let critic = |x: &Var| critic_forward(&model, &d_bound, x);
                let loss = generator_loss(critic, &fake, &rec, &rec_target, cfg.alpha)?;
                let total = loss.total.item();
                check_finite(total, n, epoch, "generator loss")?;
                apply_grads(&mut adam_g, &mut model.generator.params, &g_bound, &loss.total);
                entry.g_loss = total;
                entry.g_adv = loss.adversarial;
                entry.rec = loss.reconstruction;
            }

            if epoch % 100 == 0 {
                debug!(
                    "scale {n} epoch {epoch}: d {:.4} gp {:.4} g {:.4} rec {:.5}",
                    entry.d_loss, entry.gp, entry.g_loss, entry.rec
                );
            }
            log.push(entry);
        }

        let rec = generate_once(&model, rec_prior.as_ref(), &rec_noise, rec_fb.as_ref())?;
        if !rec.all_finite() {
            return Err(Error::NonFinite {
                scale: n,
                epoch: cfg.epochs,
                what: "reconstruction",
            });
        }
        let rec_scores = no_grad(|| score(&model, &rec))?.scores;
        Ok(TrainedScale {
            model,
            rec,
            rec_scores,
            log,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_streams_differ() {
        use rand::Rng;
        let a: u64 = scale_rng(1, 0).random();
        let b: u64 = scale_rng(1, 1).random();
        let c: u64 = scale_rng(1, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn tiny_images_are_rejected() {
        let cfg = RunConfig {
            min_size: 8,
            max_size: 16,
            ..RunConfig::default()
        };
        let img = Tensor::zeros(&[3, 16, 16]);
        assert!(Trainer::new(cfg, &img).is_err());
    }
}
