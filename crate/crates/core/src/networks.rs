//! Per-scale generator and patch critic.
//!
//! Both share one fully-convolutional trunk: four `conv3×3 → instance norm →
//! LeakyReLU(0.2)` blocks followed by a tail conv. Blocks listed in the
//! attention config get a self-attention block appended at attention scales.
//! All convs are same-padded, so critic score maps align pixelwise with the
//! image they score.

use rand::Rng;
use sigan_autodiff::{no_grad, Tensor, Var};

use crate::attention::{self, SaConfig, SaWeights};
use crate::error::{Error, Result};
use crate::params::{normal_tensor, Bound, ParamStore};
use crate::pyramid::upsample;

/// Conv blocks with normalization and activation; the tail comes after them.
pub const TRUNK_BLOCKS: usize = 4;
/// Receptive field of five stacked 3×3 convs.
pub const MIN_CRITIC_SIDE: usize = 11;

const LEAKY_SLOPE: f32 = 0.2;
const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    pub in_channels: usize,
    pub width: usize,
    pub out_channels: usize,
    pub tanh_out: bool,
    /// Attention placement, present only at attention scales.
    pub attention: Option<SaConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub spec: NetSpec,
    pub params: ParamStore,
}

fn block_name(i: usize) -> String {
    format!("block{i}")
}

impl Net {
    pub fn new(spec: NetSpec, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let mut cin = spec.in_channels;
        for i in 0..TRUNK_BLOCKS {
            let b = block_name(i);
            params.insert(format!("{b}.conv.weight"), normal_tensor(&[spec.width, cin, 3, 3], 0.0, 0.02, rng));
            params.insert(format!("{b}.norm.weight"), normal_tensor(&[spec.width], 1.0, 0.02, rng));
            params.insert(format!("{b}.norm.bias"), Tensor::zeros(&[spec.width]));
            if let Some(sa) = &spec.attention {
                if sa.layers.contains(&i) {
                    attention::init_params(&mut params, &format!("{b}.sa"), spec.width, sa, rng);
                }
            }
            cin = spec.width;
        }
        params.insert(
            "tail.conv.weight",
            normal_tensor(&[spec.out_channels, spec.width, 3, 3], 0.0, 0.02, rng),
        );
        params.insert("tail.conv.bias", Tensor::zeros(&[spec.out_channels]));
        Self { spec, params }
    }

    pub fn has_attention(&self) -> bool {
        self.params.iter().any(|(n, _)| n.contains(".sa."))
    }

    pub fn forward(&self, bound: &Bound, x: &Var) -> Var {
        assert_eq!(
            x.shape()[0],
            self.spec.in_channels,
            "network expects {} input channels",
            self.spec.in_channels
        );
        let mut h = x.clone();
        for i in 0..TRUNK_BLOCKS {
            let b = block_name(i);
            h = h.conv2d(bound.get(&format!("{b}.conv.weight")), 1);
            h = instance_norm(&h, bound.get(&format!("{b}.norm.weight")), bound.get(&format!("{b}.norm.bias")));
            h = h.leaky_relu(LEAKY_SLOPE);
            if let Some(sa) = &self.spec.attention {
                if sa.layers.contains(&i) {
                    let w = SaWeights::from_bound(bound, &format!("{b}.sa"));
                    h = attention::sa_forward(&h, &w, sa.size);
                }
            }
        }
        let out = h.conv2d(bound.get("tail.conv.weight"), 1);
        let out = out.add(&bound.get("tail.conv.bias").expand_inner(out.shape()));
        if self.spec.tanh_out {
            out.tanh()
        } else {
            out
        }
    }
}

/// Per-channel normalization over the spatial extent with a learned affine.
pub fn instance_norm(x: &Var, gamma: &Var, beta: &Var) -> Var {
    let shape = x.shape().to_vec();
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let flat = x.reshape(&[c, hw]);
    let mean = flat.sum_inner(c).scale(1.0 / hw as f32).expand_inner(&[c, hw]);
    let centered = flat.sub(&mean);
    let var = centered.square().sum_inner(c).scale(1.0 / hw as f32);
    let inv_std = var.add_scalar(NORM_EPS).powf(-0.5).expand_inner(&[c, hw]);
    let normed = centered.mul(&inv_std);
    normed
        .mul(&gamma.expand_inner(&[c, hw]))
        .add(&beta.expand_inner(&[c, hw]))
        .reshape(&shape)
}

/// Critic score map of a coarser scale, carried to the next finer one.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackMap {
    pub scores: Tensor,
    pub source_scale: usize,
}

impl FeedbackMap {
    /// Bilinearly resized to the consuming scale.
    pub fn upsampled(&self, to: (usize, usize)) -> FeedbackMap {
        FeedbackMap {
            scores: upsample(&self.scores, to),
            source_scale: self.source_scale,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.scores.chw();
        (h, w)
    }
}

/// Generator, critic and noise amplitude for one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleModel {
    pub index: usize,
    pub generator: Net,
    pub critic: Net,
    pub has_feedback: bool,
    /// Multiplier on injected noise; 1 at the coarsest scale.
    pub noise_amp: f32,
}

/// Architecture knobs shared by all scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub base_channels: usize,
    pub max_channels: usize,
    pub feedback: bool,
    pub attention: SaConfig,
}

impl ArchConfig {
    /// Channels double every four scales counted from the coarsest.
    pub fn width(&self, index: usize, coarsest: usize) -> usize {
        let doublings = (coarsest - index) / 4;
        (self.base_channels << doublings).min(self.max_channels)
    }

    /// Attention sits on scales `N` down to `N − k + 1`.
    pub fn has_attention(&self, index: usize, coarsest: usize) -> bool {
        index + self.attention.scales > coarsest
    }
}

impl ScaleModel {
    pub fn new(index: usize, coarsest: usize, arch: &ArchConfig, rng: &mut impl Rng) -> Self {
        let width = arch.width(index, coarsest);
        let attention = arch.has_attention(index, coarsest).then(|| arch.attention.clone());
        let has_feedback = arch.feedback && index < coarsest;
        let generator = Net::new(
            NetSpec {
                in_channels: 3 + usize::from(has_feedback),
                width,
                out_channels: 3,
                tanh_out: true,
                attention: attention.clone(),
            },
            rng,
        );
        let critic = Net::new(
            NetSpec {
                in_channels: 3,
                width,
                out_channels: 1,
                tanh_out: false,
                attention,
            },
            rng,
        );
        Self {
            index,
            generator,
            critic,
            has_feedback,
            noise_amp: 1.0,
        }
    }

    pub fn is_coarsest(&self, coarsest: usize) -> bool {
        self.index == coarsest
    }

    pub fn has_attention(&self) -> bool {
        self.generator.has_attention()
    }
}

/// One generator pass on the tape.
///
/// At the coarsest scale (`prior == None`) the output is the tanh head
/// applied to noise. Below it the network sees `prior + noise_amp·noise`
/// (plus the feedback channel) and its output is added to the prior as a
/// residual, clamped to `[-1, 1]`.
pub fn generator_forward(
    model: &ScaleModel,
    bound: &Bound,
    prior: Option<&Tensor>,
    noise: &Tensor,
    feedback: Option<&Tensor>,
) -> Result<Var> {
    let noisy = noise.scale(model.noise_amp);
    let Some(prior) = prior else {
        return Ok(model.generator.forward(bound, &Var::constant(noisy)));
    };
    if prior.shape() != noise.shape() {
        return Err(Error::Contract(format!(
            "prior {:?} and noise {:?} differ in shape",
            prior.shape(),
            noise.shape()
        )));
    }
    let mut input = prior.add(&noisy);
    if model.has_feedback {
        let fb = feedback.ok_or_else(|| {
            Error::Contract(format!("scale {} needs an adversarial feedback map", model.index))
        })?;
        if fb.shape()[1..] != prior.shape()[1..] {
            return Err(Error::Contract(format!(
                "feedback {:?} does not match prior {:?}",
                fb.shape(),
                prior.shape()
            )));
        }
        input = Tensor::concat_channels(&[&input, fb]);
    }
    let residual = model.generator.forward(bound, &Var::constant(input));
    Ok(Var::constant(prior.clone()).add(&residual).clamp(-1.0, 1.0))
}

/// Critic score map `[1, H, W]` on the tape.
pub fn critic_forward(model: &ScaleModel, bound: &Bound, image: &Var) -> Result<Var> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h.min(w) < MIN_CRITIC_SIDE {
        return Err(Error::Contract(format!(
            "critic input {h}x{w} is below the {MIN_CRITIC_SIDE}x{MIN_CRITIC_SIDE} receptive field"
        )));
    }
    Ok(model.critic.forward(bound, image))
}

/// Inference-only generator pass.
pub fn generate_once(model: &ScaleModel, prior: Option<&Tensor>, noise: &Tensor, feedback: Option<&Tensor>) -> Result<Tensor> {
    no_grad(|| {
        let bound = model.generator.params.bind(false);
        Ok(generator_forward(model, &bound, prior, noise, feedback)?.value().clone())
    })
}

/// Inference-only critic pass.
pub fn score(model: &ScaleModel, image: &Tensor) -> Result<FeedbackMap> {
    no_grad(|| {
        let bound = model.critic.params.bind(false);
        let scores = critic_forward(model, &bound, &Var::constant(image.clone()))?.value().clone();
        Ok(FeedbackMap {
            scores,
            source_scale: model.index,
        })
    })
}
