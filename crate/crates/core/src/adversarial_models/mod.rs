//! U-Net generator, spectrally normalized patch critic and the WGAN-GP
//! objectives that tie them to the physics losses.

mod checkpoint;
mod critic;
mod generator;
mod optim;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Tensor, Var};
use crate::error::Result;
use crate::grid_field::PdeParams;
use crate::physics_losses::{
    energy_loss_var, moment_losses_var, pixel_mae_var, residual_loss_var, LossWeights,
};

pub use checkpoint::{read_checkpoint, read_manifest, write_checkpoint, CheckpointManifest, CHECKPOINT_MAGIC};
pub use critic::{spectral_normalize, BoundCritic, Critic, CriticSpec, SpectralState};
pub use generator::{default_depth, Generator, GeneratorSpec};
pub use optim::{normal_init, Adam};

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Graph handles for every tensor: leaves when `trainable`, otherwise
    /// constants.
    pub fn bind(&self, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { Var::leaf(t.clone()) } else { Var::constant(t.clone()) })
            .collect()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.names.iter().zip(&self.tensors).find(|(_, t)| !t.is_finite()).map(|(n, _)| n.as_str())
    }

    /// Rounds every value through `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Adds a per-channel bias `[C]` to `[N, C, H, W]`.
pub(crate) fn add_bias(x: &Var, b: &Var) -> Var {
    let c = b.shape()[0];
    x.add(&b.reshape(&[1, c, 1, 1]).expand(x.shape()))
}

/// A critic as seen by the losses: a patch score map `[N, 1, m, m]` for a
/// source batch and a candidate batch.
pub trait CriticFn {
    fn score_map(&self, src: &Var, candidate: &Var) -> Var;

    /// Per-sample mean score, shape `[N, 1, 1, 1]`.
    fn score(&self, src: &Var, candidate: &Var) -> Var {
        self.score_map(src, candidate).mean_per_sample()
    }
}

/// `D(s, x) = coeff · Σx / √d`: gradient norm `coeff` everywhere. Used to
/// check the gradient penalty.
#[derive(Debug, Clone, Copy)]
pub struct LinearCritic {
    pub coeff: f64,
}

impl CriticFn for LinearCritic {
    fn score_map(&self, _src: &Var, candidate: &Var) -> Var {
        let d: usize = candidate.shape()[1..].iter().product();
        candidate.sum_per_sample().scale(self.coeff / (d as f64).sqrt())
    }
}

/// Inside the square root of the gradient norm; keeps the penalty
/// differentiable when a critic is flat.
const NORM_EPS: f64 = 1e-16;

/// Mean over the batch of `(‖∇_x̂ D(src, x̂)‖₂ − 1)²` at
/// `x̂ = ε·real + (1 − ε)·fake`, one `ε ~ U[0, 1]` per sample. The result
/// stays differentiable in the critic's parameters.
pub fn gradient_penalty<C: CriticFn + ?Sized, R: Rng + ?Sized>(
    critic: &C,
    src: &Tensor,
    real: &Tensor,
    fake: &Tensor,
    rng: &mut R,
) -> Var {
    assert_eq!(real.shape(), fake.shape(), "real and fake batches differ in shape");
    let batch = real.shape()[0];
    let per = real.numel() / batch;
    let eps: Vec<f64> = (0..batch).map(|_| rng.random::<f64>()).collect();
    let mut mixed = Vec::with_capacity(real.numel());
    for (k, e) in eps.iter().enumerate() {
        let r = &real.data()[k * per..(k + 1) * per];
        let f = &fake.data()[k * per..(k + 1) * per];
        mixed.extend(r.iter().zip(f).map(|(a, b)| e * a + (1.0 - e) * b));
    }
    let x_hat = Var::leaf(Tensor::new(real.shape().to_vec(), mixed));
    let src = Var::constant(src.clone());
    // Samples are independent, so one backward pass over the sum of
    // per-sample scores yields every per-sample input gradient.
    let total = critic.score(&src, &x_hat).sum_all();
    let g = grad(&total, &[&x_hat], true).remove(0);
    let norms = g.square().sum_per_sample().add_scalar(NORM_EPS).powf(0.5);
    norms.add_scalar(-1.0).square().mean_all()
}

/// Critic objective and its parts.
pub struct CriticLoss {
    pub total: Var,
    /// `mean D(fake) − mean D(real)`.
    pub wasserstein: f64,
    /// Unweighted gradient penalty.
    pub penalty: f64,
}

/// `mean D(src, fake) − mean D(src, real) + λ_GP · GP`. `fake` is a plain
/// tensor, so nothing flows back into the generator.
pub fn critic_loss<C: CriticFn + ?Sized, R: Rng + ?Sized>(
    critic: &C,
    src: &Tensor,
    real: &Tensor,
    fake: &Tensor,
    weights: &LossWeights,
    rng: &mut R,
) -> CriticLoss {
    let s = Var::constant(src.clone());
    let d_real = critic.score(&s, &Var::constant(real.clone())).mean_all();
    let d_fake = critic.score(&s, &Var::constant(fake.clone())).mean_all();
    let w = d_fake.sub(&d_real);
    let gp = gradient_penalty(critic, src, real, fake, rng);
    let total = w.add(&gp.scale(weights.lambda_gp));
    CriticLoss { wasserstein: w.item(), penalty: gp.item(), total }
}

/// Unweighted generator loss terms, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GenTerms {
    /// `−mean D(src, gen_out)`.
    pub adversarial: f64,
    pub energy: f64,
    pub residual: f64,
    pub mae: f64,
    pub mean: f64,
    pub var: f64,
}

impl GenTerms {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.adversarial
            + w.lambda_e * self.energy
            + w.lambda_r * self.residual
            + w.lambda_mae * self.mae
            + w.lambda_mu * self.mean
            + w.lambda_sigma * self.var
    }

    /// First term that is not finite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("adversarial", self.adversarial),
            ("energy", self.energy),
            ("residual", self.residual),
            ("mae", self.mae),
            ("mean", self.mean),
            ("var", self.var),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Full generator objective over scaled batches `[N, 1, n, n]`. Terms with
/// zero weight are still evaluated for the breakdown but kept off the graph.
pub fn generator_loss<C: CriticFn + ?Sized>(
    critic: &C,
    src: &Tensor,
    tar: &Tensor,
    gen_out: &Var,
    weights: &LossWeights,
    params: &PdeParams,
    scale: f64,
) -> Result<(Var, GenTerms)> {
    let s = Var::constant(src.clone());
    let t = Var::constant(tar.clone());
    let adv = critic.score(&s, gen_out).mean_all().scale(-1.0);
    let energy = energy_loss_var(gen_out, &t, params, weights.energy_mode)?;
    let residual = residual_loss_var(gen_out, &s, params, scale, weights.s_steps as usize)?;
    let mae = pixel_mae_var(gen_out, &t);
    let (mean, var) = moment_losses_var(gen_out, &t);
    let terms = GenTerms {
        adversarial: adv.item(),
        energy: energy.item(),
        residual: residual.item(),
        mae: mae.item(),
        mean: mean.item(),
        var: var.item(),
    };
    let mut total = adv;
    for (w, term) in [
        (weights.lambda_e, &energy),
        (weights.lambda_r, &residual),
        (weights.lambda_mae, &mae),
        (weights.lambda_mu, &mean),
        (weights.lambda_sigma, &var),
    ] {
        if w != 0.0 {
            total = total.add(&term.scale(w));
        }
    }
    Ok((total, terms))
}
