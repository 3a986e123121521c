//! Physics-informed loss terms.
//!
//! Each term exists twice: a plain function over [`Field`]s used for
//! evaluation and as an independent check, and a graph version over
//! `[N, 1, n, n]` batches used in training. L1 quantities are pixel means so
//! weights do not depend on grid size.

use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Tensor, Var};
use crate::error::{Error, Result};
use crate::forward_solver::simulate;
use crate::grid_field::{field_stats, Field, PdeParams};

/// How a Lyapunov-energy mismatch is penalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyMode {
    #[default]
    Abs,
    Squared,
}

/// Weights of the generator objective plus the critic's gradient-penalty
/// coefficient and the residual simulation length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_e: f64,
    pub lambda_r: f64,
    pub lambda_mae: f64,
    pub lambda_mu: f64,
    pub lambda_sigma: f64,
    pub lambda_gp: f64,
    pub s_steps: u32,
    pub energy_mode: EnergyMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_e: 1.0,
            lambda_r: 10.0,
            lambda_mae: 100.0,
            lambda_mu: 1.0,
            lambda_sigma: 1.0,
            lambda_gp: 10.0,
            s_steps: 100,
            energy_mode: EnergyMode::Abs,
        }
    }
}

impl LossWeights {
    /// Every weight zero except the gradient penalty.
    pub fn adversarial_only() -> Self {
        Self { lambda_e: 0.0, lambda_r: 0.0, lambda_mae: 0.0, lambda_mu: 0.0, lambda_sigma: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_e", self.lambda_e),
            ("lambda_r", self.lambda_r),
            ("lambda_mae", self.lambda_mae),
            ("lambda_mu", self.lambda_mu),
            ("lambda_sigma", self.lambda_sigma),
            ("lambda_gp", self.lambda_gp),
        ];
        for (name, w) in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidParam(format!("{name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

fn same_shape(a: &Field, b: &Field) -> Result<()> {
    if a.n() != b.n() {
        return Err(Error::Shape {
            expected: format!("{0}x{0}", a.n()),
            actual: format!("{0}x{0}", b.n()),
        });
    }
    Ok(())
}

/// Discrete free energy with forward differences:
/// `h²·[Σ γ/2·(Δ_row u/h)² + Σ γ/2·(Δ_col u/h)² + Σ κ/4·(u² − 1)²]`.
pub fn lyapunov_energy(u: &Field, params: &PdeParams) -> Result<f64> {
    params.check_field(u)?;
    let n = u.n();
    let h = params.h();
    let (gamma, kappa) = (params.gamma(), params.kappa());
    let mut gradient = 0.0;
    let mut potential = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = u.get(i, j);
            if i + 1 < n {
                let d = (u.get(i + 1, j) - v) / h;
                gradient += d * d;
            }
            if j + 1 < n {
                let d = (u.get(i, j + 1) - v) / h;
                gradient += d * d;
            }
            let w = v * v - 1.0;
            potential += w * w;
        }
    }
    Ok(h * h * (0.5 * gamma * gradient + 0.25 * kappa * potential))
}

pub fn energy_loss(pred: &Field, tar: &Field, params: &PdeParams) -> Result<f64> {
    energy_loss_with(pred, tar, params, EnergyMode::Abs)
}

pub fn energy_loss_with(pred: &Field, tar: &Field, params: &PdeParams, mode: EnergyMode) -> Result<f64> {
    same_shape(pred, tar)?;
    let d = lyapunov_energy(pred, params)? - lyapunov_energy(tar, params)?;
    Ok(match mode {
        EnergyMode::Abs => d.abs(),
        EnergyMode::Squared => d * d,
    })
}

/// `((mean_p − mean_t)², (var_p − var_t)²)` with population variances.
pub fn moment_losses(pred: &Field, tar: &Field) -> Result<(f64, f64)> {
    same_shape(pred, tar)?;
    let (mp, vp) = field_stats(pred);
    let (mt, vt) = field_stats(tar);
    Ok(((mp - mt).powi(2), (vp - vt).powi(2)))
}

pub fn pixel_mae(pred: &Field, tar: &Field) -> Result<f64> {
    same_shape(pred, tar)?;
    let sum: f64 = pred.values().iter().zip(tar.values()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Mean-L1 mismatch, in training units, between `s` Euler steps of the
/// prediction and the observed source. The prediction is mapped back to
/// physical amplitude and its boundary reset before simulating.
pub fn residual_loss(
    pred_scaled: &Field,
    src_scaled: &Field,
    params: &PdeParams,
    scale: f64,
    s: usize,
) -> Result<f64> {
    same_shape(pred_scaled, src_scaled)?;
    check_scale(scale)?;
    let mut phys = pred_scaled.map(|v| v * (1.0 / scale));
    phys.fill_boundary(params.bc_value());
    let sim = simulate(&phys, params, s)?;
    let sum: f64 = sim.values().iter().zip(src_scaled.values()).map(|(a, b)| (scale * a - b).abs()).sum();
    Ok(sum / sim.len() as f64)
}

/// [`residual_loss`] and its gradient with respect to `pred_scaled`.
pub fn residual_loss_grad(
    pred_scaled: &Field,
    src_scaled: &Field,
    params: &PdeParams,
    scale: f64,
    s: usize,
) -> Result<(f64, Field)> {
    same_shape(pred_scaled, src_scaled)?;
    let n = pred_scaled.n();
    let pred = Var::leaf(field_tensor(pred_scaled));
    let src = Var::constant(field_tensor(src_scaled));
    let loss = residual_loss_var(&pred, &src, params, scale, s)?;
    let g = grad(&loss, &[&pred], false).remove(0);
    Ok((loss.item(), Field::from_vec(n, g.value().data().to_vec())?))
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidParam(format!("scale must be positive, got {scale}")));
    }
    Ok(())
}

/// A field as a `[1, 1, n, n]` tensor.
pub fn field_tensor(f: &Field) -> Tensor {
    Tensor::new(vec![1, 1, f.n(), f.n()], f.values().to_vec())
}

/// Stacks same-sized fields into `[N, 1, n, n]`.
pub fn stack_fields(fields: &[&Field]) -> Tensor {
    let n = fields[0].n();
    let mut data = Vec::with_capacity(fields.len() * n * n);
    for f in fields {
        assert_eq!(f.n(), n, "cannot stack fields of different sizes");
        data.extend_from_slice(f.values());
    }
    Tensor::new(vec![fields.len(), 1, n, n], data)
}

/// Splits `[N, 1, n, n]` back into fields.
pub fn unstack_fields(t: &Tensor) -> Result<Vec<Field>> {
    let s = t.shape();
    assert!(s.len() == 4 && s[1] == 1 && s[2] == s[3], "expected [N, 1, n, n], got {s:?}");
    let n = s[2];
    t.data().chunks(n * n).map(|c| Field::from_vec(n, c.to_vec())).collect()
}

fn check_batch(pred: &Var, other: &Var, params: &PdeParams) -> Result<()> {
    let s = pred.shape();
    if s != other.shape() || s.len() != 4 || s[1] != 1 || s[2] != params.grid_n() || s[3] != params.grid_n() {
        return Err(Error::Shape {
            expected: format!("[N, 1, {0}, {0}] pairs", params.grid_n()),
            actual: format!("{:?} and {:?}", s, other.shape()),
        });
    }
    Ok(())
}

/// Per-sample energies, shape `[N, 1, 1, 1]`.
pub fn lyapunov_energy_var(u: &Var, params: &PdeParams) -> Var {
    let h = params.h();
    let dr = u.diff_rows().scale(1.0 / h);
    let dc = u.diff_cols().scale(1.0 / h);
    let gradient = dr.square().add(&dc.square()).sum_per_sample();
    let potential = u.square().add_scalar(-1.0).square().sum_per_sample();
    gradient
        .scale(0.5 * params.gamma())
        .add(&potential.scale(0.25 * params.kappa()))
        .scale(h * h)
}

/// Batch mean of the per-sample energy mismatch.
pub fn energy_loss_var(pred: &Var, tar: &Var, params: &PdeParams, mode: EnergyMode) -> Result<Var> {
    check_batch(pred, tar, params)?;
    let d = lyapunov_energy_var(pred, params).sub(&lyapunov_energy_var(tar, params));
    let per = match mode {
        EnergyMode::Abs => d.abs(),
        EnergyMode::Squared => d.square(),
    };
    Ok(per.mean_all())
}

/// Batch means of the squared mean and variance mismatches.
pub fn moment_losses_var(pred: &Var, tar: &Var) -> (Var, Var) {
    let stats = |u: &Var| {
        let mean = u.mean_per_sample();
        let centred = u.sub(&mean.expand(u.shape()));
        (mean, centred.square().mean_per_sample())
    };
    let (mp, vp) = stats(pred);
    let (mt, vt) = stats(tar);
    (mp.sub(&mt).square().mean_all(), vp.sub(&vt).square().mean_all())
}

pub fn pixel_mae_var(pred: &Var, tar: &Var) -> Var {
    pred.sub(tar).abs().mean_all()
}

/// Graph version of [`residual_loss`]; differentiable through all `s` steps.
pub fn residual_loss_var(pred_scaled: &Var, src_scaled: &Var, params: &PdeParams, scale: f64, s: usize) -> Result<Var> {
    check_batch(pred_scaled, src_scaled, params)?;
    check_scale(scale)?;
    let mut u = pred_scaled.scale(1.0 / scale).with_boundary(params.bc_value());
    for _ in 0..s {
        u = u.euler_step(params);
    }
    Ok(u.scale(scale).sub(src_scaled).abs().mean_all())
}
