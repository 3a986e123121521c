//! Explicit forward-Euler stepping of `u_t = γΔu − κ(u³ − u)` with Dirichlet
//! data. The same per-plane kernel backs dataset generation and the
//! differentiable residual loss, so the two can never drift apart.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid_field::{fill_ring, laplacian_plane, Field, PdeParams};

/// Ratios of the time step to the two explicit-Euler limits. Both must stay
/// below one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityMargins {
    /// `dt / (h² / 4γ)`
    pub diffusion_margin: f64,
    /// `2κ·dt`, the linearized reaction rate at the wells ±1 times `dt`.
    pub reaction_margin: f64,
}

pub fn stability_margins(params: &PdeParams) -> StabilityMargins {
    let h = params.h();
    StabilityMargins {
        diffusion_margin: params.dt() / (h * h / (4.0 * params.gamma())),
        reaction_margin: params.dt() * 2.0 * params.kappa(),
    }
}

/// Returns the margins, or a stability error naming the first violated bound.
pub fn check_stability(params: &PdeParams) -> Result<StabilityMargins> {
    let m = stability_margins(params);
    if m.diffusion_margin >= 1.0 {
        return Err(Error::Stability { bound: "diffusion", margin: m.diffusion_margin });
    }
    if m.reaction_margin >= 1.0 {
        return Err(Error::Stability { bound: "reaction", margin: m.reaction_margin });
    }
    Ok(m)
}

/// One Euler step of a single `n × n` plane. `lap` is scratch space.
pub(crate) fn euler_step_plane(
    u: &[f64],
    params: &PdeParams,
    lap: &mut [f64],
    out: &mut [f64],
) {
    let n = params.grid_n();
    let (gamma, kappa, dt) = (params.gamma(), params.kappa(), params.dt());
    laplacian_plane(u, n, params.h(), lap);
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let c = i * n + j;
            let v = u[c];
            out[c] = v + dt * (gamma * lap[c] - kappa * (v * v * v - v));
        }
    }
    fill_ring(out, n, params.bc_value());
}

pub fn euler_step(u: &Field, params: &PdeParams) -> Result<Field> {
    params.check_field(u)?;
    let n = u.n();
    let mut lap = vec![0.0; n * n];
    let mut out = vec![0.0; n * n];
    euler_step_plane(u.values(), params, &mut lap, &mut out);
    Ok(Field::from_raw(n, out))
}

/// Applies `steps` Euler steps; zero steps returns an exact copy of `u0`.
pub fn simulate(u0: &Field, params: &PdeParams, steps: usize) -> Result<Field> {
    params.check_field(u0)?;
    let n = u0.n();
    let mut cur = u0.clone();
    let mut next = vec![0.0; n * n];
    let mut lap = vec![0.0; n * n];
    for _ in 0..steps {
        euler_step_plane(cur.values(), params, &mut lap, &mut next);
        cur.swap_values(&mut next);
    }
    Ok(cur)
}

/// Snapshots at steps `0, k, 2k, …` plus the final step when it is not a
/// multiple of `record_every`.
pub fn simulate_trajectory(
    u0: &Field,
    params: &PdeParams,
    steps: usize,
    record_every: usize,
) -> Result<Vec<(usize, Field)>> {
    if record_every == 0 {
        return Err(Error::InvalidParam("record_every must be >= 1".into()));
    }
    params.check_field(u0)?;
    let mut snapshots = vec![(0, u0.clone())];
    let mut cur = u0.clone();
    let mut step = 0;
    while step < steps {
        let chunk = record_every.min(steps - step);
        cur = simulate(&cur, params, chunk)?;
        step += chunk;
        snapshots.push((step, cur.clone()));
    }
    Ok(snapshots)
}
