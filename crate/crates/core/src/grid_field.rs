//! Discrete fields on the closed square [-1, 1]² and the 5-point stencil.
//!
//! A field of side `n` stores every node including the boundary ring, so the
//! grid spacing is `h = 2 / (n - 1)` and the interior is `1..=n-2` on both
//! axes. Storage is row-major with `i` the row (y) and `j` the column (x).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest grid side that still has an interior node.
pub const MIN_GRID: usize = 3;

/// An `n × n` grid sample of u, boundary nodes included.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    n: usize,
    values: Vec<f64>,
}

impl Field {
    /// Builds a field from row-major values, checking length and finiteness.
    pub fn from_vec(n: usize, values: Vec<f64>) -> Result<Self> {
        if n < MIN_GRID {
            return Err(Error::InvalidGrid(format!("side {n} < {MIN_GRID}")));
        }
        if values.len() != n * n {
            return Err(Error::Shape {
                expected: format!("{} values", n * n),
                actual: format!("{} values", values.len()),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field value at flat index {pos}")));
        }
        Ok(Self { n, values })
    }

    /// Builds a field by evaluating `f(i, j)` at every node.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                values.push(f(i, j));
            }
        }
        Self::from_vec(n, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.n + j] = v;
    }

    #[inline]
    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.n - 1 || j == self.n - 1
    }

    /// Overwrites the boundary ring with `value`.
    pub fn fill_boundary(&mut self, value: f64) {
        fill_ring(&mut self.values, self.n, value);
    }

    /// True when every boundary node equals `value` exactly.
    pub fn boundary_equals(&self, value: f64) -> bool {
        let n = self.n;
        (0..n).all(|k| {
            self.get(0, k) == value
                && self.get(n - 1, k) == value
                && self.get(k, 0) == value
                && self.get(k, n - 1) == value
        })
    }

    pub fn transpose(&self) -> Field {
        let n = self.n;
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[j * n + i] = self.values[i * n + j];
            }
        }
        Field { n, values }
    }

    /// Applies `f` elementwise. Panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        let values: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        assert!(values.iter().all(|v| v.is_finite()), "map produced a non-finite value");
        Field { n: self.n, values }
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub(crate) fn from_raw(n: usize, values: Vec<f64>) -> Field {
        debug_assert_eq!(values.len(), n * n);
        Field { n, values }
    }

    /// Exchanges storage with an equally sized buffer.
    pub(crate) fn swap_values(&mut self, other: &mut Vec<f64>) {
        assert_eq!(other.len(), self.values.len());
        std::mem::swap(&mut self.values, other);
    }
}

/// Returns an `n × n` field with every node set to `fill`.
pub fn make_field(n: usize, fill: f64) -> Result<Field> {
    if !fill.is_finite() {
        return Err(Error::NonFinite(format!("fill value {fill}")));
    }
    Field::from_vec(n, vec![fill; n * n])
}

/// Parameters of the discrete forward operator.
///
/// Construction validates both explicit-Euler bounds (see
/// [`crate::forward_solver::check_stability`]), so a `PdeParams` in hand is
/// always safe to step with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PdeParamsRaw", into = "PdeParamsRaw")]
pub struct PdeParams {
    gamma: f64,
    kappa: f64,
    dt: f64,
    n_steps: u32,
    grid_n: usize,
    bc_value: f64,
    h: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PdeParamsRaw {
    gamma: f64,
    kappa: f64,
    dt: f64,
    n_steps: u32,
    grid_n: usize,
    #[serde(default)]
    bc_value: f64,
}

impl TryFrom<PdeParamsRaw> for PdeParams {
    type Error = Error;

    fn try_from(r: PdeParamsRaw) -> Result<Self> {
        PdeParams::new(r.gamma, r.kappa, r.dt, r.n_steps, r.grid_n, r.bc_value)
    }
}

impl From<PdeParams> for PdeParamsRaw {
    fn from(p: PdeParams) -> Self {
        PdeParamsRaw {
            gamma: p.gamma,
            kappa: p.kappa,
            dt: p.dt,
            n_steps: p.n_steps,
            grid_n: p.grid_n,
            bc_value: p.bc_value,
        }
    }
}

impl PdeParams {
    pub const GAMMA: f64 = 0.005;
    pub const KAPPA: f64 = 4.7;
    pub const DT: f64 = 1e-3;
    pub const N_STEPS: u32 = 100;

    pub fn new(
        gamma: f64,
        kappa: f64,
        dt: f64,
        n_steps: u32,
        grid_n: usize,
        bc_value: f64,
    ) -> Result<Self> {
        let params = Self::unchecked(gamma, kappa, dt, n_steps, grid_n, bc_value)?;
        crate::forward_solver::check_stability(&params)?;
        Ok(params)
    }

    /// Validates signs and grid size but not the stability bounds.
    pub fn unchecked(
        gamma: f64,
        kappa: f64,
        dt: f64,
        n_steps: u32,
        grid_n: usize,
        bc_value: f64,
    ) -> Result<Self> {
        if grid_n < MIN_GRID {
            return Err(Error::InvalidGrid(format!("side {grid_n} < {MIN_GRID}")));
        }
        for (name, v) in [("gamma", gamma), ("dt", dt)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(Error::InvalidParam(format!("kappa must be non-negative, got {kappa}")));
        }
        if !bc_value.is_finite() {
            return Err(Error::InvalidParam(format!("bc_value must be finite, got {bc_value}")));
        }
        Ok(Self {
            gamma,
            kappa,
            dt,
            n_steps,
            grid_n,
            bc_value,
            h: 2.0 / (grid_n - 1) as f64,
        })
    }

    /// γ = 0.005, κ = 4.7, Δt = 1e-3, 100 steps, zero Dirichlet data.
    pub fn standard(grid_n: usize) -> Result<Self> {
        Self::new(Self::GAMMA, Self::KAPPA, Self::DT, Self::N_STEPS, grid_n, 0.0)
    }

    pub fn with_bc_value(mut self, bc_value: f64) -> Self {
        self.bc_value = bc_value;
        self
    }

    pub fn with_n_steps(mut self, n_steps: u32) -> Self {
        self.n_steps = n_steps;
        self
    }

    pub fn with_grid(self, grid_n: usize) -> Result<Self> {
        Self::new(self.gamma, self.kappa, self.dt, self.n_steps, grid_n, self.bc_value)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn kappa(&self) -> f64 {
        self.kappa
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn n_steps(&self) -> u32 {
        self.n_steps
    }
    pub fn grid_n(&self) -> usize {
        self.grid_n
    }
    pub fn bc_value(&self) -> f64 {
        self.bc_value
    }
    pub fn h(&self) -> f64 {
        self.h
    }

    pub(crate) fn check_field(&self, u: &Field) -> Result<()> {
        if u.n() != self.grid_n {
            return Err(Error::Shape {
                expected: format!("{0}x{0} field", self.grid_n),
                actual: format!("{0}x{0} field", u.n()),
            });
        }
        Ok(())
    }
}

pub(crate) fn fill_ring(values: &mut [f64], n: usize, value: f64) {
    for k in 0..n {
        values[k] = value;
        values[(n - 1) * n + k] = value;
        values[k * n] = value;
        values[k * n + n - 1] = value;
    }
}

/// Five-point Laplacian of one `n × n` plane; boundary outputs are zero.
pub(crate) fn laplacian_plane(u: &[f64], n: usize, h: f64, out: &mut [f64]) {
    let inv_h2 = 1.0 / (h * h);
    fill_ring(out, n, 0.0);
    for i in 1..n - 1 {
        let row = i * n;
        for j in 1..n - 1 {
            let c = row + j;
            out[c] = (u[c + n] + u[c - n] + u[c + 1] + u[c - 1] - 4.0 * u[c]) * inv_h2;
        }
    }
}

/// Adjoint of [`laplacian_plane`]: every node, boundary included, collects
/// the stencil weights of the interior outputs that read it.
pub(crate) fn laplacian_adjoint_plane(g: &[f64], n: usize, h: f64, out: &mut [f64]) {
    let inv_h2 = 1.0 / (h * h);
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 1..n - 1 {
        let row = i * n;
        for j in 1..n - 1 {
            let c = row + j;
            let w = g[c] * inv_h2;
            out[c] -= 4.0 * w;
            out[c + n] += w;
            out[c - n] += w;
            out[c + 1] += w;
            out[c - 1] += w;
        }
    }
}

/// Discrete Laplacian on interior nodes, zero on the boundary ring.
pub fn laplacian_dirichlet(u: &Field, params: &PdeParams) -> Result<Field> {
    params.check_field(u)?;
    let n = u.n();
    let mut out = vec![0.0; n * n];
    laplacian_plane(u.values(), n, params.h(), &mut out);
    Ok(Field::from_raw(n, out))
}

/// Population mean and variance of all nodes.
pub fn field_stats(u: &Field) -> (f64, f64) {
    // Shifting by the first sample makes constant fields come out exact.
    let shift = u.values()[0];
    let count = u.len() as f64;
    let m = u.values().iter().map(|v| v - shift).sum::<f64>() / count;
    let var = u.values().iter().map(|v| (v - shift - m) * (v - shift - m)).sum::<f64>() / count;
    (shift + m, var)
}
