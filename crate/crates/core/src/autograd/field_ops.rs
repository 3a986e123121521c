//! Grid operators lifted into the graph. Inputs are `[N, C, n, n]` stacks of
//! square planes; each operator acts on every plane independently.

use super::{Op, Tensor, Var};
use crate::forward_solver::euler_step_plane;
use crate::grid_field::{laplacian_adjoint_plane, laplacian_plane, PdeParams};

fn plane_side(shape: &[usize]) -> usize {
    assert!(shape.len() == 4 && shape[2] == shape[3], "expected [N, C, n, n], got {shape:?}");
    shape[2]
}

fn map_planes(x: &Tensor, mut f: impl FnMut(&[f64], &mut [f64])) -> Tensor {
    let n = plane_side(x.shape());
    let plane = n * n;
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data().chunks(plane).zip(out.chunks_mut(plane)) {
        f(src, dst);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// 1 on interior nodes, 0 on each plane's boundary ring.
pub(crate) fn interior_mask(shape: &[usize]) -> Tensor {
    let n = plane_side(shape);
    let planes = shape[0] * shape[1];
    let mut data = Vec::with_capacity(planes * n * n);
    for _ in 0..planes {
        for i in 0..n {
            for j in 0..n {
                let interior = i > 0 && j > 0 && i < n - 1 && j < n - 1;
                data.push(if interior { 1.0 } else { 0.0 });
            }
        }
    }
    Tensor::new(shape.to_vec(), data)
}

struct Laplacian {
    h: f64,
    adjoint: bool,
}

impl Op for Laplacian {
    fn backward(&self, _inputs: &[Var], g: &Var, _needs: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.laplacian_op(self.h, !self.adjoint))]
    }
}

#[derive(Clone, Copy)]
enum Axis {
    Rows,
    Cols,
}

struct ForwardDiff {
    axis: Axis,
    adjoint: bool,
}

impl Op for ForwardDiff {
    fn backward(&self, _inputs: &[Var], g: &Var, _needs: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.forward_diff_op(self.axis, !self.adjoint))]
    }
}

fn forward_diff_plane(u: &[f64], n: usize, axis: Axis, out: &mut [f64]) {
    let (di, dj) = match axis {
        Axis::Rows => (1, 0),
        Axis::Cols => (0, 1),
    };
    for i in 0..n {
        for j in 0..n {
            let c = i * n + j;
            out[c] = if i + di < n && j + dj < n { u[(i + di) * n + j + dj] - u[c] } else { 0.0 };
        }
    }
}

fn forward_diff_adjoint_plane(g: &[f64], n: usize, axis: Axis, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let (di, dj) = match axis {
        Axis::Rows => (1, 0),
        Axis::Cols => (0, 1),
    };
    for i in 0..n - di {
        for j in 0..n - dj {
            let c = i * n + j;
            out[(i + di) * n + j + dj] += g[c];
            out[c] -= g[c];
        }
    }
}

struct EulerStep {
    params: PdeParams,
}

impl Op for EulerStep {
    fn backward(&self, inputs: &[Var], g: &Var, _needs: &[bool]) -> Vec<Option<Var>> {
        // Jᵀg on interior rows; the boundary output is constant.
        let p = &self.params;
        let u = &inputs[0];
        let gi = g.mul(&Var::constant(interior_mask(g.shape())));
        let diffusion = gi.laplacian_op(p.h(), true).scale(p.dt() * p.gamma());
        let slope = u.square().scale(3.0).add_scalar(-1.0);
        let reaction = slope.mul(&gi).scale(p.dt() * p.kappa());
        vec![Some(gi.add(&diffusion).sub(&reaction))]
    }
}

impl Var {
    fn laplacian_op(&self, h: f64, adjoint: bool) -> Var {
        let n = plane_side(self.shape());
        let v = map_planes(self.value(), |src, dst| {
            if adjoint {
                laplacian_adjoint_plane(src, n, h, dst)
            } else {
                laplacian_plane(src, n, h, dst)
            }
        });
        Var::from_op(v, Laplacian { h, adjoint }, vec![self.clone()])
    }

    fn forward_diff_op(&self, axis: Axis, adjoint: bool) -> Var {
        let n = plane_side(self.shape());
        let v = map_planes(self.value(), |src, dst| {
            if adjoint {
                forward_diff_adjoint_plane(src, n, axis, dst)
            } else {
                forward_diff_plane(src, n, axis, dst)
            }
        });
        Var::from_op(v, ForwardDiff { axis, adjoint }, vec![self.clone()])
    }

    /// Five-point Laplacian with spacing `h`; zero on the boundary ring.
    pub fn laplacian(&self, h: f64) -> Var {
        self.laplacian_op(h, false)
    }

    /// `u[i+1, j] − u[i, j]`, zero on the last row.
    pub fn diff_rows(&self) -> Var {
        self.forward_diff_op(Axis::Rows, false)
    }

    /// `u[i, j+1] − u[i, j]`, zero on the last column.
    pub fn diff_cols(&self) -> Var {
        self.forward_diff_op(Axis::Cols, false)
    }

    /// Replaces each plane's boundary ring by `value`.
    pub fn with_boundary(&self, value: f64) -> Var {
        let mask = interior_mask(self.shape());
        let fill = mask.map(|m| (1.0 - m) * value);
        self.mul(&Var::constant(mask)).add(&Var::constant(fill))
    }

    /// One forward-Euler step on every plane; bit-identical to
    /// [`crate::forward_solver::euler_step`].
    pub fn euler_step(&self, params: &PdeParams) -> Var {
        let n = plane_side(self.shape());
        assert_eq!(n, params.grid_n(), "plane side does not match the PDE grid");
        let mut lap = vec![0.0; n * n];
        let v = map_planes(self.value(), |src, dst| euler_step_plane(src, params, &mut lap, dst));
        Var::from_op(v, EulerStep { params: *params }, vec![self.clone()])
    }
}
