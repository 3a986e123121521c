//! 2-D convolution via im2col + GEMM, with its two adjoints.
//!
//! The three kernels form a closed family under differentiation:
//! `conv(x, w)`, `back_input(gy, w)` (the transposed convolution) and
//! `back_weight(x, gy)`. Each one's derivative is expressed with the other
//! two, which is what makes second-order gradients available.

use super::{Op, Tensor, Var};

/// Square kernel, symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Output side of a convolution with geometry `g` over an input of side `n`.
pub fn conv_out_size(n: usize, g: ConvGeom) -> usize {
    assert!(n + 2 * g.pad >= g.kernel, "kernel {} larger than padded input {n}", g.kernel);
    (n + 2 * g.pad - g.kernel) / g.stride + 1
}

/// `C = A·B (+ C when accumulate)` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(m > 0 && k > 0 && n > 0, "empty gemm {m}x{k}x{n}");
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds of all three operands were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Dims {
    ci: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    g: ConvGeom,
}

impl Dims {
    fn col_rows(&self) -> usize {
        self.ci * self.g.kernel * self.g.kernel
    }
    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one sample `[ci, h, w]` into `[ci·k·k, ho·wo]`.
fn im2col(x: &[f64], d: &Dims, cols: &mut [f64]) {
    let k = d.g.kernel;
    let ncol = d.col_cols();
    for c in 0..d.ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..d.ho {
                    let iy = (oy * d.g.stride + ky) as isize - d.g.pad as isize;
                    for ox in 0..d.wo {
                        let ix = (ox * d.g.stride + kx) as isize - d.g.pad as isize;
                        dst[oy * d.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < d.h && (ix as usize) < d.w {
                            x[(c * d.h + iy as usize) * d.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Folds `[ci·k·k, ho·wo]` back onto `[ci, h, w]`, accumulating overlaps.
fn col2im(cols: &[f64], d: &Dims, x: &mut [f64]) {
    let k = d.g.kernel;
    let ncol = d.col_cols();
    for c in 0..d.ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..d.ho {
                    let iy = (oy * d.g.stride + ky) as isize - d.g.pad as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    for ox in 0..d.wo {
                        let ix = (ox * d.g.stride + kx) as isize - d.g.pad as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            x[(c * d.h + iy as usize) * d.w + ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_weight(w: &Tensor, g: ConvGeom) -> (usize, usize) {
    let s = w.shape();
    assert!(s.len() == 4 && s[2] == g.kernel && s[3] == g.kernel, "bad weight shape {s:?}");
    (s[0], s[1])
}

/// `x [n, ci, h, w] ⊛ w [co, ci, k, k] → [n, co, ho, wo]`
pub(crate) fn conv_forward(x: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
    let (co, ci) = check_weight(w, g);
    let xs = x.shape();
    assert!(xs.len() == 4 && xs[1] == ci, "input {xs:?} vs weight {:?}", w.shape());
    let (n, h, wd) = (xs[0], xs[2], xs[3]);
    let d = Dims { ci, h, w: wd, ho: conv_out_size(h, g), wo: conv_out_size(wd, g), g };
    let (rows, ncol) = (d.col_rows(), d.col_cols());
    let mut cols = vec![0.0; rows * ncol];
    let mut out = vec![0.0; n * co * ncol];
    let in_per = ci * h * wd;
    for s in 0..n {
        im2col(&x.data()[s * in_per..(s + 1) * in_per], &d, &mut cols);
        gemm(co, rows, ncol, w.data(), (rows, 1), &cols, (ncol, 1), &mut out[s * co * ncol..(s + 1) * co * ncol], false);
    }
    Tensor::new(vec![n, co, d.ho, d.wo], out)
}

/// Adjoint of `conv_forward` in its input: `gy [n, co, ho, wo] → [n, ci, h, w]`.
pub(crate) fn conv_back_input(gy: &Tensor, w: &Tensor, g: ConvGeom, h: usize, wd: usize) -> Tensor {
    let (co, ci) = check_weight(w, g);
    let gs = gy.shape();
    let d = Dims { ci, h, w: wd, ho: conv_out_size(h, g), wo: conv_out_size(wd, g), g };
    assert!(gs.len() == 4 && gs[1] == co && gs[2] == d.ho && gs[3] == d.wo, "grad {gs:?} vs weight {:?}", w.shape());
    let n = gs[0];
    let (rows, ncol) = (d.col_rows(), d.col_cols());
    let mut cols = vec![0.0; rows * ncol];
    let mut out = vec![0.0; n * ci * h * wd];
    let in_per = ci * h * wd;
    for s in 0..n {
        // cols = wᵀ · gy_s
        gemm(rows, co, ncol, w.data(), (1, rows), &gy.data()[s * co * ncol..(s + 1) * co * ncol], (ncol, 1), &mut cols, false);
        col2im(&cols, &d, &mut out[s * in_per..(s + 1) * in_per]);
    }
    Tensor::new(vec![n, ci, h, wd], out)
}

/// Adjoint of `conv_forward` in its weight: `(x, gy) → [co, ci, k, k]`.
pub(crate) fn conv_back_weight(x: &Tensor, gy: &Tensor, g: ConvGeom) -> Tensor {
    let xs = x.shape();
    let gs = gy.shape();
    let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let co = gs[1];
    let d = Dims { ci, h, w: wd, ho: conv_out_size(h, g), wo: conv_out_size(wd, g), g };
    assert!(gs[0] == n && gs[2] == d.ho && gs[3] == d.wo, "grad {gs:?} vs input {xs:?}");
    let (rows, ncol) = (d.col_rows(), d.col_cols());
    let mut cols = vec![0.0; rows * ncol];
    let mut out = vec![0.0; co * rows];
    let in_per = ci * h * wd;
    for s in 0..n {
        im2col(&x.data()[s * in_per..(s + 1) * in_per], &d, &mut cols);
        // out += gy_s · colsᵀ
        gemm(co, ncol, rows, &gy.data()[s * co * ncol..(s + 1) * co * ncol], (ncol, 1), &cols, (1, ncol), &mut out, true);
    }
    Tensor::new(vec![co, ci, g.kernel, g.kernel], out)
}

struct Conv {
    g: ConvGeom,
}

struct ConvBackInput {
    g: ConvGeom,
}

struct ConvBackWeight {
    g: ConvGeom,
}

impl Op for Conv {
    // inputs: x, w
    fn backward(&self, inputs: &[Var], g: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        let xs = inputs[0].shape();
        vec![
            needs[0].then(|| g.conv_transpose(&inputs[1], self.g, xs[2], xs[3])),
            needs[1].then(|| Var::conv_weight_grad(&inputs[0], g, self.g)),
        ]
    }
}

impl Op for ConvBackInput {
    // inputs: gy, w
    fn backward(&self, inputs: &[Var], g: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        vec![
            needs[0].then(|| g.conv2d(&inputs[1], self.g)),
            needs[1].then(|| Var::conv_weight_grad(g, &inputs[0], self.g)),
        ]
    }
}

impl Op for ConvBackWeight {
    // inputs: x, gy
    fn backward(&self, inputs: &[Var], g: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        let xs = inputs[0].shape();
        vec![
            needs[0].then(|| inputs[1].conv_transpose(g, self.g, xs[2], xs[3])),
            needs[1].then(|| inputs[0].conv2d(g, self.g)),
        ]
    }
}

impl Var {
    /// Cross-correlation with weight `[co, ci, k, k]`.
    pub fn conv2d(&self, w: &Var, g: ConvGeom) -> Var {
        let v = conv_forward(self.value(), w.value(), g);
        Var::from_op(v, Conv { g }, vec![self.clone(), w.clone()])
    }

    /// Transposed convolution with weight `[c_in, c_out, k, k]` producing an
    /// `out_h × out_w` map (the input-adjoint of [`Var::conv2d`]).
    pub fn conv_transpose(&self, w: &Var, g: ConvGeom, out_h: usize, out_w: usize) -> Var {
        let v = conv_back_input(self.value(), w.value(), g, out_h, out_w);
        Var::from_op(v, ConvBackInput { g }, vec![self.clone(), w.clone()])
    }

    fn conv_weight_grad(x: &Var, gy: &Var, g: ConvGeom) -> Var {
        let v = conv_back_weight(x.value(), gy.value(), g);
        Var::from_op(v, ConvBackWeight { g }, vec![x.clone(), gy.clone()])
    }
}
