//! Elementwise, reduction and channel-slicing operations.

use super::{Op, Tensor, Var};

struct Add;
struct Sub;
struct Mul;
struct Scale(f64);
struct AddScalar;
struct Powf(f64);
struct Tanh;
struct Abs;
struct LeakyRelu(f64);
struct SumKeep {
    in_shape: Vec<usize>,
}
struct Expand {
    in_shape: Vec<usize>,
}
struct Reshape {
    in_shape: Vec<usize>,
}
struct Narrow {
    start: usize,
    total: usize,
}
struct Pad {
    start: usize,
    len: usize,
}

impl Op for Add {
    fn backward(&self, _inputs: &[Var], g: &Var, _needs: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

impl Op for Sub {
    fn backward(&self, _inputs: &[Var], g: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.clone()), needs[1].then(|| g.scale(-1.0))]
    }
}

impl Op for Mul {
    fn backward(&self, inputs: &[Var], g: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        vec![needs[0].then(|| g.mul(&inputs[1])), needs[1].then(|| g.mul(&inputs[0]))]
    }
}

impl Op for Scale {
    fn backward(&self, _inputs: &[Var], g: &Var, _needs: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.scale(self.0))]
    }
}

impl Op for AddScalar {
    fn backward(&self, _inputs: &[Var], g: &Var, _needs: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.clone())]
    }
}

impl Op for Powf {
    fn backward(&self, inputs: &[Var], g: &Var, _needs: &[bool]) -> Vec<Option<Var>> {
        let p = self.0;
        vec![Some(g.mul(&inputs[0].powf(p - 1.0).scale(p)))]
    }
}

impl Op for Tanh {
    fn backward(&self, inputs: &[Var], g: &Var, _needs: &[bool]) -> Vec<Option<Var>> {
        let t = inputs[0].tanh();
        vec![Some(g.mul(&t.mul(&t).scale(-1.0).add_scalar(1.0)))]
    }
}

impl Op for Abs {
    fn backward(&self, inputs: &[Var], g: &Var, _needs: &[bool]) -> Vec<Option<Var>> {
        // sign(0) = 0: the kink contributes no gradient
        let sign = inputs[0].value().map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
        vec![Some(g.mul(&Var::constant(sign)))]
    }
}

impl Op for LeakyRelu {
    fn backward(&self, inputs: &[Var], g: &Var, _needs: &[bool]) -> Vec<Option<Var>> {
        let slope = self.0;
        let mask = inputs[0].value().map(|v| if v > 0.0 { 1.0 } else { slope });
        vec![Some(g.mul(&Var::constant(mask)))]
    }
}

impl Op for SumKeep {
    fn backward(&self, _inputs: &[Var], g: &Var, _needs: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.expand(&self.in_shape))]
    }
}

impl Op for Expand {
    fn backward(&self, _inputs: &[Var], g: &Var, _needs: &[bool]) -> Vec<Option<Var>> {
        let keep: Vec<bool> = self.in_shape.iter().map(|&d| d != 1).collect();
        let reduced = g.sum_keep(&keep);
        // dims that were 1 on both sides stay 1; the shapes now agree
        debug_assert_eq!(reduced.shape(), &self.in_shape[..]);
        vec![Some(reduced)]
    }
}

impl Op for Reshape {
    fn backward(&self, _inputs: &[Var], g: &Var, _needs: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.reshape(&self.in_shape))]
    }
}

impl Op for Narrow {
    fn backward(&self, _inputs: &[Var], g: &Var, _needs: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.pad_channels(self.start, self.total))]
    }
}

impl Op for Pad {
    fn backward(&self, _inputs: &[Var], g: &Var, _needs: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.narrow_channels(self.start, self.len))]
    }
}

/// Sums over every axis whose `keep` flag is false, leaving size-1 axes.
fn sum_keep_tensor(x: &Tensor, keep: &[bool]) -> Tensor {
    let shape = x.shape();
    assert_eq!(keep.len(), shape.len());
    let out_shape: Vec<usize> = shape.iter().zip(keep).map(|(&d, &k)| if k { d } else { 1 }).collect();
    let in_strides = Tensor::strides(shape);
    let out_strides = Tensor::strides(&out_shape);
    let mut out = vec![0.0; out_shape.iter().product()];
    for (flat, &v) in x.data().iter().enumerate() {
        let mut o = 0;
        for d in 0..shape.len() {
            if keep[d] {
                o += (flat / in_strides[d] % shape[d]) * out_strides[d];
            }
        }
        out[o] += v;
    }
    Tensor::new(out_shape, out)
}

fn expand_tensor(x: &Tensor, shape: &[usize]) -> Tensor {
    let in_shape = x.shape();
    assert_eq!(in_shape.len(), shape.len(), "expand rank mismatch");
    for (a, b) in in_shape.iter().zip(shape) {
        assert!(*a == *b || *a == 1, "cannot expand {in_shape:?} to {shape:?}");
    }
    let in_strides = Tensor::strides(in_shape);
    let out_strides = Tensor::strides(shape);
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    for flat in 0..numel {
        let mut i = 0;
        for d in 0..shape.len() {
            if in_shape[d] != 1 {
                i += (flat / out_strides[d] % shape[d]) * in_strides[d];
            }
        }
        out.push(x.data()[i]);
    }
    Tensor::new(shape.to_vec(), out)
}

/// Splits a rank-4 shape around the channel axis: (outer, channels, inner).
fn channel_split(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 4, "channel ops need rank-4 tensors");
    (shape[0], shape[1], shape[2] * shape[3])
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(v, Add, vec![self.clone(), other.clone()])
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(v, Sub, vec![self.clone(), other.clone()])
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a * b);
        Var::from_op(v, Mul, vec![self.clone(), other.clone()])
    }

    pub fn scale(&self, c: f64) -> Var {
        Var::from_op(self.value().map(|a| a * c), Scale(c), vec![self.clone()])
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        Var::from_op(self.value().map(|a| a + c), AddScalar, vec![self.clone()])
    }

    pub fn powf(&self, p: f64) -> Var {
        Var::from_op(self.value().map(|a| a.powf(p)), Powf(p), vec![self.clone()])
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn tanh(&self) -> Var {
        Var::from_op(self.value().map(f64::tanh), Tanh, vec![self.clone()])
    }

    pub fn abs(&self) -> Var {
        Var::from_op(self.value().map(f64::abs), Abs, vec![self.clone()])
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let v = self.value().map(|a| if a > 0.0 { a } else { slope * a });
        Var::from_op(v, LeakyRelu(slope), vec![self.clone()])
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    /// Sums the axes whose `keep` flag is false; those axes become size 1.
    pub fn sum_keep(&self, keep: &[bool]) -> Var {
        let v = sum_keep_tensor(self.value(), keep);
        Var::from_op(v, SumKeep { in_shape: self.shape().to_vec() }, vec![self.clone()])
    }

    /// Broadcasts size-1 axes up to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let v = expand_tensor(self.value(), shape);
        Var::from_op(v, Expand { in_shape: self.shape().to_vec() }, vec![self.clone()])
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self.value().clone().reshape(shape.to_vec());
        Var::from_op(v, Reshape { in_shape: self.shape().to_vec() }, vec![self.clone()])
    }

    /// Sum of every element, as a one-element tensor of the same rank.
    pub fn sum_all(&self) -> Var {
        self.sum_keep(&vec![false; self.shape().len()])
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Per-sample sum over every axis but the first: shape `[N, 1, …]`.
    pub fn sum_per_sample(&self) -> Var {
        let mut keep = vec![false; self.shape().len()];
        keep[0] = true;
        self.sum_keep(&keep)
    }

    pub fn mean_per_sample(&self) -> Var {
        let per = self.value().numel() / self.shape()[0];
        self.sum_per_sample().scale(1.0 / per as f64)
    }

    /// Multiplies by a one-element variable broadcast over `self`.
    pub fn mul_scalar_var(&self, s: &Var) -> Var {
        self.mul(&s.expand(self.shape()))
    }

    pub fn narrow_channels(&self, start: usize, len: usize) -> Var {
        let (outer, c, inner) = channel_split(self.shape());
        assert!(start + len <= c);
        let src = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * c + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[1] = len;
        Var::from_op(Tensor::new(shape, out), Narrow { start, total: c }, vec![self.clone()])
    }

    pub fn pad_channels(&self, start: usize, total: usize) -> Var {
        let (outer, len, inner) = channel_split(self.shape());
        assert!(start + len <= total);
        let src = self.value().data();
        let mut out = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let dst = (o * total + start) * inner;
            out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[1] = total;
        Var::from_op(Tensor::new(shape, out), Pad { start, len }, vec![self.clone()])
    }

    /// Concatenates rank-4 variables along the channel axis.
    pub fn concat_channels(parts: &[&Var]) -> Var {
        let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut start = 0;
        let mut acc: Option<Var> = None;
        for p in parts {
            let padded = p.pad_channels(start, total);
            start += p.shape()[1];
            acc = Some(match acc {
                Some(a) => a.add(&padded),
                None => padded,
            });
        }
        acc.expect("concat of zero parts")
    }
}
