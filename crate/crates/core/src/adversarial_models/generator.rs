use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{add_bias, normal_init, ParamSet};
use crate::autograd::{ConvGeom, Tensor, Var};
use crate::error::{Error, Result};

const DOWN: ConvGeom = ConvGeom { kernel: 4, stride: 2, pad: 1 };
const WIDTH_MULT: [usize; 6] = [1, 2, 4, 8, 8, 8];
const MAX_DEPTH: usize = 6;
const IN_EPS: f64 = 1e-5;
const LEAK: f64 = 0.2;

/// U-Net layout. `depth = None` picks [`default_depth`] for the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: Option<usize>,
    pub norm: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self { in_channels: 1, out_channels: 1, base_width: 64, depth: None, norm: true }
    }
}

/// Largest depth ≤ 6 for which `grid_n` halves cleanly down to a bottleneck
/// of at least 2×2. 128 → 6, 64 → 5, 32 → 4, 16 → 3, 8 → 2.
pub fn default_depth(grid_n: usize) -> Option<usize> {
    (1..=MAX_DEPTH).rev().find(|&d| grid_n.is_multiple_of(1 << d) && grid_n >> d >= 2)
}

impl GeneratorSpec {
    /// Copy with `depth` filled in, after checking it fits `grid_n`.
    pub fn resolve(&self, grid_n: usize) -> Result<GeneratorSpec> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("generator channel counts must be positive".into()));
        }
        let depth = match self.depth {
            Some(d) => d,
            None => default_depth(grid_n)
                .ok_or_else(|| Error::Config(format!("no U-Net depth fits grid {grid_n}")))?,
        };
        if depth == 0 || depth > MAX_DEPTH {
            return Err(Error::Config(format!("generator depth must be in 1..={MAX_DEPTH}, got {depth}")));
        }
        if !grid_n.is_multiple_of(1 << depth) {
            return Err(Error::Config(format!("grid {grid_n} is not divisible by 2^{depth}")));
        }
        Ok(GeneratorSpec { depth: Some(depth), ..self.clone() })
    }

    fn widths(&self) -> Vec<usize> {
        let depth = self.depth.expect("resolved spec");
        WIDTH_MULT[..depth].iter().map(|m| m * self.base_width).collect()
    }
}

/// U-Net with stride-2 kernel-4 convolutions, skip concatenation and a
/// final tanh.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: GeneratorSpec,
    grid_n: usize,
    params: ParamSet,
}

impl Generator {
    /// Weights drawn from N(0, 0.02²), biases zero.
    pub fn new<R: Rng + ?Sized>(spec: &GeneratorSpec, grid_n: usize, rng: &mut R) -> Result<Self> {
        let spec = spec.resolve(grid_n)?;
        let mut params = ParamSet::new();
        for (name, shape) in layout(&spec) {
            let t = if shape.len() == 1 { Tensor::zeros(&shape) } else { normal_init(&shape, rng) };
            params.push(name, t);
        }
        Ok(Self { spec, grid_n, params })
    }

    /// Rebuilds a generator around existing parameters.
    pub fn from_params(spec: &GeneratorSpec, grid_n: usize, params: ParamSet) -> Result<Self> {
        let spec = spec.resolve(grid_n)?;
        let expected = layout(&spec);
        let matches = expected.len() == params.len()
            && expected.iter().zip(params.names().iter().zip(params.tensors())).all(|((n, s), (pn, t))| n == pn && s == t.shape());
        if !matches {
            return Err(Error::Config("parameters do not match the generator layout".into()));
        }
        Ok(Self { spec, grid_n, params })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn grid_n(&self) -> usize {
        self.grid_n
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Zeroes the output layer so the generator emits `tanh(0) = 0`.
    pub fn zero_output_layer(&mut self) {
        let n = self.params.len();
        for t in &mut self.params.tensors_mut()[n - 2..] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let n = self.grid_n;
        if shape.len() != 4 || shape[1] != self.spec.in_channels || shape[2] != n || shape[3] != n {
            return Err(Error::Shape {
                expected: format!("[N, {}, {n}, {n}]", self.spec.in_channels),
                actual: format!("{shape:?}"),
            });
        }
        Ok(())
    }

    /// Forward pass with parameters bound to graph handles `p` (from
    /// [`ParamSet::bind`]).
    pub fn forward_vars(&self, p: &[Var], x: &Var) -> Result<Var> {
        self.check_input(x.shape())?;
        let depth = self.spec.depth.expect("resolved spec");
        let norm = |v: Var| if self.spec.norm { instance_norm(&v) } else { v };

        let mut skips: Vec<Var> = Vec::with_capacity(depth);
        let mut h = x.clone();
        for k in 0..depth {
            let input = if k == 0 { h } else { h.leaky_relu(LEAK) };
            let y = add_bias(&input.conv2d(&p[2 * k], DOWN), &p[2 * k + 1]);
            h = if k == 0 { y } else { norm(y) };
            skips.push(h.clone());
        }
        for (step, k) in (0..depth).rev().enumerate() {
            let input = if k == depth - 1 { h } else { Var::concat_channels(&[&h, &skips[k]]) };
            let side = self.grid_n >> k;
            let i = 2 * (depth + step);
            let y = add_bias(&input.relu().conv_transpose(&p[i], DOWN, side, side), &p[i + 1]);
            h = if k == 0 { y.tanh() } else { norm(y) };
        }
        Ok(h)
    }

    /// Inference on a plain tensor.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.params.bind(false);
        Ok(self.forward_vars(&p, &Var::constant(x.clone()))?.value().clone())
    }
}

/// Parameter names and shapes in storage order.
fn layout(spec: &GeneratorSpec) -> Vec<(String, Vec<usize>)> {
    let w = spec.widths();
    let depth = w.len();
    let mut out = Vec::with_capacity(4 * depth);
    for k in 0..depth {
        let cin = if k == 0 { spec.in_channels } else { w[k - 1] };
        out.push((format!("enc{k}.w"), vec![w[k], cin, 4, 4]));
        out.push((format!("enc{k}.b"), vec![w[k]]));
    }
    // dec{k} maps level k+1 back up to level k's resolution
    for k in (0..depth).rev() {
        let cin = if k == depth - 1 { w[k] } else { 2 * w[k] };
        let cout = if k == 0 { spec.out_channels } else { w[k - 1] };
        out.push((format!("dec{k}.w"), vec![cin, cout, 4, 4]));
        out.push((format!("dec{k}.b"), vec![cout]));
    }
    out
}

/// Per-sample, per-channel normalization over the spatial axes; no affine.
pub(crate) fn instance_norm(x: &Var) -> Var {
    let s = x.shape().to_vec();
    let area = (s[2] * s[3]) as f64;
    let keep = [true, true, false, false];
    let mean = x.sum_keep(&keep).scale(1.0 / area);
    let centred = x.sub(&mean.expand(&s));
    let var = centred.square().sum_keep(&keep).scale(1.0 / area);
    centred.mul(&var.add_scalar(IN_EPS).powf(-0.5).expand(&s))
}
