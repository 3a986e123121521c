use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{add_bias, normal_init, CriticFn, ParamSet};
use crate::autograd::{conv_out_size, ConvGeom, Tensor, Var};
use crate::error::{Error, Result};

const LEAK: f64 = 0.2;
/// Floor for the singular-value estimate.
const SIGMA_EPS: f64 = 1e-12;

/// Patch critic layout. Every layer is a kernel-4, padding-1 convolution;
/// `strides` has one entry per convolution including the 1-channel output
/// layer, so `widths` must cover `strides.len() − 1` hidden layers.
/// `strides = None` picks (2,2,2,1,1) for grids ≥ 64 and (2,2,1) below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticSpec {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub strides: Option<Vec<usize>>,
    pub spectral_norm: bool,
}

impl Default for CriticSpec {
    fn default() -> Self {
        Self { in_channels: 2, widths: vec![64, 128, 256, 512], strides: None, spectral_norm: true }
    }
}

impl CriticSpec {
    pub fn default_strides(grid_n: usize) -> Vec<usize> {
        if grid_n >= 64 {
            vec![2, 2, 2, 1, 1]
        } else {
            vec![2, 2, 1]
        }
    }

    /// Copy with `strides` filled in and the layer count checked against the
    /// grid.
    pub fn resolve(&self, grid_n: usize) -> Result<CriticSpec> {
        let strides = self.strides.clone().unwrap_or_else(|| Self::default_strides(grid_n));
        if strides.is_empty() || strides.contains(&0) {
            return Err(Error::Config("critic strides must be non-empty and positive".into()));
        }
        if self.widths.len() < strides.len() - 1 || self.widths.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config(format!(
                "critic needs {} positive hidden widths, got {:?}",
                strides.len() - 1,
                self.widths
            )));
        }
        if !self.in_channels.is_multiple_of(2) {
            return Err(Error::Config("critic input channels must split evenly into source and candidate".into()));
        }
        map_side(grid_n, &strides)?;
        Ok(CriticSpec { strides: Some(strides), ..self.clone() })
    }
}

/// Score-map side for an `n`-grid under a stride schedule.
pub(crate) fn map_side(n: usize, strides: &[usize]) -> Result<usize> {
    let mut side = n;
    for &s in strides {
        if side + 2 < 4 {
            return Err(Error::Config(format!("grid {n} is too small for critic strides {strides:?}")));
        }
        side = conv_out_size(side, ConvGeom { kernel: 4, stride: s, pad: 1 });
    }
    Ok(side)
}

/// Persistent singular-vector estimates for one weight viewed as
/// `rows × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn normalize(x: &mut [f64]) {
    let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|a| *a /= n);
    }
}

impl SpectralState {
    pub fn new<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut v: Vec<f64> = (0..cols).map(|_| rng.random::<f64>() - 0.5).collect();
        normalize(&mut u);
        normalize(&mut v);
        Self { u, v }
    }

    /// `iters` rounds of `v ← Wᵀu/‖·‖, u ← Wv/‖·‖`; returns `uᵀWv`.
    pub fn power_iterate(&mut self, w: &[f64], iters: usize) -> f64 {
        let (rows, cols) = (self.u.len(), self.v.len());
        assert_eq!(w.len(), rows * cols, "weight does not match the spectral state");
        for _ in 0..iters {
            self.v.iter_mut().for_each(|x| *x = 0.0);
            for (r, &ur) in self.u.iter().enumerate() {
                for (vc, &wrc) in self.v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                    *vc += wrc * ur;
                }
            }
            normalize(&mut self.v);
            for (r, ur) in self.u.iter_mut().enumerate() {
                *ur = w[r * cols..(r + 1) * cols].iter().zip(&self.v).map(|(a, b)| a * b).sum();
            }
            normalize(&mut self.u);
        }
        self.sigma(w)
    }

    pub fn sigma(&self, w: &[f64]) -> f64 {
        let cols = self.v.len();
        self.u
            .iter()
            .enumerate()
            .map(|(r, ur)| ur * w[r * cols..(r + 1) * cols].iter().zip(&self.v).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    /// `u vᵀ` laid out like the weight.
    fn outer(&self, shape: &[usize]) -> Tensor {
        let data = self.u.iter().flat_map(|ur| self.v.iter().map(move |vc| ur * vc)).collect();
        Tensor::new(shape.to_vec(), data)
    }
}

/// Divides `weight` (viewed as `shape[0] × rest`) by the power-iteration
/// estimate of its largest singular value, after `iters` further iterations
/// on `state`.
pub fn spectral_normalize(weight: &Tensor, state: &mut SpectralState, iters: usize) -> Tensor {
    assert!(iters >= 1, "spectral normalization needs at least one iteration");
    let sigma = state.power_iterate(weight.data(), iters).max(SIGMA_EPS);
    weight.map(|w| w / sigma)
}

/// PatchGAN critic over the channel concatenation of source and candidate.
#[derive(Debug, Clone)]
pub struct Critic {
    spec: CriticSpec,
    grid_n: usize,
    params: ParamSet,
    spectral: Vec<SpectralState>,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(spec: &CriticSpec, grid_n: usize, rng: &mut R) -> Result<Self> {
        let spec = spec.resolve(grid_n)?;
        let mut params = ParamSet::new();
        let mut spectral = Vec::new();
        for (name, shape) in layout(&spec) {
            if shape.len() == 1 {
                params.push(name, Tensor::zeros(&shape));
            } else {
                spectral.push(SpectralState::new(shape[0], shape[1..].iter().product(), rng));
                params.push(name, normal_init(&shape, rng));
            }
        }
        Ok(Self { spec, grid_n, params, spectral })
    }

    pub fn spec(&self) -> &CriticSpec {
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

    pub fn spectral_states(&self) -> &[SpectralState] {
        &self.spectral
    }

    pub fn spectral_states_mut(&mut self) -> &mut [SpectralState] {
        &mut self.spectral
    }

    /// Side of the score map.
    pub fn map_side(&self) -> usize {
        map_side(self.grid_n, self.spec.strides.as_deref().expect("resolved spec")).expect("checked at construction")
    }

    /// Advances every layer's singular-vector estimates.
    pub fn power_iterate(&mut self, iters: usize) {
        let weights = self.params.tensors().iter().step_by(2);
        for (state, w) in self.spectral.iter_mut().zip(weights) {
            state.power_iterate(w.data(), iters);
        }
    }

    /// Effective (normalized) convolution weights, for inspection.
    pub fn effective_weights(&self) -> Vec<Tensor> {
        let weights = self.params.tensors().iter().step_by(2);
        weights
            .zip(&self.spectral)
            .map(|(w, s)| if self.spec.spectral_norm { w.map(|x| x / s.sigma(w.data()).max(SIGMA_EPS)) } else { w.clone() })
            .collect()
    }

    /// Binds the parameters for one forward/backward pass.
    pub fn bind(&self, trainable: bool) -> BoundCritic<'_> {
        BoundCritic { critic: self, vars: self.params.bind(trainable) }
    }
}

fn layout(spec: &CriticSpec) -> Vec<(String, Vec<usize>)> {
    let strides = spec.strides.as_ref().expect("resolved spec");
    let mut out = Vec::new();
    let mut cin = spec.in_channels;
    for (k, _) in strides.iter().enumerate() {
        let cout = if k + 1 == strides.len() { 1 } else { spec.widths[k] };
        out.push((format!("conv{k}.w"), vec![cout, cin, 4, 4]));
        out.push((format!("conv{k}.b"), vec![cout]));
        cin = cout;
    }
    out
}

/// A critic with its parameters attached to the current graph.
pub struct BoundCritic<'a> {
    critic: &'a Critic,
    vars: Vec<Var>,
}

impl BoundCritic<'_> {
    /// Graph handles in [`ParamSet`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn weight(&self, k: usize) -> Var {
        let w = &self.vars[2 * k];
        if !self.critic.spec.spectral_norm {
            return w.clone();
        }
        let state = &self.critic.spectral[k];
        // σ = uᵀWv with u, v held fixed, so dσ/dW = u vᵀ.
        let sigma = w.mul(&Var::constant(state.outer(w.shape()))).sum_all();
        if sigma.item() < SIGMA_EPS {
            return w.scale(1.0 / SIGMA_EPS);
        }
        w.mul_scalar_var(&sigma.powf(-1.0))
    }
}

impl CriticFn for BoundCritic<'_> {
    fn score_map(&self, src: &Var, candidate: &Var) -> Var {
        let n = self.critic.grid_n;
        let expect = [candidate.shape()[0], self.critic.spec.in_channels / 2, n, n];
        assert!(src.shape() == candidate.shape() && candidate.shape() == expect, "critic inputs must be {expect:?}");
        let strides = self.critic.spec.strides.as_ref().expect("resolved spec");
        let mut h = Var::concat_channels(&[src, candidate]);
        for (k, &s) in strides.iter().enumerate() {
            let g = ConvGeom { kernel: 4, stride: s, pad: 1 };
            h = add_bias(&h.conv2d(&self.weight(k), g), &self.vars[2 * k + 1]);
            if k + 1 < strides.len() {
                h = h.leaky_relu(LEAK);
            }
        }
        h
    }
}
