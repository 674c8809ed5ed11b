//! Flat parameter storage and the small dense layers the backbone is built
//! from. Every layer exposes an explicit forward pass and a matching
//! reverse-mode backward pass that accumulates into a flat gradient buffer
//! aligned with [`Params::values`].

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Location of one named tensor inside [`Params::values`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    specs: Vec<ParamSpec>,
    pub values: Vec<f64>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let offset = self.values.len();
        let n: usize = shape.iter().product();
        match init {
            Init::Zeros => self.values.extend(std::iter::repeat_n(0.0, n)),
            Init::Constant(c) => self.values.extend(std::iter::repeat_n(c, n)),
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                self.values.extend((0..n).map(|_| rng.random_range(-a..a)));
            }
        }
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    pub fn range(&self, id: ParamId) -> std::ops::Range<usize> {
        let s = &self.specs[id.0];
        s.offset..s.offset + s.numel()
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        &self.values[self.range(id)]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [f64] {
        let r = self.range(id);
        &mut self.values[r]
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let s = &self.specs[id.0];
        ArrayView2::from_shape((s.shape[0], s.shape[1]), self.slice(id)).expect("2-d parameter")
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.slice(id))
    }

    pub fn grad_mat<'g>(&self, id: ParamId, grads: &'g mut [f64]) -> ArrayViewMut2<'g, f64> {
        let s = &self.specs[id.0];
        let r = self.range(id);
        ArrayViewMut2::from_shape((s.shape[0], s.shape[1]), &mut grads[r]).expect("2-d parameter")
    }

    pub fn grad_vec<'g>(&self, id: ParamId, grads: &'g mut [f64]) -> ArrayViewMut1<'g, f64> {
        let r = self.range(id);
        ArrayViewMut1::from(&mut grads[r])
    }

    /// Rebuild a parameter set from stored specs and values.
    pub fn from_parts(specs: Vec<ParamSpec>, values: Vec<f64>) -> Option<Self> {
        let mut expected = 0;
        for s in &specs {
            if s.offset != expected {
                return None;
            }
            expected += s.numel();
        }
        (expected == values.len()).then_some(Self { specs, values })
    }
}

/// `y = x W + b` applied row-wise.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(p: &mut Params, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let weight = p.add(
            format!("{name}.weight"),
            &[in_dim, out_dim],
            Init::Xavier { fan_in: in_dim, fan_out: out_dim },
            rng,
        );
        let bias = bias.then(|| p.add(format!("{name}.bias"), &[out_dim], Init::Zeros, rng));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, p: &Params, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&p.mat(self.weight));
        if let Some(b) = self.bias {
            y += &p.vec(b);
        }
        y
    }

    /// Accumulate parameter gradients and return `∂/∂x`.
    pub fn backward(&self, p: &Params, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, grads: &mut [f64]) -> Array2<f64> {
        {
            let mut gw = p.grad_mat(self.weight, grads);
            gw += &x.t().dot(&dy);
        }
        if let Some(b) = self.bias {
            let mut gb = p.grad_vec(b, grads);
            gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&p.mat(self.weight).t())
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization over the feature dimension of each node.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new<R: Rng>(p: &mut Params, name: &str, dim: usize, rng: &mut R) -> Self {
        let gamma = p.add(format!("{name}.gamma"), &[dim], Init::Constant(1.0), rng);
        let beta = p.add(format!("{name}.beta"), &[dim], Init::Zeros, rng);
        Self { gamma, beta, dim }
    }

    pub fn forward(&self, p: &Params, x: ArrayView2<'_, f64>) -> (Array2<f64>, LayerNormCache) {
        let d = self.dim as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = &x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LAYER_NORM_EPS).sqrt());
        let xhat = centered * &inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &p.vec(self.gamma) + &p.vec(self.beta);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &Params, cache: &LayerNormCache, dy: ArrayView2<'_, f64>, grads: &mut [f64]) -> Array2<f64> {
        {
            let mut gg = p.grad_vec(self.gamma, grads);
            gg += &(&dy * &cache.xhat).sum_axis(Axis(0));
        }
        {
            let mut gb = p.grad_vec(self.beta, grads);
            gb += &dy.sum_axis(Axis(0));
        }
        let d = self.dim as f64;
        let dxhat = &dy * &p.vec(self.gamma);
        let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
        let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
        let mut dx = dxhat;
        dx -= &mean_dxhat.view().insert_axis(Axis(1));
        dx -= &(&cache.xhat * &mean_dxhat_xhat.view().insert_axis(Axis(1)));
        dx *= &cache.inv_std.view().insert_axis(Axis(1));
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Central finite differences of a scalar function.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], indices: &[usize], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
