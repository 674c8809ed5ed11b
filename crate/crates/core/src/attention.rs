//! Local multi-head cosine attention on a mesh neighborhood, with a
//! quadrature correction `log ω_j` and an additive relative bias.
//!
//! For head `h` and slot `j ∈ 𝒩(i)`:
//! `ℓ_ij = τ_h ⟨q̂_i, k̂_j⟩ + b_ij + log ω_j`, `τ_h = exp(min(s_h, log 100))`,
//! followed by a softmax over the valid slots of row `i`.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::icosphere::NeighborTable;
use crate::nn::{Init, ParamId, Params};

/// Upper clamp of the attention temperature.
pub const MAX_SCALE: f64 = 100.0;
/// Denominator clamp of the ℓ₂ normalization.
pub const NORM_EPS: f64 = 1e-12;
/// Floor applied to area weights before the logarithm.
pub const OMEGA_FLOOR: f64 = 1e-12;

/// Parameter handles of one attention layer (`W_Q`, `W_K`, `W_V`, `W_O` are
/// `D × D`; head `h` owns columns `h·D/H .. (h+1)·D/H`).
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub heads: usize,
    pub dim: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    /// Per-head log-scale `s_h`.
    pub log_scale: ParamId,
}

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct AttentionState {
    x: Array2<f64>,
    q_hat: Array2<f64>,
    k_hat: Array2<f64>,
    q_norm: Array2<f64>,
    k_norm: Array2<f64>,
    v: Array2<f64>,
    y: Array2<f64>,
    /// `L × K × H` cosine similarities.
    pub cosine: Vec<f64>,
    /// `L × K × H` attention weights; exactly 0 on padded slots.
    pub weights: Vec<f64>,
    tau: Vec<f64>,
    log_scale: Vec<f64>,
}

/// Gradients that do not live in the parameter store.
#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub input: Array2<f64>,
    /// `L × K × H`, zero on padded slots.
    pub bias: Vec<f64>,
}

pub fn effective_scale(s: f64) -> f64 {
    s.min(MAX_SCALE.ln()).exp()
}

impl AttentionParams {
    pub fn new<R: Rng>(p: &mut Params, name: &str, dim: usize, heads: usize, init_log_scale: f64, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} is not divisible by heads {heads}")));
        }
        let xavier = Init::Xavier { fan_in: dim, fan_out: dim };
        Ok(Self {
            heads,
            dim,
            w_q: p.add(format!("{name}.w_q"), &[dim, dim], xavier, rng),
            w_k: p.add(format!("{name}.w_k"), &[dim, dim], xavier, rng),
            w_v: p.add(format!("{name}.w_v"), &[dim, dim], xavier, rng),
            w_o: p.add(format!("{name}.w_o"), &[dim, dim], xavier, rng),
            log_scale: p.add(format!("{name}.log_scale"), &[heads], Init::Constant(init_log_scale), rng),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Forward pass. `bias` is `L × K × H` or empty for no bias; `log_omega`
    /// holds `log ω_j` per node (zeros disable the quadrature correction).
    pub fn forward(
        &self,
        p: &Params,
        x: ArrayView2<'_, f64>,
        table: &NeighborTable,
        bias: &[f64],
        log_omega: &[f64],
    ) -> (Array2<f64>, AttentionState) {
        let l = x.nrows();
        let h_count = self.heads;
        let hd = self.head_dim();
        let k = table.max_degree;
        let raw_q = x.dot(&p.mat(self.w_q));
        let raw_k = x.dot(&p.mat(self.w_k));
        let v = x.dot(&p.mat(self.w_v));
        let (q_hat, q_norm) = normalize_heads(&raw_q, h_count);
        let (k_hat, k_norm) = normalize_heads(&raw_k, h_count);
        let log_scale: Vec<f64> = p.slice(self.log_scale).to_vec();
        let tau: Vec<f64> = log_scale.iter().map(|&s| effective_scale(s)).collect();

        let mut cosine = vec![0.0; l * k * h_count];
        let mut weights = vec![0.0; l * k * h_count];
        let mut y = Array2::<f64>::zeros((l, self.dim));
        let mut logits = vec![0.0; k];
        for i in 0..l {
            let row = table.row(i);
            let mask = table.row_mask(i);
            for h in 0..h_count {
                let cols = h * hd..(h + 1) * hd;
                let qi = q_hat.slice(s![i, cols.clone()]);
                let mut max = f64::NEG_INFINITY;
                for slot in 0..k {
                    if !mask[slot] {
                        logits[slot] = f64::NEG_INFINITY;
                        continue;
                    }
                    let j = row[slot] as usize;
                    let u = qi.dot(&k_hat.slice(s![j, cols.clone()]));
                    let idx = (i * k + slot) * h_count + h;
                    cosine[idx] = u;
                    let b = if bias.is_empty() { 0.0 } else { bias[idx] };
                    logits[slot] = tau[h] * u + b + log_omega[j];
                    max = max.max(logits[slot]);
                }
                let mut total = 0.0;
                for slot in 0..k {
                    if mask[slot] {
                        let e = (logits[slot] - max).exp();
                        logits[slot] = e;
                        total += e;
                    }
                }
                for slot in 0..k {
                    if !mask[slot] {
                        continue;
                    }
                    let a = logits[slot] / total;
                    weights[(i * k + slot) * h_count + h] = a;
                    let j = row[slot] as usize;
                    let mut yi = y.slice_mut(s![i, cols.clone()]);
                    yi.scaled_add(a, &v.slice(s![j, cols.clone()]));
                }
            }
        }
        let out = y.dot(&p.mat(self.w_o));
        let state = AttentionState {
            x: x.to_owned(),
            q_hat,
            k_hat,
            q_norm,
            k_norm,
            v,
            y,
            cosine,
            weights,
            tau,
            log_scale,
        };
        (out, state)
    }

    /// Reverse pass: accumulates `W_*` and `s` gradients into `grads` and
    /// returns the input and bias gradients.
    pub fn backward(
        &self,
        p: &Params,
        state: &AttentionState,
        table: &NeighborTable,
        upstream: ArrayView2<'_, f64>,
        grads: &mut [f64],
    ) -> AttentionGrads {
        let l = state.x.nrows();
        let h_count = self.heads;
        let hd = self.head_dim();
        let k = table.max_degree;
        {
            let mut g = p.grad_mat(self.w_o, grads);
            g += &state.y.t().dot(&upstream);
        }
        let dy = upstream.dot(&p.mat(self.w_o).t());
        let mut dq_hat = Array2::<f64>::zeros((l, self.dim));
        let mut dk_hat = Array2::<f64>::zeros((l, self.dim));
        let mut dv = Array2::<f64>::zeros((l, self.dim));
        let mut dbias = vec![0.0; l * k * h_count];
        let mut dtau = vec![0.0; h_count];
        let mut da = vec![0.0; k];
        for i in 0..l {
            let row = table.row(i);
            let mask = table.row_mask(i);
            for h in 0..h_count {
                let cols = h * hd..(h + 1) * hd;
                let dyi = dy.slice(s![i, cols.clone()]);
                let mut weighted = 0.0;
                for slot in 0..k {
                    if !mask[slot] {
                        continue;
                    }
                    let j = row[slot] as usize;
                    let idx = (i * k + slot) * h_count + h;
                    let a = state.weights[idx];
                    da[slot] = dyi.dot(&state.v.slice(s![j, cols.clone()]));
                    weighted += a * da[slot];
                    dv.slice_mut(s![j, cols.clone()]).scaled_add(a, &dyi);
                }
                for slot in 0..k {
                    if !mask[slot] {
                        continue;
                    }
                    let j = row[slot] as usize;
                    let idx = (i * k + slot) * h_count + h;
                    let dl = state.weights[idx] * (da[slot] - weighted);
                    dbias[idx] = dl;
                    dtau[h] += dl * state.cosine[idx];
                    let du = state.tau[h] * dl;
                    if du != 0.0 {
                        let kj = state.k_hat.slice(s![j, cols.clone()]).to_owned();
                        dq_hat.slice_mut(s![i, cols.clone()]).scaled_add(du, &kj);
                        let qi = state.q_hat.slice(s![i, cols.clone()]).to_owned();
                        dk_hat.slice_mut(s![j, cols.clone()]).scaled_add(du, &qi);
                    }
                }
            }
        }
        {
            let mut gs = p.grad_vec(self.log_scale, grads);
            for h in 0..h_count {
                // The clamp is flat at and above log 100.
                if state.log_scale[h] < MAX_SCALE.ln() {
                    gs[h] += dtau[h] * state.tau[h];
                }
            }
        }
        let dq = normalize_heads_backward(&state.q_hat, &state.q_norm, &dq_hat, h_count);
        let dk = normalize_heads_backward(&state.k_hat, &state.k_norm, &dk_hat, h_count);
        let xt = state.x.t();
        {
            let mut g = p.grad_mat(self.w_q, grads);
            g += &xt.dot(&dq);
        }
        {
            let mut g = p.grad_mat(self.w_k, grads);
            g += &xt.dot(&dk);
        }
        {
            let mut g = p.grad_mat(self.w_v, grads);
            g += &xt.dot(&dv);
        }
        let input = dq.dot(&p.mat(self.w_q).t()) + dk.dot(&p.mat(self.w_k).t()) + dv.dot(&p.mat(self.w_v).t());
        AttentionGrads { input, bias: dbias }
    }
}

fn normalize_heads(raw: &Array2<f64>, heads: usize) -> (Array2<f64>, Array2<f64>) {
    let (l, d) = raw.dim();
    let hd = d / heads;
    let mut out = raw.clone();
    let mut norms = Array2::<f64>::zeros((l, heads));
    for i in 0..l {
        for h in 0..heads {
            let mut seg = out.slice_mut(s![i, h * hd..(h + 1) * hd]);
            let n = seg.dot(&seg).sqrt();
            norms[[i, h]] = n;
            seg /= n.max(NORM_EPS);
        }
    }
    (out, norms)
}

fn normalize_heads_backward(hat: &Array2<f64>, norms: &Array2<f64>, dhat: &Array2<f64>, heads: usize) -> Array2<f64> {
    let (l, d) = hat.dim();
    let hd = d / heads;
    let mut out = Array2::<f64>::zeros((l, d));
    for i in 0..l {
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let n = norms[[i, h]];
            let g = dhat.slice(s![i, cols.clone()]);
            let mut o = out.slice_mut(s![i, cols.clone()]);
            if n > NORM_EPS {
                let qh = hat.slice(s![i, cols]);
                let proj = qh.dot(&g);
                o.assign(&((&g - &(&qh * proj)) / n));
            } else {
                o.assign(&(&g / NORM_EPS));
            }
        }
    }
    out
}

/// Checked entry point: validates the input and area weights, then runs the
/// forward pass with `log(max(ω_j, 1e-12))` as the quadrature term.
pub fn attention_forward(
    p: &Params,
    attn: &AttentionParams,
    x: ArrayView2<'_, f64>,
    table: &NeighborTable,
    bias: &[f64],
    omega: &[f64],
) -> Result<(Array2<f64>, AttentionState)> {
    if x.ncols() != attn.dim || x.nrows() != table.rows() || omega.len() != x.nrows() {
        return Err(Error::Config(format!(
            "shape mismatch: x {:?}, table rows {}, omega {}",
            x.dim(),
            table.rows(),
            omega.len()
        )));
    }
    if !bias.is_empty() && bias.len() != table.rows() * table.max_degree * attn.heads {
        return Err(Error::Config("bias tensor has the wrong shape".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("attention input contains non-finite values".into()));
    }
    for i in 0..table.rows() {
        for (_, j) in table.valid_row(i) {
            if !(omega[j] > 0.0) {
                return Err(Error::Data(format!("area weight of node {j} is not positive")));
            }
        }
    }
    let log_omega: Vec<f64> = omega.iter().map(|w| w.max(OMEGA_FLOOR).ln()).collect();
    Ok(attn.forward(p, x, table, bias, &log_omega))
}
