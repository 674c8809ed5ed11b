//! Property suite behind the `selftest` command: mesh invariants, the
//! attention and gauge-pool oracles, finite-difference gradients, exact
//! icosahedral equivariance and the consistency-loss contracts.

use std::f64::consts::PI;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{attention_forward, effective_scale, AttentionParams};
use crate::config::ModelConfig;
use crate::gauge_bias::{bias_gradients, eval_bias, FourierBiasTable};
use crate::geometry::{build_geodesic_cache, GeodesicCache};
use crate::icosphere::{build_icosphere, build_neighbor_table, vertex_count, NeighborTable};
use crate::model::{consistency_loss, gather_rows, seg_loss, total_loss, Geometry, Model};
use crate::nn::{central_difference, relative_error, Params};
use crate::so3::{build_rotation_maps, icosahedral_group, is_permutation, reindex, sample_rotation_uniform, Rotation};
use crate::transfer::{RankTransfer, SamplingMode, TiePolicy};

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
    pub budget_seconds: f64,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] {}. {}: {} ({:.2}s of {:.0}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds,
            self.budget_seconds
        )
    }
}

type Checked = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn timed(id: u8, name: &'static str, budget_seconds: f64, f: impl FnOnce() -> Checked) -> CheckOutcome {
    let start = Instant::now();
    let r = f();
    let seconds = start.elapsed().as_secs_f64();
    let (ok, detail) = match r {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let passed = ok && seconds < budget_seconds;
    let detail = if ok && !passed { format!("{detail}; over time budget") } else { detail };
    CheckOutcome {
        id,
        name,
        passed,
        detail,
        seconds,
        budget_seconds,
    }
}

pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        mesh_invariants(),
        attention_oracle(),
        gauge_pool_algebra(),
        gradient_suite(),
        icosahedral_equivariance(),
        consistency_contracts(),
    ]
}

pub fn mesh_invariants() -> CheckOutcome {
    timed(1, "mesh invariants", 10.0, || {
        let (mut area_err, mut mean_err) = (0.0f64, 0.0f64);
        for r in 0..=5 {
            let m = build_icosphere(r).map_err(e)?;
            let p = 4usize.pow(r as u32);
            let (v, ed, f) = (m.len(), m.edge_count(), m.faces.len());
            ensure!(v == 10 * p + 2 && v == vertex_count(r), "rank {r}: {v} vertices");
            ensure!(ed == 30 * p && f == 20 * p, "rank {r}: {ed} edges, {f} faces");
            ensure!(v as i64 - ed as i64 + f as i64 == 2, "rank {r}: Euler characteristic");
            ensure!(m.vertices.iter().all(|x| (x.norm() - 1.0).abs() <= 1e-12), "rank {r}: non-unit vertex");
            ensure!(m.neighbors.iter().filter(|n| n.len() == 5).count() == 12, "rank {r}: degree-5 count");
            ensure!(m.neighbors.iter().all(|n| n.len() == 5 || n.len() == 6), "rank {r}: degree");
            area_err = area_err.max((m.raw_areas.iter().sum::<f64>() - 4.0 * PI).abs());
            mean_err = mean_err.max((m.area_weights.iter().sum::<f64>() / v as f64 - 1.0).abs());
        }
        ensure!(area_err <= 1e-9, "raw area sum off by {area_err:.3e}");
        ensure!(mean_err <= 1e-12, "mean weight off by {mean_err:.3e}");
        Ok(format!("ranks 0-5, max |sum area - 4pi| = {area_err:.1e}, max |mean w - 1| = {mean_err:.1e}"))
    })
}

/// Plain per-head cosine softmax over each 1-ring, written without the
/// quadrature or bias machinery.
fn reference_attention(p: &Params, a: &AttentionParams, x: &Array2<f64>, table: &NeighborTable) -> Array2<f64> {
    let q = x.dot(&p.mat(a.w_q));
    let k = x.dot(&p.mat(a.w_k));
    let v = x.dot(&p.mat(a.w_v));
    let hd = a.head_dim();
    let mut y = Array2::zeros(x.dim());
    for i in 0..x.nrows() {
        for h in 0..a.heads {
            let tau = effective_scale(p.slice(a.log_scale)[h]);
            let cols = h * hd..(h + 1) * hd;
            let unit = |m: &Array2<f64>, r: usize| {
                let row: Vec<f64> = cols.clone().map(|c| m[[r, c]]).collect();
                let n = row.iter().map(|t| t * t).sum::<f64>().sqrt();
                row.into_iter().map(move |t| t / n)
            };
            let nbrs: Vec<usize> = table.valid_row(i).map(|(_, j)| j).collect();
            let logits: Vec<f64> = nbrs.iter().map(|&j| tau * unit(&q, i).zip(unit(&k, j)).map(|(s, t)| s * t).sum::<f64>()).collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            for (w, &j) in ex.iter().zip(&nbrs) {
                for c in cols.clone() {
                    y[[i, c]] += w / z * v[[j, c]];
                }
            }
        }
    }
    y.dot(&p.mat(a.w_o))
}

pub fn attention_oracle() -> CheckOutcome {
    timed(2, "quadrature attention oracle", 1.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mesh = build_icosphere(1).map_err(e)?;
        let table = build_neighbor_table(&mesh);
        let mut p = Params::new();
        let a = AttentionParams::new(&mut p, "a", 8, 2, 10f64.ln(), &mut rng).map_err(e)?;
        let x = Array2::from_shape_fn((mesh.len(), 8), |_| rng.random_range(-1.0..1.0));
        let (out, _) = attention_forward(&p, &a, x.view(), &table, &[], &vec![1.0; mesh.len()]).map_err(e)?;
        let reference = reference_attention(&p, &a, &x, &table);
        let diff = (&out - &reference).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        ensure!(diff <= 1e-12, "unit weights differ from plain softmax by {diff:.3e}");

        let two = NeighborTable {
            max_degree: 3,
            indices: vec![0, 1, NeighborTable::PAD, 1, 0, NeighborTable::PAD],
            valid: vec![true, true, false, true, true, false],
        };
        let mut p2 = Params::new();
        let a2 = AttentionParams::new(&mut p2, "b", 2, 1, 10f64.ln(), &mut rng).map_err(e)?;
        let same = Array2::from_shape_vec((2, 2), vec![0.4, -0.9, 0.4, -0.9]).unwrap();
        let (_, st) = attention_forward(&p2, &a2, same.view(), &two, &[], &[2.0, 1.0]).map_err(e)?;
        let werr = (st.weights[0] - 2.0 / 3.0).abs().max((st.weights[1] - 1.0 / 3.0).abs());
        ensure!(werr <= 1e-12 && st.weights[2] == 0.0, "two-neighbor weights {:?}", &st.weights[..3]);
        Ok(format!("max |quadrature - reference| = {diff:.1e}; (2,1) weights err {werr:.1e}"))
    })
}

fn bias_setup(order: usize, seed: u64) -> std::result::Result<(FourierBiasTable, GeodesicCache), String> {
    let m = build_icosphere(1).map_err(e)?;
    let t = build_neighbor_table(&m);
    let cache = build_geodesic_cache(&m, &t, 3, 16).map_err(e)?;
    let mut table = FourierBiasTable::zeros(2, order, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in table.cos_coeffs.iter_mut().chain(table.sin_coeffs.iter_mut()) {
        *v = rng.random_range(-1.0..1.0);
    }
    Ok((table, cache))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

pub fn gauge_pool_algebra() -> CheckOutcome {
    timed(3, "gauge-pool algebra", 5.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut angle_resp = 0.0f64;
        for order in 0..=5 {
            let (table, cache) = bias_setup(order, 40 + order as u64)?;
            let base = eval_bias(&table, &cache).map_err(e)?;
            let mut moved = cache.clone();
            for a in moved.alpha.iter_mut() {
                *a = rng.random_range(-PI..PI);
            }
            angle_resp = angle_resp.max(max_abs_diff(&base, &eval_bias(&table, &moved).map_err(e)?));
        }
        ensure!(angle_resp <= 1e-9, "M <= 5 output responds to angles by {angle_resp:.3e}");

        let mut shift_resp = 0.0f64;
        for order in [0, 3, 6, 9, 12] {
            let (table, cache) = bias_setup(order, 50 + order as u64)?;
            let base = eval_bias(&table, &cache).map_err(e)?;
            let mut shifted = cache.clone();
            for (s, a) in shifted.alpha.iter_mut().enumerate() {
                if cache.angle_valid[s / cache.anchors_per_node] {
                    *a += 2.0 * PI / 6.0;
                }
            }
            shift_resp = shift_resp.max(max_abs_diff(&base, &eval_bias(&table, &shifted).map_err(e)?));
        }
        ensure!(shift_resp <= 1e-9, "shifting angles by 2pi/6 changed output by {shift_resp:.3e}");

        let (mut table, cache) = bias_setup(6, 60)?;
        for h in 0..2 {
            for m in 0..=6 {
                for b in 0..16 {
                    let i = table.index(h, m, b);
                    table.sin_coeffs[i] = 0.0;
                    if m != 6 {
                        table.cos_coeffs[i] = 0.0;
                    }
                }
            }
        }
        let out = eval_bias(&table, &cache).map_err(e)?;
        let f = cache.anchors_per_node;
        let mut sixth_err = 0.0f64;
        for s in (0..cache.nodes * cache.max_degree).filter(|&s| cache.angle_valid[s]) {
            let eta = cache.bin_frac[s];
            for h in 0..2 {
                let a6 = (1.0 - eta) * table.cos_coeffs[table.index(h, 6, cache.bin_lo[s] as usize)]
                    + eta * table.cos_coeffs[table.index(h, 6, cache.bin_hi[s] as usize)];
                let mut brute = 0.0;
                for fi in 0..f {
                    for r in 0..6 {
                        brute += (6.0 * (cache.alpha[s * f + fi] - 2.0 * PI * r as f64 / 6.0)).cos();
                    }
                }
                let mean_cos: f64 = (0..f).map(|fi| (6.0 * cache.alpha[s * f + fi]).cos()).sum::<f64>() / f as f64;
                let expect = a6 * brute / (6 * f) as f64;
                sixth_err = sixth_err.max((out[s * 2 + h] - expect).abs()).max((expect - a6 * mean_cos).abs());
            }
        }
        ensure!(sixth_err <= 1e-9, "M = 6 output differs from brute force by {sixth_err:.3e}");
        Ok(format!("angle response {angle_resp:.1e}, 2pi/6 shift {shift_resp:.1e}, M=6 err {sixth_err:.1e}"))
    })
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Entries far below the largest one are compared against a floor of
/// `1e-3 · max|fd|`; there the difference quotient is rounding noise.
fn worst_rel(fd: &[f64], analytic: impl Fn(usize) -> f64, idx: &[usize], floor: f64) -> f64 {
    let floor = fd.iter().fold(floor, |m, v| m.max(1e-3 * v.abs()));
    fd.iter().zip(idx).map(|(f, &i)| relative_error(*f, analytic(i), floor)).fold(0.0, f64::max)
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        output_rank: 2,
        levels: 1,
        dim: 8,
        heads: 2,
        blocks_per_stage: 1,
        num_classes: 5,
        radial_bins: 4,
        seed: 3,
        ..ModelConfig::default()
    }
}

fn perturbed(cfg: &ModelConfig, seed: u64) -> std::result::Result<Model, String> {
    let mut m = Model::new(cfg).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in m.params.values.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    Ok(m)
}

fn attention_gradients(clamped: bool) -> std::result::Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(if clamped { 71 } else { 70 });
    let mesh = build_icosphere(1).map_err(e)?;
    let table = build_neighbor_table(&mesh);
    let l = mesh.len();
    let mut p = Params::new();
    let a = AttentionParams::new(&mut p, "a", 8, 2, 1.2, &mut rng).map_err(e)?;
    if clamped {
        p.slice_mut(a.log_scale).copy_from_slice(&[200f64.ln(), 1000f64.ln()]);
    }
    let x = Array2::from_shape_fn((l, 8), |_| rng.random_range(-1.0..1.0));
    let bias: Vec<f64> = (0..l * 7 * 2).map(|_| rng.random_range(-0.5..0.5)).collect();
    let lw: Vec<f64> = mesh.area_weights.iter().map(|w| w.ln()).collect();
    let up = Array2::from_shape_fn((l, 8), |_| rng.random_range(-1.0..1.0));
    let (_, st) = a.forward(&p, x.view(), &table, &bias, &lw);
    let mut grads = p.zeros_like();
    let g = a.backward(&p, &st, &table, up.view(), &mut grads);
    let loss = |pv: &[f64], x: &Array2<f64>, b: &[f64]| {
        let q = Params::from_parts(p.specs().to_vec(), pv.to_vec()).unwrap();
        (&a.forward(&q, x.view(), &table, b, &lw).0 * &up).sum()
    };
    let idx: Vec<usize> = (0..p.len()).collect();
    let fd = central_difference(|v| loss(v, &x, &bias), &p.values, &idx, FD_STEP);
    let mut worst = worst_rel(&fd, |i| grads[i], &idx, 1e-6);
    if clamped {
        let ls = p.range(a.log_scale);
        ensure!(grads[ls].iter().all(|&v| v == 0.0), "clamped scale has a nonzero gradient");
    }
    let xs: Vec<f64> = x.iter().copied().collect();
    let xi: Vec<usize> = (0..xs.len()).step_by(3).collect();
    let fdx = central_difference(|v| loss(&p.values, &Array2::from_shape_vec((l, 8), v.to_vec()).unwrap(), &bias), &xs, &xi, FD_STEP);
    worst = worst.max(worst_rel(&fdx, |i| g.input.as_slice().unwrap()[i], &xi, 1e-6));
    let bi: Vec<usize> = (0..bias.len()).filter(|i| table.valid[i / 2]).step_by(3).collect();
    let fdb = central_difference(|v| loss(&p.values, &x, v), &bias, &bi, FD_STEP);
    Ok(worst.max(worst_rel(&fdb, |i| g.bias[i], &bi, 1e-6)))
}

fn bias_table_gradients() -> std::result::Result<f64, String> {
    let (table, cache) = bias_setup(6, 80)?;
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let up: Vec<f64> = (0..cache.nodes * cache.max_degree * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (ga, gb) = bias_gradients(&table, &cache, &up).map_err(e)?;
    let n = table.cos_coeffs.len();
    let flat: Vec<f64> = table.cos_coeffs.iter().chain(&table.sin_coeffs).copied().collect();
    let objective = |v: &[f64]| {
        let t = FourierBiasTable {
            cos_coeffs: v[..n].to_vec(),
            sin_coeffs: v[n..].to_vec(),
            ..table.clone()
        };
        eval_bias(&t, &cache).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
    };
    let idx: Vec<usize> = (0..2 * n).step_by(3).collect();
    let fd = central_difference(objective, &flat, &idx, FD_STEP);
    Ok(worst_rel(&fd, |i| if i < n { ga[i] } else { gb[i - n] }, &idx, 1e-6))
}

fn transfer_gradients() -> std::result::Result<f64, String> {
    let fine = build_icosphere(2).map_err(e)?;
    let coarse = build_icosphere(1).map_err(e)?;
    let t = RankTransfer::new(&fine, &coarse).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut worst = 0.0f64;
    for mode in [SamplingMode::Geometric, SamplingMode::Naive] {
        for op in [t.down_operator(mode), t.up_operator(mode)] {
            let x = Array2::from_shape_fn((op.cols, 2), |_| rng.random_range(-1.0..1.0));
            let up = Array2::from_shape_fn((op.rows.len(), 2), |_| rng.random_range(-1.0..1.0));
            let analytic = op.apply_transpose(up.view());
            let xs: Vec<f64> = x.iter().copied().collect();
            let idx: Vec<usize> = (0..xs.len()).collect();
            let fd = central_difference(|v| (&op.apply(Array2::from_shape_vec(x.dim(), v.to_vec()).unwrap().view()) * &up).sum(), &xs, &idx, FD_STEP);
            worst = worst.max(worst_rel(&fd, |i| analytic.as_slice().unwrap()[i], &idx, 1e-6));
        }
    }
    Ok(worst)
}

/// Token projection, full forward and segmentation loss, against
/// parameters and raw tokens.
fn model_gradients(abs_lat_pe: bool) -> std::result::Result<(f64, f64), String> {
    let cfg = ModelConfig { abs_lat_pe, ..toy_model_config() };
    let geo = Geometry::build(&cfg).map_err(e)?;
    let m = perturbed(&cfg, 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Array2::from_shape_fn((geo.token_mesh().len(), 3), |_| rng.random_range(-1.0..1.0));

    let (emb, embed_in) = m.project_tokens(&geo, x.view()).map_err(e)?;
    let up = Array2::from_shape_fn(emb.dim(), |_| rng.random_range(-1.0..1.0));
    let mut pg = m.params.zeros_like();
    let pdx = m.project_tokens_backward(embed_in.view(), up.view(), &mut pg);
    let proj = |x: &Array2<f64>| (&m.project_tokens(&geo, x.view()).unwrap().0 * &up).sum();
    let xs: Vec<f64> = x.iter().copied().collect();
    let xi: Vec<usize> = (0..xs.len()).step_by(2).collect();
    let fd = central_difference(|v| proj(&Array2::from_shape_vec(x.dim(), v.to_vec()).unwrap()), &xs, &xi, FD_STEP);
    let proj_err = worst_rel(&fd, |i| pdx.as_slice().unwrap()[i], &xi, 1e-6);

    let labels: Vec<u32> = (0..geo.output_mesh.len()).map(|_| rng.random_range(0..5)).collect();
    let mut grads = m.params.zeros_like();
    let (z, tape) = m.forward(&geo, x.view()).map_err(e)?;
    let seg = seg_loss(z.view(), &labels).map_err(e)?;
    let dx = m.backward(&geo, &tape, seg.grad.view(), &mut grads).map_err(e)?;
    let loss = |values: &[f64], x: &Array2<f64>| {
        let q = Model::with_values(&cfg, values.to_vec()).unwrap();
        seg_loss(q.logits(&geo, x.view()).unwrap().view(), &labels).unwrap().loss
    };
    let idx: Vec<usize> = (0..m.params.len()).step_by(3).collect();
    let fd = central_difference(|v| loss(v, &x), &m.params.values, &idx, FD_STEP);
    let mut fwd_err = worst_rel(&fd, |i| grads[i], &idx, 1e-7);
    let xi: Vec<usize> = (0..xs.len()).step_by(5).collect();
    let fdx = central_difference(|v| loss(&m.params.values, &Array2::from_shape_vec(x.dim(), v.to_vec()).unwrap()), &xs, &xi, FD_STEP);
    fwd_err = fwd_err.max(worst_rel(&fdx, |i| dx.as_slice().unwrap()[i], &xi, 1e-7));
    Ok((proj_err, fwd_err))
}

fn eq_loss_gradients() -> std::result::Result<f64, String> {
    let cfg = toy_model_config();
    let geo = Geometry::build(&cfg).map_err(e)?;
    let m = perturbed(&cfg, 10)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Array2::from_shape_fn((geo.token_mesh().len(), 3), |_| rng.random_range(-1.0..1.0));
    let maps = build_rotation_maps(sample_rotation_uniform(&mut rng), geo.token_mesh(), &geo.output_mesh);
    let mut grads = m.params.zeros_like();
    m.eq_loss_grad(&geo, x.view(), &maps, &mut grads).map_err(e)?;
    let x_rot = gather_rows(x.view(), &maps.idx_proj).map_err(e)?;
    let target = m.logits(&geo, x.view()).map_err(e)?;
    let live = |values: &[f64]| {
        let q = Model::with_values(&cfg, values.to_vec()).unwrap();
        consistency_loss(target.view(), q.logits(&geo, x_rot.view()).unwrap().view(), &maps.idx_img).unwrap().0
    };
    let idx: Vec<usize> = (0..m.params.len()).step_by(3).collect();
    let fd = central_difference(live, &m.params.values, &idx, FD_STEP);
    Ok(worst_rel(&fd, |i| grads[i], &idx, 1e-8))
}

pub fn gradient_suite() -> CheckOutcome {
    timed(4, "gradient suite", 120.0, || {
        let attn = attention_gradients(false)?.max(attention_gradients(true)?);
        let bias = bias_table_gradients()?;
        let transfer = transfer_gradients()?;
        let (p0, f0) = model_gradients(false)?;
        let (p1, f1) = model_gradients(true)?;
        let eq = eq_loss_gradients()?;
        let parts = [("attention", attn), ("bias", bias), ("transfer", transfer), ("project", p0.max(p1)), ("forward+seg", f0.max(f1)), ("eq", eq)];
        let detail = parts.iter().map(|(n, v)| format!("{n} {v:.1e}")).collect::<Vec<_>>().join(", ");
        ensure!(parts.iter().all(|(_, v)| *v <= FD_TOL), "relative errors above {FD_TOL:e}: {detail}");
        Ok(format!("max relative error: {detail}"))
    })
}

fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().map(|d| d * d).sum::<f64>() / a.len() as f64
}

/// Worst logit MSE between `forward(x[idx_proj(g)])` and
/// `forward(x)[idx_img(g)]` over the icosahedral group.
pub fn worst_group_mse(output_rank: usize, abs_lat_pe: bool, random_bias: bool, ties: TiePolicy) -> crate::Result<f64> {
    let cfg = ModelConfig {
        output_rank,
        levels: 2,
        dim: 16,
        heads: 4,
        blocks_per_stage: 1,
        abs_lat_pe,
        seed: 5,
        ..ModelConfig::default()
    };
    let geo = Geometry::build_with_ties(&cfg, ties)?;
    let mut model = Model::new(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    if random_bias {
        for spec in model.params.specs().to_vec() {
            if spec.name.contains(".bias.") {
                for v in &mut model.params.values[spec.offset..spec.offset + spec.numel()] {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
    }
    let x = Array2::from_shape_fn((geo.token_mesh().len(), 3), |_| rng.random_range(-1.0..1.0));
    let z = model.logits(&geo, x.view())?;
    let mut worst: f64 = 0.0;
    for g in icosahedral_group() {
        let maps = build_rotation_maps(g, geo.token_mesh(), &geo.output_mesh);
        let z_rot = model.logits(&geo, gather_rows(x.view(), &maps.idx_proj)?.view())?;
        worst = worst.max(mse(&z_rot, &gather_rows(z.view(), &maps.idx_img)?));
    }
    Ok(worst)
}

pub fn icosahedral_equivariance() -> CheckOutcome {
    timed(5, "icosahedral equivariance", 300.0, || {
        let out = build_icosphere(4).map_err(e)?;
        let tok = build_icosphere(3).map_err(e)?;
        let group = icosahedral_group();
        ensure!(group.len() == 60, "group has {} elements", group.len());
        for g in &group {
            let fwd = build_rotation_maps(*g, &tok, &out);
            let inv = build_rotation_maps(g.inverse(), &tok, &out);
            for (a, b) in [(&fwd.idx_proj, &inv.idx_proj), (&fwd.idx_img, &inv.idx_img)] {
                ensure!(is_permutation(a), "index map is not a permutation");
                ensure!(reindex(a, b).iter().enumerate().all(|(i, &j)| i == j as usize), "map(g^-1) o map(g) is not the identity");
            }
        }
        let off = worst_group_mse(4, false, false, TiePolicy::Split).map_err(e)?;
        let on = worst_group_mse(4, true, false, TiePolicy::Split).map_err(e)?;
        let lowest = worst_group_mse(4, false, false, TiePolicy::LowestIndex).map_err(e)?;
        let biased = worst_group_mse(4, false, true, TiePolicy::Split).map_err(e)?;
        let detail = format!(
            "60 exact permutations; MSE off {off:.1e} (target 1e-6 {}), on {on:.1e}, lowest-index ties {lowest:.1e}, random angular bias {biased:.1e}",
            if off <= 1e-6 { "met" } else { "missed" }
        );
        ensure!(off <= 1e-3, "off-case MSE too large: {detail}");
        ensure!(on >= 10.0 * off, "latitude encoding does not break equivariance: {detail}");
        Ok(detail)
    })
}

pub fn consistency_contracts() -> CheckOutcome {
    timed(6, "consistency loss contracts", 30.0, || {
        let cfg = toy_model_config();
        let geo = Geometry::build(&cfg).map_err(e)?;
        let m = perturbed(&cfg, 12)?;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Array2::from_shape_fn((geo.token_mesh().len(), 3), |_| rng.random_range(-1.0..1.0));
        let id = build_rotation_maps(Rotation::identity(), geo.token_mesh(), &geo.output_mesh);
        let at_identity = m.eq_loss(&geo, x.view(), &id).map_err(e)?;
        ensure!(at_identity == 0.0, "identity eq loss is {at_identity:e}");

        let maps = build_rotation_maps(sample_rotation_uniform(&mut rng), geo.token_mesh(), &geo.output_mesh);
        let mut grads = m.params.zeros_like();
        m.eq_loss_grad(&geo, x.view(), &maps, &mut grads).map_err(e)?;
        let x_rot = gather_rows(x.view(), &maps.idx_proj).map_err(e)?;
        let z_rot = m.logits(&geo, x_rot.view()).map_err(e)?;
        let z = m.logits(&geo, x.view()).map_err(e)?;
        let target_live = |values: &[f64]| {
            let q = Model::with_values(&cfg, values.to_vec()).unwrap();
            consistency_loss(q.logits(&geo, x.view()).unwrap().view(), z_rot.view(), &maps.idx_img).unwrap().0
        };
        let rot_live = |values: &[f64]| {
            let q = Model::with_values(&cfg, values.to_vec()).unwrap();
            consistency_loss(z.view(), q.logits(&geo, x_rot.view()).unwrap().view(), &maps.idx_img).unwrap().0
        };
        let idx: Vec<usize> = (0..m.params.len()).step_by(4).collect();
        let fd_target = central_difference(target_live, &m.params.values, &idx, FD_STEP);
        let fd_rot = central_difference(rot_live, &m.params.values, &idx, FD_STEP);
        // gradient equals the rotated-branch derivative alone, while the
        // target branch carries signal of its own
        let err = worst_rel(&fd_rot, |i| grads[i], &idx, 1e-8);
        let target_mass: f64 = fd_target.iter().map(|v| v.abs()).sum();
        ensure!(err <= FD_TOL && target_mass > 1e-6, "stopgrad: rel err {err:.2e}, target-branch mass {target_mass:.2e}");

        let labels: Vec<u32> = (0..geo.output_mesh.len()).map(|_| rng.random_range(0..5)).collect();
        let mut g_total = m.params.zeros_like();
        let s = m.sample_loss_grad(&geo, x.view(), &labels, Some(&maps), &mut g_total).map_err(e)?;
        let mut g_seg = m.params.zeros_like();
        m.sample_loss_grad(&geo, x.view(), &labels, None, &mut g_seg).map_err(e)?;
        let mut g_eq = m.params.zeros_like();
        m.eq_loss_grad(&geo, x.view(), &maps, &mut g_eq).map_err(e)?;
        ensure!(cfg.lambda_eq == 0.05, "default lambda is {}", cfg.lambda_eq);
        let wiring = (s.total - (s.seg + 0.05 * s.eq)).abs();
        let tl = (total_loss(s.seg, s.eq, 0.05).map_err(e)? - s.total).abs();
        let gerr = g_total.iter().zip(&g_seg).zip(&g_eq).map(|((t, a), b)| (t - (a + 0.05 * b)).abs()).fold(0.0, f64::max);
        ensure!(wiring <= 1e-12 && tl <= 1e-12 && gerr <= 1e-10, "total loss wiring: value {wiring:.1e}, gradient {gerr:.1e}");
        Ok(format!("identity eq = 0; stopgrad rel err {err:.1e}; seg + 0.05 eq wiring err {gerr:.1e}"))
    })
}
