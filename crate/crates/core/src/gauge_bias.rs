//! Gauge-pooled Fourier relative positional bias.
//!
//! For head `h`, neighbor slot `(i, j)` and anchors `f = 1..F`:
//!
//! ```text
//! b_ij = 1/(6F) Σ_f Σ_{r=0..5} Σ_{m=0..M} A_m(δ_ij) cos(m(α_ijf − 2πr/6))
//!                                        + B_m(δ_ij) sin(m(α_ijf − 2πr/6))
//! ```
//!
//! with `A_m`, `B_m` linearly interpolated between radial bins. The pooled
//! trigonometric sums do not depend on the coefficients, so they are
//! tabulated once per geodesic cache in a [`PooledBasis`].

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::GeodesicCache;

/// Number of in-plane rotations averaged over.
pub const GAUGE_ROTATIONS: usize = 6;

/// Learnable cosine/sine coefficient tables, each `H × (M+1) × B`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierBiasTable {
    pub heads: usize,
    pub order: usize,
    pub bins: usize,
    pub cos_coeffs: Vec<f64>,
    pub sin_coeffs: Vec<f64>,
}

impl FourierBiasTable {
    pub fn zeros(heads: usize, order: usize, bins: usize) -> Self {
        let n = heads * (order + 1) * bins;
        Self {
            heads,
            order,
            bins,
            cos_coeffs: vec![0.0; n],
            sin_coeffs: vec![0.0; n],
        }
    }

    pub fn view(&self) -> BiasCoeffs<'_> {
        BiasCoeffs {
            heads: self.heads,
            order: self.order,
            bins: self.bins,
            cos_coeffs: &self.cos_coeffs,
            sin_coeffs: &self.sin_coeffs,
        }
    }

    #[inline]
    pub fn index(&self, h: usize, m: usize, bin: usize) -> usize {
        (h * (self.order + 1) + m) * self.bins + bin
    }
}

/// Borrowed coefficients, so the same code serves owned tables and slices
/// of a flat parameter vector.
#[derive(Clone, Copy, Debug)]
pub struct BiasCoeffs<'a> {
    pub heads: usize,
    pub order: usize,
    pub bins: usize,
    pub cos_coeffs: &'a [f64],
    pub sin_coeffs: &'a [f64],
}

impl BiasCoeffs<'_> {
    pub fn len(&self) -> usize {
        self.heads * (self.order + 1) * self.bins
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-slot pooled sums `1/(6F) Σ_f Σ_r cos(m(α − 2πr/6))` and the sine
/// counterpart, laid out `L × K × (M+1)`.
///
/// Slots without an angle (self, degenerate tangent) keep only the `m = 0`
/// cosine term; padded slots are all zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledBasis {
    pub order: usize,
    pub slots: usize,
    pub cos_sum: Vec<f64>,
    pub sin_sum: Vec<f64>,
}

impl PooledBasis {
    pub fn new(cache: &GeodesicCache, order: usize) -> Self {
        let slots = cache.nodes * cache.max_degree;
        let f = cache.anchors_per_node;
        let width = order + 1;
        let mut cos_sum = vec![0.0; slots * width];
        let mut sin_sum = vec![0.0; slots * width];
        let norm = 1.0 / (GAUGE_ROTATIONS * f) as f64;
        for s in 0..slots {
            if !cache.slot_valid[s] {
                continue;
            }
            if !cache.angle_valid[s] {
                cos_sum[s * width] = 1.0;
                continue;
            }
            for fi in 0..f {
                let alpha = cache.alpha[s * f + fi];
                for r in 0..GAUGE_ROTATIONS {
                    let shifted = alpha - 2.0 * PI * r as f64 / GAUGE_ROTATIONS as f64;
                    for m in 0..width {
                        let x = m as f64 * shifted;
                        cos_sum[s * width + m] += x.cos() * norm;
                        sin_sum[s * width + m] += x.sin() * norm;
                    }
                }
            }
        }
        Self {
            order,
            slots,
            cos_sum,
            sin_sum,
        }
    }
}

fn check_shapes(coeffs: &BiasCoeffs<'_>, cache: &GeodesicCache, basis: &PooledBasis) -> Result<()> {
    if coeffs.bins != cache.bins {
        return Err(Error::Config(format!(
            "bias table has {} radial bins, geodesic cache has {}",
            coeffs.bins, cache.bins
        )));
    }
    if coeffs.order != basis.order || basis.slots != cache.nodes * cache.max_degree {
        return Err(Error::Config("pooled basis does not match table/cache".into()));
    }
    if coeffs.cos_coeffs.len() != coeffs.len() || coeffs.sin_coeffs.len() != coeffs.len() {
        return Err(Error::Config("coefficient slices have the wrong length".into()));
    }
    Ok(())
}

/// Evaluate the `L × K × H` bias tensor. Padded slots are zero.
pub fn eval_bias(table: &FourierBiasTable, cache: &GeodesicCache) -> Result<Vec<f64>> {
    let basis = PooledBasis::new(cache, table.order);
    eval_bias_with_basis(table.view(), cache, &basis)
}

pub fn eval_bias_with_basis(
    coeffs: BiasCoeffs<'_>,
    cache: &GeodesicCache,
    basis: &PooledBasis,
) -> Result<Vec<f64>> {
    check_shapes(&coeffs, cache, basis)?;
    let h_count = coeffs.heads;
    let width = coeffs.order + 1;
    let bins = coeffs.bins;
    let mut out = vec![0.0; basis.slots * h_count];
    for s in 0..basis.slots {
        if !cache.slot_valid[s] {
            continue;
        }
        let (b0, b1, eta) = (cache.bin_lo[s] as usize, cache.bin_hi[s] as usize, cache.bin_frac[s]);
        let cs = &basis.cos_sum[s * width..(s + 1) * width];
        let sn = &basis.sin_sum[s * width..(s + 1) * width];
        for h in 0..h_count {
            let mut acc = 0.0;
            for m in 0..width {
                let base = (h * width + m) * bins;
                let a = (1.0 - eta) * coeffs.cos_coeffs[base + b0] + eta * coeffs.cos_coeffs[base + b1];
                let b = (1.0 - eta) * coeffs.sin_coeffs[base + b0] + eta * coeffs.sin_coeffs[base + b1];
                acc += a * cs[m] + b * sn[m];
            }
            out[s * h_count + h] = acc;
        }
    }
    Ok(out)
}

/// Gradients of `Σ upstream · eval_bias` with respect to the cosine and
/// sine tables.
pub fn bias_gradients(
    table: &FourierBiasTable,
    cache: &GeodesicCache,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let basis = PooledBasis::new(cache, table.order);
    let mut ga = vec![0.0; table.cos_coeffs.len()];
    let mut gb = vec![0.0; table.sin_coeffs.len()];
    accumulate_bias_gradients(table.view(), cache, &basis, upstream, &mut ga, &mut gb)?;
    Ok((ga, gb))
}

/// Add the coefficient gradients for `upstream` (`L × K × H`) into
/// `grad_cos` / `grad_sin`.
pub fn accumulate_bias_gradients(
    coeffs: BiasCoeffs<'_>,
    cache: &GeodesicCache,
    basis: &PooledBasis,
    upstream: &[f64],
    grad_cos: &mut [f64],
    grad_sin: &mut [f64],
) -> Result<()> {
    check_shapes(&coeffs, cache, basis)?;
    let h_count = coeffs.heads;
    if upstream.len() != basis.slots * h_count {
        return Err(Error::Config(format!(
            "upstream bias gradient has {} entries, expected {}",
            upstream.len(),
            basis.slots * h_count
        )));
    }
    let width = coeffs.order + 1;
    let bins = coeffs.bins;
    for s in 0..basis.slots {
        if !cache.slot_valid[s] {
            continue;
        }
        let (b0, b1, eta) = (cache.bin_lo[s] as usize, cache.bin_hi[s] as usize, cache.bin_frac[s]);
        for h in 0..h_count {
            let g = upstream[s * h_count + h];
            if g == 0.0 {
                continue;
            }
            for m in 0..width {
                let base = (h * width + m) * bins;
                let gc = g * basis.cos_sum[s * width + m];
                let gs = g * basis.sin_sum[s * width + m];
                grad_cos[base + b0] += (1.0 - eta) * gc;
                grad_cos[base + b1] += eta * gc;
                grad_sin[base + b0] += (1.0 - eta) * gs;
                grad_sin[base + b1] += eta * gs;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_geodesic_cache;
    use crate::icosphere::{build_icosphere, build_neighbor_table};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(order: usize, seed: u64) -> (FourierBiasTable, GeodesicCache) {
        let m = build_icosphere(1).unwrap();
        let t = build_neighbor_table(&m);
        let cache = build_geodesic_cache(&m, &t, 3, 16).unwrap();
        let mut table = FourierBiasTable::zeros(2, order, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in table.cos_coeffs.iter_mut().chain(table.sin_coeffs.iter_mut()) {
            *v = rng.random_range(-1.0..1.0);
        }
        (table, cache)
    }

    fn lerp(table: &FourierBiasTable, v: &[f64], h: usize, m: usize, c: &GeodesicCache, s: usize) -> f64 {
        let e = c.bin_frac[s];
        (1.0 - e) * v[table.index(h, m, c.bin_lo[s] as usize)] + e * v[table.index(h, m, c.bin_hi[s] as usize)]
    }

    /// Direct evaluation of the six-rotation pooled Fourier sum.
    fn brute_force(table: &FourierBiasTable, c: &GeodesicCache, s: usize, h: usize) -> f64 {
        if !c.angle_valid[s] {
            return lerp(table, &table.cos_coeffs, h, 0, c, s);
        }
        let f = c.anchors_per_node;
        let mut acc = 0.0;
        for fi in 0..f {
            let alpha = c.alpha[s * f + fi];
            for r in 0..6 {
                for m in 0..=table.order {
                    let x = m as f64 * (alpha - 2.0 * PI * r as f64 / 6.0);
                    acc += lerp(table, &table.cos_coeffs, h, m, c, s) * x.cos()
                        + lerp(table, &table.sin_coeffs, h, m, c, s) * x.sin();
                }
            }
        }
        acc / (6 * f) as f64
    }

    #[test]
    fn matches_brute_force_sum() {
        for order in [0, 3, 6, 8] {
            let (table, cache) = setup(order, 7 + order as u64);
            let out = eval_bias(&table, &cache).unwrap();
            for s in 0..cache.nodes * 7 {
                for h in 0..2 {
                    let expect = if cache.slot_valid[s] { brute_force(&table, &cache, s, h) } else { 0.0 };
                    assert!((out[s * 2 + h] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn order_zero_is_angle_free() {
        let (table, cache) = setup(0, 1);
        let out = eval_bias(&table, &cache).unwrap();
        for s in (0..cache.nodes * 7).filter(|&s| cache.slot_valid[s]) {
            for h in 0..2 {
                let a0 = lerp(&table, &table.cos_coeffs, h, 0, &cache, s);
                assert!((out[s * 2 + h] - a0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn low_orders_cancel_under_pooling() {
        let (table, cache) = setup(5, 2);
        let out = eval_bias(&table, &cache).unwrap();
        for s in (0..cache.nodes * 7).filter(|&s| cache.slot_valid[s]) {
            let a0 = lerp(&table, &table.cos_coeffs, 0, 0, &cache, s);
            assert!((out[s * 2] - a0).abs() < 1e-9);
        }
    }

    #[test]
    fn sixth_mode_survives() {
        let (mut table, cache) = setup(6, 3);
        for h in 0..2 {
            for m in 0..=6 {
                for b in 0..16 {
                    let idx = table.index(h, m, b);
                    table.sin_coeffs[idx] = 0.0;
                    if m != 6 {
                        table.cos_coeffs[idx] = 0.0;
                    }
                }
            }
        }
        let out = eval_bias(&table, &cache).unwrap();
        let f = cache.anchors_per_node;
        for s in (0..cache.nodes * 7).filter(|&s| cache.angle_valid[s]) {
            let a6 = lerp(&table, &table.cos_coeffs, 1, 6, &cache, s);
            let mean_cos: f64 = (0..f).map(|fi| (6.0 * cache.alpha[s * f + fi]).cos()).sum::<f64>() / f as f64;
            assert!((out[s * 2 + 1] - a6 * mean_cos).abs() < 1e-9);
        }
    }

    #[test]
    fn bin_mismatch_is_config_error() {
        let (_, cache) = setup(2, 4);
        let table = FourierBiasTable::zeros(2, 2, 8);
        assert!(matches!(eval_bias(&table, &cache), Err(Error::Config(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let (table, cache) = setup(6, 5);
        let (ga, gb) = bias_gradients(&table, &cache, &vec![0.0; cache.nodes * 7 * 2]).unwrap();
        assert!(ga.iter().chain(&gb).all(|&g| g == 0.0));
    }

    #[test]
    fn single_slot_gradient_splits_by_interpolation() {
        let (table0, cache) = setup(0, 6);
        let table = FourierBiasTable { cos_coeffs: table0.cos_coeffs.clone(), ..table0 };
        let s = (0..cache.nodes * 7).find(|&s| cache.angle_valid[s] && cache.bin_frac[s] > 0.1).unwrap();
        let mut up = vec![0.0; cache.nodes * 7 * 2];
        up[s * 2 + 1] = 1.0;
        let (ga, gb) = bias_gradients(&table, &cache, &up).unwrap();
        let eta = cache.bin_frac[s];
        let (b0, b1) = (cache.bin_lo[s] as usize, cache.bin_hi[s] as usize);
        assert!((ga[table.index(1, 0, b0)] - (1.0 - eta)).abs() < 1e-15);
        assert!((ga[table.index(1, 0, b1)] - eta).abs() < 1e-15);
        assert_eq!(ga.iter().filter(|&&g| g != 0.0).count(), 2);
        assert!(gb.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradients_match_central_differences() {
        let (table, cache) = setup(6, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let up: Vec<f64> = (0..cache.nodes * 7 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (ga, gb) = bias_gradients(&table, &cache, &up).unwrap();
        let objective = |t: &FourierBiasTable| -> f64 {
            eval_bias(t, &cache).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for idx in (0..ga.len()).step_by(7) {
            for which in 0..2 {
                let mut tp = table.clone();
                let mut tm = table.clone();
                let (vp, vm) = if which == 0 {
                    (&mut tp.cos_coeffs, &mut tm.cos_coeffs)
                } else {
                    (&mut tp.sin_coeffs, &mut tm.sin_coeffs)
                };
                vp[idx] += h;
                vm[idx] -= h;
                let fd = (objective(&tp) - objective(&tm)) / (2.0 * h);
                let an = if which == 0 { ga[idx] } else { gb[idx] };
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel <= 1e-4, "idx {idx}: fd {fd} vs {an}");
            }
        }
    }
}
