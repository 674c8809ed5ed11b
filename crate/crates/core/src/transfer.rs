//! Transitions between adjacent icosphere ranks.
//!
//! Every fine node is assigned to the coarse vertex with the largest cosine
//! similarity. Downsampling is the area-weighted mean over a parent's
//! children; upsampling blends the parent and its 1-ring with a normalized
//! Gaussian kernel of the geodesic distance. Subdivision midpoints are
//! exactly equidistant from two coarse vertices; by default such nodes are
//! shared by both.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::arc;
use crate::icosphere::{IcosphereMesh, Vec3};

/// Sparse row operator `out_r = Σ_k w_rk · x_{c_rk}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    pub cols: usize,
    pub rows: Vec<Vec<(u32, f64)>>,
}

impl SparseRows {
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        debug_assert_eq!(x.nrows(), self.cols);
        let mut out = Array2::<f64>::zeros((self.rows.len(), x.ncols()));
        for (r, entries) in self.rows.iter().enumerate() {
            let mut dst = out.row_mut(r);
            for &(c, w) in entries {
                dst.scaled_add(w, &x.row(c as usize));
            }
        }
        out
    }

    /// Adjoint: scatter `dy` back onto the input rows.
    pub fn apply_transpose(&self, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.cols, dy.ncols()));
        for (r, entries) in self.rows.iter().enumerate() {
            let src = dy.row(r);
            for &(c, w) in entries {
                out.row_mut(c as usize).scaled_add(w, &src);
            }
        }
        out
    }

    /// Apply to a single scalar field.
    pub fn apply_scalar(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|entries| entries.iter().map(|&(c, w)| w * x[c as usize]).sum())
            .collect()
    }
}

/// How features move between ranks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// Area-weighted pooling and geodesic-kernel upsampling.
    Geometric,
    /// Unweighted mean pooling and parent-copy upsampling.
    Naive,
}

/// How a fine node equidistant from several coarse vertices is treated by the
/// transfer operators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TiePolicy {
    /// Only the lowest-index maximizer is used.
    LowestIndex,
    /// The node is shared equally by every maximizer, which keeps the
    /// operators covariant under mesh symmetries.
    #[default]
    Split,
}

/// Dot products within this distance of the maximum count as tied.
pub const PARENT_TIE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct RankTransfer {
    pub fine_rank: usize,
    pub coarse_rank: usize,
    /// Lowest-index maximizer of `p_i · p_c`.
    pub parent: Vec<u32>,
    /// Every coarse vertex attaining the maximum, ascending.
    pub tied_parents: Vec<Vec<u32>>,
    pub children: Vec<Vec<u32>>,
    pub ties: TiePolicy,
    /// Pooling membership per coarse node: fine index and its share.
    pub members: Vec<Vec<(u32, f64)>>,
    /// Parent(s) followed by their 1-rings, without repeats.
    pub up_candidates: Vec<Vec<u32>>,
    pub up_weights: Vec<Vec<f64>>,
    /// Kernel bandwidth in radians.
    pub sigma: f64,
    down_geo: SparseRows,
    down_naive: SparseRows,
    up_geo: SparseRows,
    up_naive: SparseRows,
}

/// Index of the candidate with the largest dot product (first on exact ties).
pub fn nearest_vertex(p: &Vec3, candidates: &[Vec3]) -> u32 {
    let mut best = 0usize;
    let mut best_dot = f64::NEG_INFINITY;
    for (c, q) in candidates.iter().enumerate() {
        let d = p.dot(q);
        if d > best_dot {
            best_dot = d;
            best = c;
        }
    }
    best as u32
}

/// All candidates within [`PARENT_TIE_EPS`] of the best dot product.
pub fn maximizers(p: &Vec3, candidates: &[Vec3]) -> Vec<u32> {
    let dots: Vec<f64> = candidates.iter().map(|q| p.dot(q)).collect();
    let best = dots.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..candidates.len())
        .filter(|&c| dots[c] >= best - PARENT_TIE_EPS)
        .map(|c| c as u32)
        .collect()
}

impl RankTransfer {
    /// Build with the default bandwidth (the mean geodesic edge length of the
    /// coarse mesh) and tie splitting.
    pub fn new(fine: &IcosphereMesh, coarse: &IcosphereMesh) -> Result<Self> {
        Self::with_options(fine, coarse, coarse.mean_edge_length(), TiePolicy::default())
    }

    pub fn with_sigma(fine: &IcosphereMesh, coarse: &IcosphereMesh, sigma: f64) -> Result<Self> {
        Self::with_options(fine, coarse, sigma, TiePolicy::default())
    }

    pub fn with_options(fine: &IcosphereMesh, coarse: &IcosphereMesh, sigma: f64, ties: TiePolicy) -> Result<Self> {
        if coarse.rank + 1 != fine.rank {
            return Err(Error::Config(format!(
                "rank transfer needs adjacent ranks, got fine {} and coarse {}",
                fine.rank, coarse.rank
            )));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Precondition(format!("kernel bandwidth must be positive, got {sigma}")));
        }
        let tied_parents: Vec<Vec<u32>> = fine
            .vertices
            .par_iter()
            .map(|p| maximizers(p, &coarse.vertices))
            .collect();
        let parent: Vec<u32> = tied_parents.iter().map(|t| t[0]).collect();
        let mut children = vec![Vec::new(); coarse.len()];
        for (i, &c) in parent.iter().enumerate() {
            children[c as usize].push(i as u32);
        }
        if let Some(c) = children.iter().position(Vec::is_empty) {
            return Err(Error::Construction(format!("coarse node {c} has no children")));
        }
        let used = |i: usize| -> &[u32] {
            match ties {
                TiePolicy::LowestIndex => &tied_parents[i][..1],
                TiePolicy::Split => &tied_parents[i],
            }
        };
        let mut members = vec![Vec::new(); coarse.len()];
        for i in 0..fine.len() {
            let ps = used(i);
            for &c in ps {
                members[c as usize].push((i as u32, 1.0 / ps.len() as f64));
            }
        }
        let mut up_candidates = Vec::with_capacity(fine.len());
        let mut up_weights = Vec::with_capacity(fine.len());
        for i in 0..fine.len() {
            let mut cands: Vec<u32> = used(i).to_vec();
            for &c in used(i) {
                for &k in &coarse.neighbors[c as usize] {
                    if !cands.contains(&k) {
                        cands.push(k);
                    }
                }
            }
            let d2: Vec<f64> = cands
                .iter()
                .map(|&k| arc(&fine.vertices[i], &coarse.vertices[k as usize]).powi(2))
                .collect();
            up_weights.push(gaussian_weights(&d2, sigma));
            up_candidates.push(cands);
        }

        let down_geo = pooling_rows(&members, &fine.area_weights, fine.len());
        let down_naive = pooling_rows(&members, &vec![1.0; fine.len()], fine.len());
        let up_geo = SparseRows {
            cols: coarse.len(),
            rows: up_candidates
                .iter()
                .zip(&up_weights)
                .map(|(c, w)| c.iter().copied().zip(w.iter().copied()).collect())
                .collect(),
        };
        let up_naive = SparseRows {
            cols: coarse.len(),
            rows: (0..fine.len())
                .map(|i| {
                    let ps = used(i);
                    ps.iter().map(|&c| (c, 1.0 / ps.len() as f64)).collect()
                })
                .collect(),
        };
        Ok(Self {
            fine_rank: fine.rank,
            coarse_rank: coarse.rank,
            parent,
            tied_parents,
            children,
            ties,
            members,
            up_candidates,
            up_weights,
            sigma,
            down_geo,
            down_naive,
            up_geo,
            up_naive,
        })
    }

    pub fn fine_len(&self) -> usize {
        self.parent.len()
    }

    pub fn coarse_len(&self) -> usize {
        self.children.len()
    }

    pub fn down_operator(&self, mode: SamplingMode) -> &SparseRows {
        match mode {
            SamplingMode::Geometric => &self.down_geo,
            SamplingMode::Naive => &self.down_naive,
        }
    }

    pub fn up_operator(&self, mode: SamplingMode) -> &SparseRows {
        match mode {
            SamplingMode::Geometric => &self.up_geo,
            SamplingMode::Naive => &self.up_naive,
        }
    }
}

/// Normalized `exp(−d²/(2σ²))`, shifted by the smallest distance so the
/// nearest candidate never underflows.
fn gaussian_weights(d2: &[f64], sigma: f64) -> Vec<f64> {
    let min = d2.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = d2.iter().map(|d| (-(d - min) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn pooling_rows(members: &[Vec<(u32, f64)>], omega: &[f64], cols: usize) -> SparseRows {
    SparseRows {
        cols,
        rows: members
            .iter()
            .map(|ch| {
                let total: f64 = ch.iter().map(|&(i, s)| s * omega[i as usize]).sum();
                ch.iter().map(|&(i, s)| (i, s * omega[i as usize] / total)).collect()
            })
            .collect(),
    }
}

/// Area-weighted mean over each coarse node's members, with caller-supplied
/// fine-rank weights.
pub fn downsample(x: ArrayView2<'_, f64>, t: &RankTransfer, omega_fine: &[f64]) -> Result<Array2<f64>> {
    if x.nrows() != t.fine_len() || omega_fine.len() != t.fine_len() {
        return Err(Error::Config(format!(
            "downsample expects {} fine rows, got {} features and {} weights",
            t.fine_len(),
            x.nrows(),
            omega_fine.len()
        )));
    }
    Ok(pooling_rows(&t.members, omega_fine, t.fine_len()).apply(x))
}

/// Geodesic-kernel interpolation from the coarse to the fine rank.
pub fn upsample(x: ArrayView2<'_, f64>, t: &RankTransfer) -> Result<Array2<f64>> {
    if x.nrows() != t.coarse_len() {
        return Err(Error::Config(format!(
            "upsample expects {} coarse rows, got {}",
            t.coarse_len(),
            x.nrows()
        )));
    }
    Ok(t.up_geo.apply(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::icosphere::build_icosphere;
    use crate::nn::{central_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(fine: usize) -> (IcosphereMesh, IcosphereMesh) {
        (build_icosphere(fine).unwrap(), build_icosphere(fine - 1).unwrap())
    }

    #[test]
    fn parent_is_brute_force_argmax() {
        let (f, c) = pair(3);
        let t = RankTransfer::new(&f, &c).unwrap();
        for (i, p) in f.vertices.iter().enumerate() {
            let best = c.vertices.iter().map(|q| p.dot(q)).fold(f64::NEG_INFINITY, f64::max);
            let pi = t.parent[i] as usize;
            assert!(p.dot(&c.vertices[pi]) >= best - PARENT_TIE_EPS);
            // lowest index among the maxima
            assert!(c.vertices[..pi].iter().all(|q| p.dot(q) < best - PARENT_TIE_EPS));
            assert_eq!(t.tied_parents[i][0] as usize, pi);
        }
        // prefix vertices are their own parents
        for i in 0..c.len() {
            assert_eq!(t.parent[i] as usize, i);
        }
        let mut seen = vec![false; f.len()];
        for ch in &t.children {
            assert!(!ch.is_empty());
            for &i in ch {
                assert!(!seen[i as usize]);
                seen[i as usize] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn rank_mismatch_is_config_error() {
        let a = build_icosphere(3).unwrap();
        let b = build_icosphere(1).unwrap();
        assert!(matches!(RankTransfer::new(&a, &b), Err(Error::Config(_))));
    }

    #[test]
    fn weights_are_normalized() {
        let (f, c) = pair(2);
        let t = RankTransfer::new(&f, &c).unwrap();
        for w in &t.up_weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
        let wide = RankTransfer::with_sigma(&f, &c, 1e3).unwrap();
        for w in &wide.up_weights {
            let u = 1.0 / w.len() as f64;
            assert!(w.iter().all(|&v| (v - u).abs() < 1e-6));
        }
    }

    #[test]
    fn pooling_examples() {
        let (f, c) = pair(2);
        let t = RankTransfer::new(&f, &c).unwrap();
        let x = Array2::from_elem((f.len(), 3), 2.5);
        let d = downsample(x.view(), &t, &f.area_weights).unwrap();
        assert!(d.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        let u = upsample(d.view(), &t).unwrap();
        assert!(u.iter().all(|&v| (v - 2.5).abs() < 1e-12));

        // two children with weights (1, 3) and values (0, 4) pool to 3
        let mut tt = t.clone();
        tt.parent = vec![0, 0];
        tt.members = vec![vec![(0, 1.0), (1, 1.0)]];
        let x = Array2::from_shape_vec((2, 1), vec![0.0, 4.0]).unwrap();
        let d = downsample(x.view(), &tt, &[1.0, 3.0]).unwrap();
        assert!((d[[0, 0]] - 3.0).abs() < 1e-15);
        // single child copies
        tt.members = vec![vec![(1, 1.0)]];
        let d = downsample(x.view(), &tt, &[1.0, 3.0]).unwrap();
        assert_eq!(d[[0, 0]], 4.0);
    }

    #[test]
    fn narrow_kernel_reproduces_coincident_vertex() {
        let (f, c) = pair(2);
        let t = RankTransfer::with_sigma(&f, &c, 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((c.len(), 2), |_| rng.random_range(-1.0..1.0));
        let u = upsample(x.view(), &t).unwrap();
        for i in 0..c.len() {
            for k in 0..2 {
                assert!((u[[i, k]] - x[[i, k]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn upsampling_matches_from_scratch_kernel() {
        let (f, c) = pair(4);
        let sigma = c.mean_edge_length();
        let t = RankTransfer::with_sigma(&f, &c, sigma).unwrap();
        let coarse_z: Vec<f64> = c.vertices.iter().map(|p| p.z).collect();
        let local = t.up_operator(SamplingMode::Geometric).apply_scalar(&coarse_z);
        let mut local_err: f64 = 0.0;
        let mut global_err: f64 = 0.0;
        for (i, p) in f.vertices.iter().enumerate() {
            // parents by exhaustive acos ranking, candidates = parents ∪ rings
            let ang: Vec<f64> = c.vertices.iter().map(|q| p.dot(q).clamp(-1.0, 1.0).acos()).collect();
            let best = ang.iter().copied().fold(f64::INFINITY, f64::min);
            let mut cands: Vec<u32> = (0..c.len()).filter(|&k| ang[k] <= best + 1e-7).map(|k| k as u32).collect();
            for k in cands.clone() {
                for &n in &c.neighbors[k as usize] {
                    if !cands.contains(&n) {
                        cands.push(n);
                    }
                }
            }
            let raw: Vec<f64> = cands.iter().map(|&k| (-ang[k as usize].powi(2) / (2.0 * sigma * sigma)).exp()).collect();
            let total: f64 = raw.iter().sum();
            let oracle: f64 = raw.iter().zip(&cands).map(|(w, &k)| w / total * coarse_z[k as usize]).sum();
            assert!((oracle - local[i]).abs() < 1e-9);
            local_err = local_err.max((local[i] - p.z).abs());
            let d2: Vec<f64> = c.vertices.iter().map(|q| arc(p, q).powi(2)).collect();
            let w = gaussian_weights(&d2, sigma);
            let g: f64 = w.iter().zip(&coarse_z).map(|(a, b)| a * b).sum();
            global_err = global_err.max((g - p.z).abs());
        }
        assert!(local_err <= global_err + 1e-9, "{local_err} vs {global_err}");
    }

    #[test]
    fn lowest_index_policy_uses_single_parent() {
        let (f, c) = pair(3);
        let t = RankTransfer::with_options(&f, &c, c.mean_edge_length(), TiePolicy::LowestIndex).unwrap();
        let ties = t.tied_parents.iter().filter(|p| p.len() > 1).count();
        assert!(ties > 0);
        for (i, cands) in t.up_candidates.iter().enumerate() {
            assert_eq!(cands[0], t.parent[i]);
            assert_eq!(cands.len(), 1 + c.neighbors[t.parent[i] as usize].len());
        }
        let shares: usize = t.members.iter().map(Vec::len).sum();
        assert_eq!(shares, f.len());
        assert!(t.members.iter().flatten().all(|&(_, s)| s == 1.0));
    }

    #[test]
    fn split_operators_commute_with_mesh_symmetries() {
        use crate::so3::{icosahedral_group, nn_index_map, reindex};
        let (f, c) = pair(3);
        let t = RankTransfer::new(&f, &c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xf: Vec<f64> = (0..f.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xc: Vec<f64> = (0..c.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        for g in icosahedral_group() {
            let (mf, mc) = (nn_index_map(&g, &f), nn_index_map(&g, &c));
            for mode in [SamplingMode::Geometric, SamplingMode::Naive] {
                let down_a = t.down_operator(mode).apply_scalar(&reindex(&xf, &mf));
                let down_b = reindex(&t.down_operator(mode).apply_scalar(&xf), &mc);
                let up_a = t.up_operator(mode).apply_scalar(&reindex(&xc, &mc));
                let up_b = reindex(&t.up_operator(mode).apply_scalar(&xc), &mf);
                for (a, b) in down_a.iter().zip(&down_b).chain(up_a.iter().zip(&up_b)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn operators_are_linear_and_adjoint() {
        let (f, c) = pair(2);
        let t = RankTransfer::new(&f, &c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mode in [SamplingMode::Geometric, SamplingMode::Naive] {
            for op in [t.down_operator(mode), t.up_operator(mode)] {
                let x = Array2::from_shape_fn((op.cols, 2), |_| rng.random_range(-1.0..1.0));
                let y = Array2::from_shape_fn((op.cols, 2), |_| rng.random_range(-1.0..1.0));
                let lhs = op.apply((&x * 2.0 - &y * 0.5).view());
                let rhs = op.apply(x.view()) * 2.0 - op.apply(y.view()) * 0.5;
                assert!((&lhs - &rhs).iter().all(|v| v.abs() < 1e-9));
                // gradient of <up, op(x)> equals op^T up; check by differences
                let up = Array2::from_shape_fn((op.rows.len(), 2), |_| rng.random_range(-1.0..1.0));
                let analytic = op.apply_transpose(up.view());
                let xs: Vec<f64> = x.iter().copied().collect();
                let idx: Vec<usize> = (0..xs.len()).step_by(5).collect();
                let fd = central_difference(
                    |v| (&op.apply(Array2::from_shape_vec(x.dim(), v.to_vec()).unwrap().view()) * &up).sum(),
                    &xs,
                    &idx,
                    1e-5,
                );
                for (g, &k) in fd.iter().zip(&idx) {
                    assert!(relative_error(*g, analytic.as_slice().unwrap()[k], 1e-8) <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn constants_survive_round_trips() {
        let (f, c) = pair(3);
        let t = RankTransfer::new(&f, &c).unwrap();
        for mode in [SamplingMode::Geometric, SamplingMode::Naive] {
            let fine = Array2::from_elem((f.len(), 1), -1.25);
            let coarse = Array2::from_elem((c.len(), 1), -1.25);
            let a = t.down_operator(mode).apply(t.up_operator(mode).apply(coarse.view()).view());
            let b = t.up_operator(mode).apply(t.down_operator(mode).apply(fine.view()).view());
            assert!(a.iter().chain(b.iter()).all(|&v| (v + 1.25).abs() < 1e-12));
        }
    }
}
