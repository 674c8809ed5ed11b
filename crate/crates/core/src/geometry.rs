//! Geodesic distances, tangent-plane angles and radial binning on the sphere.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::icosphere::{IcosphereMesh, NeighborTable, Vec3};

/// Clamp applied to tangent projection norms.
pub const TANGENT_EPS: f64 = 1e-12;

const UNIT_TOL: f64 = 1e-9;

fn check_unit(p: &Vec3, what: &str) -> Result<()> {
    if (p.norm() - 1.0).abs() > UNIT_TOL || !p.iter().all(|c| c.is_finite()) {
        return Err(Error::Precondition(format!("{what} is not a unit vector: {p:?}")));
    }
    Ok(())
}

/// Great-circle distance in radians.
///
/// Evaluated as `atan2(|p × q|, p · q)`, which equals `acos(clamp(p · q))`
/// for unit inputs but stays accurate near 0 and π.
pub fn geodesic_distance(p: &Vec3, q: &Vec3) -> Result<f64> {
    check_unit(p, "p")?;
    check_unit(q, "q")?;
    Ok(arc(p, q))
}

#[inline]
pub(crate) fn arc(p: &Vec3, q: &Vec3) -> f64 {
    p.cross(q).norm().atan2(p.dot(q))
}

/// Projection of a direction onto the tangent plane at a base point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tangent {
    pub direction: Vec3,
    pub magnitude: f64,
}

impl Tangent {
    /// True when the projection vanished and `direction` carries no angle.
    pub fn is_degenerate(&self) -> bool {
        self.magnitude <= TANGENT_EPS
    }
}

/// Component of `p_j` orthogonal to `p_i`, normalized with an ε-clamped norm.
pub fn tangent_project(p_i: &Vec3, p_j: &Vec3) -> Tangent {
    let raw = p_j - p_i * p_j.dot(p_i);
    let magnitude = raw.norm();
    Tangent {
        direction: raw / magnitude.max(TANGENT_EPS),
        magnitude,
    }
}

/// Signed angle of `t_{i←j}` measured from the anchor direction `t_{i←a}`,
/// with `p_i × t_{i←a}` as the positive quarter turn. `None` when either
/// tangent is degenerate.
pub fn relative_angle(p_i: &Vec3, p_j: &Vec3, p_a: &Vec3) -> Option<f64> {
    let tj = tangent_project(p_i, p_j);
    let ta = tangent_project(p_i, p_a);
    if tj.is_degenerate() || ta.is_degenerate() {
        return None;
    }
    Some(angle_in_frame(p_i, &tj.direction, &ta.direction))
}

#[inline]
fn angle_in_frame(p_i: &Vec3, tj: &Vec3, ta: &Vec3) -> f64 {
    let perp = p_i.cross(ta);
    let a = tj.dot(&perp).atan2(tj.dot(ta));
    // atan2 may return -π for a negative-zero sine; fold into (-π, π].
    if a <= -PI {
        a + 2.0 * PI
    } else {
        a
    }
}

/// Continuous radial bin coordinates for a normalized distance in `[0, 1]`.
pub fn radial_bins(delta_hat: f64, bins: usize) -> Result<(usize, usize, f64)> {
    if bins < 2 {
        return Err(Error::Precondition(format!("need at least 2 radial bins, got {bins}")));
    }
    if !(0.0..=1.0).contains(&delta_hat) {
        return Err(Error::Precondition(format!(
            "normalized distance {delta_hat} outside [0, 1]"
        )));
    }
    let t = delta_hat * (bins - 1) as f64;
    let b0 = (t.floor() as usize).min(bins - 1);
    let b1 = (b0 + 1).min(bins - 1);
    Ok((b0, b1, t - b0 as f64))
}

/// Select `f` anchors per node from its ring by descending tangent magnitude.
///
/// Magnitudes within `1e-12` of each other count as tied and resolve to the
/// lower vertex index. With fewer than `f` candidates the last pick repeats.
pub fn select_anchors(mesh: &IcosphereMesh, table: &NeighborTable, f: usize) -> Result<Vec<u32>> {
    if f == 0 {
        return Err(Error::Precondition("anchor count must be positive".into()));
    }
    let mut anchors = Vec::with_capacity(mesh.len() * f);
    for i in 0..mesh.len() {
        let p_i = &mesh.vertices[i];
        let mut cands: Vec<(u32, f64)> = table
            .valid_row(i)
            .filter(|&(_, j)| j != i)
            .map(|(_, j)| {
                let d = mesh.vertices[j].dot(p_i).clamp(-1.0, 1.0);
                (j as u32, (1.0 - d * d).max(0.0).sqrt())
            })
            .collect();
        if cands.is_empty() {
            return Err(Error::Construction(format!("node {i} has an empty ring")));
        }
        let mut last = 0;
        for slot in 0..f {
            if !cands.is_empty() {
                let best = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
                let (pos, _) = cands
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.1 >= best - 1e-12)
                    .min_by_key(|(_, c)| c.0)
                    .expect("non-empty candidate set");
                last = cands.remove(pos).0;
            }
            debug_assert!(slot < f);
            anchors.push(last);
        }
    }
    Ok(anchors)
}

/// Per-(node, slot) geometry feeding the positional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GeodesicCache {
    pub nodes: usize,
    pub max_degree: usize,
    pub anchors_per_node: usize,
    pub bins: usize,
    /// L×K geodesic distances (0 on padded slots).
    pub delta: Vec<f64>,
    pub delta_hat: Vec<f64>,
    pub bin_lo: Vec<u32>,
    pub bin_hi: Vec<u32>,
    pub bin_frac: Vec<f64>,
    /// L×F anchor vertex indices.
    pub anchor_indices: Vec<u32>,
    /// L×K×F relative angles; 0 where `angle_valid` is false.
    pub alpha: Vec<f64>,
    /// L×K: slot is a real neighbor `j ≠ i` with a non-degenerate tangent.
    pub angle_valid: Vec<bool>,
    /// L×K copy of the neighbor table mask.
    pub slot_valid: Vec<bool>,
}

impl GeodesicCache {
    pub fn alpha_at(&self, i: usize, k: usize, f: usize) -> f64 {
        self.alpha[(i * self.max_degree + k) * self.anchors_per_node + f]
    }
}

pub fn build_geodesic_cache(
    mesh: &IcosphereMesh,
    table: &NeighborTable,
    anchors_per_node: usize,
    bins: usize,
) -> Result<GeodesicCache> {
    let l = mesh.len();
    let k = table.max_degree;
    let f = anchors_per_node;
    if table.rows() != l {
        return Err(Error::Config(format!(
            "neighbor table has {} rows, mesh has {l} vertices",
            table.rows()
        )));
    }
    let anchor_indices = select_anchors(mesh, table, f)?;
    let mut cache = GeodesicCache {
        nodes: l,
        max_degree: k,
        anchors_per_node: f,
        bins,
        delta: vec![0.0; l * k],
        delta_hat: vec![0.0; l * k],
        bin_lo: vec![0; l * k],
        bin_hi: vec![0; l * k],
        bin_frac: vec![0.0; l * k],
        anchor_indices,
        alpha: vec![0.0; l * k * f],
        angle_valid: vec![false; l * k],
        slot_valid: table.valid.clone(),
    };
    // Bin coordinates for padded slots still need a valid bin range.
    let (pad_lo, pad_hi, _) = radial_bins(0.0, bins)?;
    for i in 0..l {
        let p_i = &mesh.vertices[i];
        let anchor_dirs: Vec<Vec3> = cache.anchor_indices[i * f..(i + 1) * f]
            .iter()
            .map(|&a| tangent_project(p_i, &mesh.vertices[a as usize]).direction)
            .collect();
        for slot in 0..k {
            let s = i * k + slot;
            if !table.valid[s] {
                cache.bin_lo[s] = pad_lo as u32;
                cache.bin_hi[s] = pad_hi as u32;
                continue;
            }
            let j = table.indices[s] as usize;
            let p_j = &mesh.vertices[j];
            let d = if j == i { 0.0 } else { arc(p_i, p_j) };
            let dh = (d / PI).clamp(0.0, 1.0);
            let (b0, b1, eta) = radial_bins(dh, bins)?;
            cache.delta[s] = d;
            cache.delta_hat[s] = dh;
            cache.bin_lo[s] = b0 as u32;
            cache.bin_hi[s] = b1 as u32;
            cache.bin_frac[s] = eta;
            if j == i {
                continue;
            }
            let tj = tangent_project(p_i, p_j);
            if tj.is_degenerate() {
                continue;
            }
            cache.angle_valid[s] = true;
            for (fi, ta) in anchor_dirs.iter().enumerate() {
                cache.alpha[s * f + fi] = angle_in_frame(p_i, &tj.direction, ta);
            }
        }
    }
    Ok(cache)
}
