//! Container layouts for meshes, geometric tables and rotation index maps.

use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::geometry::{build_geodesic_cache, GeodesicCache};
use crate::icosphere::{build_icosphere, build_neighbor_table, IcosphereMesh};
use crate::so3::{build_rotation_maps, sample_rotation_capped, sample_rotation_uniform, sample_rotation_zyx, EulerRanges, Rotation, RotationMapSet};
use crate::transfer::RankTransfer;

pub fn mesh_to_container(mesh: &IcosphereMesh) -> Container {
    let table = build_neighbor_table(mesh);
    let l = mesh.len();
    let mut c = Container::new(
        "mesh",
        json!({
            "rank": mesh.rank,
            "vertices": l,
            "faces": mesh.faces.len(),
            "edges": mesh.edge_count(),
            "raw_area_sum": mesh.raw_area_sum,
        }),
    );
    c.push_f64("vertices", &[l, 3], mesh.vertices.iter().flat_map(|v| [v.x, v.y, v.z]).collect());
    c.push_u32("faces", &[mesh.faces.len(), 3], mesh.faces.iter().flatten().copied().collect());
    c.push_u32("neighbors", &[l, table.max_degree], table.indices.clone());
    c.push_u32("neighbor_mask", &[l, table.max_degree], table.valid.iter().map(|&v| v as u32).collect());
    c.push_f64("area_weights", &[l], mesh.area_weights.clone());
    c.push_f64("raw_areas", &[l], mesh.raw_areas.clone());
    c
}

/// Rebuild the mesh named by a mesh container and check that the stored
/// vertices match it bit for bit.
pub fn mesh_from_container(c: &Container) -> Result<IcosphereMesh> {
    c.expect_kind("mesh")?;
    let rank = c.meta["rank"].as_u64().ok_or_else(|| Error::Format("mesh container has no rank".into()))? as usize;
    let mesh = build_icosphere(rank)?;
    let (shape, v) = c.f64("vertices")?;
    let same = shape == [mesh.len(), 3]
        && mesh.vertices.iter().flat_map(|p| [p.x, p.y, p.z]).zip(v).all(|(a, b)| a.to_bits() == b.to_bits());
    if !same {
        return Err(Error::Format(format!("stored vertices do not match the rank-{rank} icosphere")));
    }
    Ok(mesh)
}

fn push_cache(c: &mut Container, cache: &GeodesicCache) {
    let (l, k, f) = (cache.nodes, cache.max_degree, cache.anchors_per_node);
    c.push_f64("delta", &[l, k], cache.delta.clone());
    c.push_f64("delta_hat", &[l, k], cache.delta_hat.clone());
    c.push_u32("bin_lo", &[l, k], cache.bin_lo.clone());
    c.push_u32("bin_hi", &[l, k], cache.bin_hi.clone());
    c.push_f64("bin_frac", &[l, k], cache.bin_frac.clone());
    c.push_u32("anchor_indices", &[l, f], cache.anchor_indices.clone());
    c.push_f64("alpha", &[l, k, f], cache.alpha.clone());
    c.push_u32("angle_valid", &[l, k], cache.angle_valid.iter().map(|&v| v as u32).collect());
}

fn push_ragged(c: &mut Container, name: &str, rows: &[Vec<u32>]) {
    let offsets: Vec<u32> = std::iter::once(0).chain(rows.iter().scan(0u32, |acc, r| {
        *acc += r.len() as u32;
        Some(*acc)
    })).collect();
    c.push_u32(&format!("{name}/offsets"), &[offsets.len()], offsets);
    let flat: Vec<u32> = rows.iter().flatten().copied().collect();
    c.push_u32(&format!("{name}/values"), &[flat.len()], flat);
}

/// Geodesic cache of `mesh`, plus the transfer to the next coarser rank
/// when there is one.
pub fn tables_to_container(mesh: &IcosphereMesh, anchors: usize, bins: usize) -> Result<Container> {
    let table = build_neighbor_table(mesh);
    let cache = build_geodesic_cache(mesh, &table, anchors, bins)?;
    let mut c = Container::new("tables", json!({"rank": mesh.rank, "anchors": anchors, "bins": bins}));
    push_cache(&mut c, &cache);
    if mesh.rank > 0 {
        let coarse = build_icosphere(mesh.rank - 1)?;
        let t = RankTransfer::new(mesh, &coarse)?;
        c.meta["transfer"] = json!({"fine_rank": t.fine_rank, "coarse_rank": t.coarse_rank, "sigma": t.sigma});
        c.push_u32("transfer/parent", &[t.parent.len()], t.parent.clone());
        push_ragged(&mut c, "transfer/tied_parents", &t.tied_parents);
        push_ragged(&mut c, "transfer/children", &t.children);
        push_ragged(&mut c, "transfer/up_candidates", &t.up_candidates);
        let w: Vec<f64> = t.up_weights.iter().flatten().copied().collect();
        c.push_f64("transfer/up_weights", &[w.len()], w);
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationMode {
    /// Axis-angle draws capped at 35°.
    Capped35,
    Uniform,
    Zyx,
}

impl std::str::FromStr for RotationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "capped35" => Ok(Self::Capped35),
            "uniform" => Ok(Self::Uniform),
            "zyx" => Ok(Self::Zyx),
            _ => Err(Error::Config(format!("unknown rotation mode '{s}' (capped35, uniform, zyx)"))),
        }
    }
}

pub fn sample_rotations(mode: RotationMode, count: usize, seed: u64) -> Result<Vec<Rotation>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| match mode {
            RotationMode::Capped35 => sample_rotation_capped(35f64.to_radians(), &mut rng),
            RotationMode::Uniform => Ok(sample_rotation_uniform(&mut rng)),
            RotationMode::Zyx => sample_rotation_zyx(EulerRanges::full(), &mut rng),
        })
        .collect()
}

pub fn rotmaps_to_container(sets: &[RotationMapSet], token: &IcosphereMesh, output: &IcosphereMesh, meta: serde_json::Value) -> Container {
    let k = sets.len();
    let mut c = Container::new(
        "rotmaps",
        json!({"token_rank": token.rank, "output_rank": output.rank, "count": k, "generator": meta,
               "provenance": sets.iter().map(|s| s.rotation.provenance).collect::<Vec<_>>()}),
    );
    c.push_f64("quaternions", &[k, 4], sets.iter().flat_map(|s| s.rotation.wxyz()).collect());
    c.push_u32("idx_proj", &[k, token.len()], sets.iter().flat_map(|s| s.idx_proj.iter().copied()).collect());
    c.push_u32("idx_img", &[k, output.len()], sets.iter().flat_map(|s| s.idx_img.iter().copied()).collect());
    c
}

pub fn build_rotmaps(mode: RotationMode, count: usize, seed: u64, token: &IcosphereMesh, output: &IcosphereMesh) -> Result<Vec<RotationMapSet>> {
    Ok(sample_rotations(mode, count, seed)?
        .into_iter()
        .map(|r| build_rotation_maps(r, token, output))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mesh_container_round_trip() {
        let m = build_icosphere(2).unwrap();
        let c = mesh_to_container(&m);
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(mesh_from_container(&back).unwrap().vertices, m.vertices);
        assert_eq!(c.u32("neighbors").unwrap().0, &[162, 7]);
        let mut bad = back.clone();
        if let crate::container::TensorData::F64(v) = &mut bad.tensors[0].data {
            v[0] += 1e-9;
        }
        assert!(matches!(mesh_from_container(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn tables_include_transfer_above_rank_zero() {
        let c0 = tables_to_container(&build_icosphere(0).unwrap(), 3, 16).unwrap();
        assert!(c0.get("transfer/parent").is_err());
        let c1 = tables_to_container(&build_icosphere(1).unwrap(), 3, 16).unwrap();
        assert_eq!(c1.u32("transfer/parent").unwrap().1.len(), 42);
        assert_eq!(c1.f64("alpha").unwrap().0, &[42, 7, 3]);
        let offsets = c1.u32("transfer/children/offsets").unwrap().1;
        assert_eq!(*offsets.last().unwrap(), 42);
    }

    #[test]
    fn rotmaps_are_seeded() {
        let t = build_icosphere(1).unwrap();
        let o = build_icosphere(2).unwrap();
        let a = build_rotmaps(RotationMode::Capped35, 3, 4, &t, &o).unwrap();
        assert_eq!(a, build_rotmaps(RotationMode::Capped35, 3, 4, &t, &o).unwrap());
        assert!(a.iter().all(|s| s.rotation.angle() <= 35f64.to_radians() + 1e-12));
        let c = rotmaps_to_container(&a, &t, &o, json!({}));
        assert_eq!(c.u32("idx_img").unwrap().0, &[3, 162]);
        assert!("bogus".parse::<RotationMode>().is_err());
    }
}
