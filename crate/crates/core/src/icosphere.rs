//! Subdivided icosahedral meshes of the unit sphere.
//!
//! Rank `r` is obtained from the canonical icosahedron by `r` rounds of
//! midpoint subdivision, each midpoint re-projected to the unit sphere.
//! Vertex order is rank-stable: the vertices of rank `r` are a prefix of the
//! vertices of rank `r + 1`, followed by edge midpoints in first-encounter
//! order (faces visited in order, edges keyed by `(min, max)`).

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Highest rank `build_icosphere` accepts unless told otherwise.
pub const DEFAULT_MAX_RANK: usize = 7;

/// Padded width of a [`NeighborTable`]: self plus at most six ring vertices.
pub const MAX_DEGREE: usize = 7;

const GOLDEN: f64 = 1.618_033_988_749_895;

/// The twelve base vertices, unnormalized. Coordinate axes pass through edge
/// midpoints, so the three coordinate reflections map the mesh onto itself.
const BASE_VERTICES: [[f64; 3]; 12] = [
    [-1.0, GOLDEN, 0.0],
    [1.0, GOLDEN, 0.0],
    [-1.0, -GOLDEN, 0.0],
    [1.0, -GOLDEN, 0.0],
    [0.0, -1.0, GOLDEN],
    [0.0, 1.0, GOLDEN],
    [0.0, -1.0, -GOLDEN],
    [0.0, 1.0, -GOLDEN],
    [GOLDEN, 0.0, -1.0],
    [GOLDEN, 0.0, 1.0],
    [-GOLDEN, 0.0, -1.0],
    [-GOLDEN, 0.0, 1.0],
];

/// Vertices, faces, 1-rings and quadrature weights of one subdivision rank.
#[derive(Clone, Debug, PartialEq)]
pub struct IcosphereMesh {
    pub rank: usize,
    pub vertices: Vec<Vec3>,
    /// Counter-clockwise seen from outside the sphere.
    pub faces: Vec<[u32; 3]>,
    /// 1-ring of every vertex in counter-clockwise order, starting at the
    /// lowest-indexed neighbor. Does not contain the vertex itself.
    pub neighbors: Vec<Vec<u32>>,
    /// Mean-normalized area weights: `(1/L) Σ ω_i = 1`.
    pub area_weights: Vec<f64>,
    /// Un-normalized lumped vertex areas in steradians.
    pub raw_areas: Vec<f64>,
    pub raw_area_sum: f64,
}

impl IcosphereMesh {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Mean geodesic length of the mesh edges, in radians.
    pub fn mean_edge_length(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, ring) in self.neighbors.iter().enumerate() {
            for &j in ring {
                if (j as usize) > i {
                    let d = self.vertices[i].dot(&self.vertices[j as usize]).clamp(-1.0, 1.0);
                    total += d.acos();
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    /// Latitude of every vertex, `asin(z)`.
    pub fn latitudes(&self) -> Vec<f64> {
        self.vertices.iter().map(|p| p.z.clamp(-1.0, 1.0).asin()).collect()
    }
}

/// Expected vertex count `10·4^r + 2`.
pub fn vertex_count(rank: usize) -> usize {
    10 * 4usize.pow(rank as u32) + 2
}

/// Build the mesh of the given rank, refusing ranks above [`DEFAULT_MAX_RANK`].
pub fn build_icosphere(rank: usize) -> Result<IcosphereMesh> {
    build_icosphere_with_max(rank, DEFAULT_MAX_RANK)
}

pub fn build_icosphere_with_max(rank: usize, max_rank: usize) -> Result<IcosphereMesh> {
    if rank > max_rank {
        return Err(Error::Config(format!(
            "icosphere rank {rank} exceeds configured maximum {max_rank}"
        )));
    }
    let (mut vertices, mut faces) = base_icosahedron();
    for _ in 0..rank {
        subdivide(&mut vertices, &mut faces);
    }
    let neighbors = ring_neighbors(vertices.len(), &faces)?;
    let raw_areas = lumped_vertex_areas(&vertices, &faces)?;
    let raw_area_sum: f64 = raw_areas.iter().sum();
    let area_weights = mean_normalize(&raw_areas);
    Ok(IcosphereMesh {
        rank,
        vertices,
        faces,
        neighbors,
        area_weights,
        raw_areas,
        raw_area_sum,
    })
}

fn base_icosahedron() -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let vertices: Vec<Vec3> = BASE_VERTICES
        .iter()
        .map(|v| Vec3::new(v[0], v[1], v[2]).normalize())
        .collect();
    // Adjacent base vertices sit at the minimal pairwise distance; enumerate
    // mutually adjacent triples and orient each one outward.
    let edge = (BASE_VERTICES[0][0] - BASE_VERTICES[1][0]).abs();
    let adjacent = |a: usize, b: usize| {
        let pa = Vec3::from(BASE_VERTICES[a]);
        let pb = Vec3::from(BASE_VERTICES[b]);
        ((pa - pb).norm() - edge).abs() < 1e-9
    };
    let mut faces = Vec::with_capacity(20);
    for a in 0..12 {
        for b in (a + 1)..12 {
            if !adjacent(a, b) {
                continue;
            }
            for c in (b + 1)..12 {
                if adjacent(a, c) && adjacent(b, c) {
                    let n = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
                    if n.dot(&vertices[a]) > 0.0 {
                        faces.push([a as u32, b as u32, c as u32]);
                    } else {
                        faces.push([a as u32, c as u32, b as u32]);
                    }
                }
            }
        }
    }
    debug_assert_eq!(faces.len(), 20);
    (vertices, faces)
}

fn subdivide(vertices: &mut Vec<Vec3>, faces: &mut Vec<[u32; 3]>) {
    let mut midpoints: HashMap<(u32, u32), u32> = HashMap::with_capacity(faces.len() * 3 / 2);
    let mut midpoint = |a: u32, b: u32, vertices: &mut Vec<Vec3>| -> u32 {
        let key = (a.min(b), a.max(b));
        *midpoints.entry(key).or_insert_with(|| {
            let p = (vertices[key.0 as usize] + vertices[key.1 as usize]).normalize();
            vertices.push(p);
            (vertices.len() - 1) as u32
        })
    };
    let mut refined = Vec::with_capacity(faces.len() * 4);
    for &[a, b, c] in faces.iter() {
        let ab = midpoint(a, b, vertices);
        let bc = midpoint(b, c, vertices);
        let ca = midpoint(c, a, vertices);
        refined.push([a, ab, ca]);
        refined.push([b, bc, ab]);
        refined.push([c, ca, bc]);
        refined.push([ab, bc, ca]);
    }
    *faces = refined;
}

fn ring_neighbors(n: usize, faces: &[[u32; 3]]) -> Result<Vec<Vec<u32>>> {
    // next[v][x] = y when (v, x, y) is a counter-clockwise corner of some face.
    let mut next: Vec<Vec<(u32, u32)>> = vec![Vec::with_capacity(6); n];
    for &[a, b, c] in faces {
        next[a as usize].push((b, c));
        next[b as usize].push((c, a));
        next[c as usize].push((a, b));
    }
    next.into_iter()
        .enumerate()
        .map(|(v, corners)| {
            let start = corners
                .iter()
                .map(|&(x, _)| x)
                .min()
                .ok_or_else(|| Error::Construction(format!("vertex {v} has no incident face")))?;
            let mut ring = Vec::with_capacity(corners.len());
            let mut cur = start;
            loop {
                ring.push(cur);
                let &(_, nxt) = corners.iter().find(|&&(x, _)| x == cur).ok_or_else(|| {
                    Error::Construction(format!("open fan around vertex {v}"))
                })?;
                if nxt == start {
                    break;
                }
                if ring.len() > corners.len() {
                    return Err(Error::Construction(format!("non-manifold fan at vertex {v}")));
                }
                cur = nxt;
            }
            Ok(ring)
        })
        .collect()
}

/// Area of the spherical triangle `(a, b, c)` (Van Oosterom–Strackee).
pub fn spherical_triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let triple = a.dot(&b.cross(c)).abs();
    let denom = 1.0 + a.dot(b) + b.dot(c) + c.dot(a);
    2.0 * triple.atan2(denom)
}

/// One third of the spherical area of each incident triangle, per vertex.
pub fn lumped_vertex_areas(vertices: &[Vec3], faces: &[[u32; 3]]) -> Result<Vec<f64>> {
    let mut areas = vec![0.0; vertices.len()];
    for (f, &[a, b, c]) in faces.iter().enumerate() {
        let area = spherical_triangle_area(
            &vertices[a as usize],
            &vertices[b as usize],
            &vertices[c as usize],
        );
        if !(area > 0.0) {
            return Err(Error::Construction(format!("face {f} has zero spherical area")));
        }
        for v in [a, b, c] {
            areas[v as usize] += area / 3.0;
        }
    }
    Ok(areas)
}

fn mean_normalize(raw: &[f64]) -> Vec<f64> {
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.iter().map(|w| w / mean).collect()
}

/// Recompute mean-normalized area weights from the mesh geometry.
pub fn compute_area_weights(mesh: &IcosphereMesh) -> Result<Vec<f64>> {
    Ok(mean_normalize(&lumped_vertex_areas(&mesh.vertices, &mesh.faces)?))
}

/// Fixed-width neighborhood table: row `i` holds `i` followed by its 1-ring,
/// padded with [`NeighborTable::PAD`] up to [`MAX_DEGREE`] columns.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborTable {
    pub max_degree: usize,
    pub indices: Vec<u32>,
    pub valid: Vec<bool>,
}

impl NeighborTable {
    pub const PAD: u32 = u32::MAX;

    pub fn rows(&self) -> usize {
        self.indices.len() / self.max_degree
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.max_degree..(i + 1) * self.max_degree]
    }

    pub fn row_mask(&self, i: usize) -> &[bool] {
        &self.valid[i * self.max_degree..(i + 1) * self.max_degree]
    }

    /// Valid neighbor indices of row `i`, self first.
    pub fn valid_row(&self, i: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.row(i)
            .iter()
            .zip(self.row_mask(i))
            .enumerate()
            .filter(|(_, (_, &ok))| ok)
            .map(|(k, (&j, _))| (k, j as usize))
    }
}

pub fn build_neighbor_table(mesh: &IcosphereMesh) -> NeighborTable {
    let k = MAX_DEGREE;
    let n = mesh.len();
    let mut indices = vec![NeighborTable::PAD; n * k];
    let mut valid = vec![false; n * k];
    for (i, ring) in mesh.neighbors.iter().enumerate() {
        indices[i * k] = i as u32;
        valid[i * k] = true;
        for (slot, &j) in ring.iter().enumerate().take(k - 1) {
            indices[i * k + 1 + slot] = j;
            valid[i * k + 1 + slot] = true;
        }
    }
    NeighborTable {
        max_degree: k,
        indices,
        valid,
    }
}
