//! Rotation sampling, nearest-neighbor index maps on icosphere samplings and
//! equirectangular (ERP) inverse-map remapping.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icosphere::{build_icosphere, IcosphereMesh, Vec3};
use crate::transfer::nearest_vertex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    AxisAngleCapped,
    UniformQuaternion,
    ZyxEuler,
    IcosahedralGroupElement,
    Identity,
    Yaw,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    pub quaternion: UnitQuaternion<f64>,
    pub provenance: Provenance,
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            quaternion: UnitQuaternion::identity(),
            provenance: Provenance::Identity,
        }
    }

    /// Rotation about +z by `angle` radians (longitude shift).
    pub fn yaw(angle: f64) -> Self {
        Self {
            quaternion: UnitQuaternion::from_axis_angle(&Vec3::z_axis(), angle),
            provenance: Provenance::Yaw,
        }
    }

    /// `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.
    pub fn from_zyx(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self {
            quaternion: UnitQuaternion::from_euler_angles(roll, pitch, yaw),
            provenance: Provenance::ZyxEuler,
        }
    }

    pub fn from_wxyz(q: [f64; 4], provenance: Provenance) -> Result<Self> {
        let raw = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        if (raw.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("quaternion {q:?} is not unit")));
        }
        Ok(Self {
            quaternion: UnitQuaternion::new_normalize(raw),
            provenance,
        })
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.quaternion.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        *self.quaternion.to_rotation_matrix().matrix()
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.quaternion * p
    }

    pub fn inverse(&self) -> Self {
        Self {
            quaternion: self.quaternion.inverse(),
            provenance: self.provenance,
        }
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self {
            quaternion: self.quaternion * other.quaternion,
            provenance: self.provenance,
        }
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        self.quaternion.angle()
    }
}

fn unit_gaussian<R: Rng, const N: usize>(rng: &mut R) -> [f64; N] {
    loop {
        let mut v = [0.0; N];
        for c in v.iter_mut() {
            *c = rng.sample(StandardNormal);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n >= 1e-12 {
            return v.map(|x| x / n);
        }
    }
}

/// Uniform axis on S² and uniform angle in `[0, max_angle]`.
pub fn sample_rotation_capped<R: Rng>(max_angle: f64, rng: &mut R) -> Result<Rotation> {
    if !(max_angle > 0.0 && max_angle <= PI) {
        return Err(Error::Precondition(format!("max_angle {max_angle} outside (0, π]")));
    }
    let [x, y, z] = unit_gaussian::<R, 3>(rng);
    let angle = rng.random::<f64>() * max_angle;
    Ok(Rotation {
        quaternion: UnitQuaternion::from_axis_angle(&Unit::new_unchecked(Vec3::new(x, y, z)), angle),
        provenance: Provenance::AxisAngleCapped,
    })
}

/// Haar-uniform rotation from a normalized 4D Gaussian.
pub fn sample_rotation_uniform<R: Rng>(rng: &mut R) -> Rotation {
    let [w, x, y, z] = unit_gaussian::<R, 4>(rng);
    Rotation {
        quaternion: UnitQuaternion::new_normalize(nalgebra::Quaternion::new(w, x, y, z)),
        provenance: Provenance::UniformQuaternion,
    }
}

/// Closed angle ranges, in radians, for ZYX Euler sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EulerRanges {
    pub yaw: (f64, f64),
    pub pitch: (f64, f64),
    pub roll: (f64, f64),
}

impl EulerRanges {
    /// Yaw in [0°, 360°], pitch in [0°, 180°], roll in [0°, 360°].
    pub fn full() -> Self {
        Self {
            yaw: (0.0, 2.0 * PI),
            pitch: (0.0, PI),
            roll: (0.0, 2.0 * PI),
        }
    }
}

pub fn sample_rotation_zyx<R: Rng>(ranges: EulerRanges, rng: &mut R) -> Result<Rotation> {
    let check = |(lo, hi): (f64, f64), max: f64, what: &str| {
        if lo < 0.0 || hi > max + 1e-12 || lo > hi {
            Err(Error::Precondition(format!("{what} range [{lo}, {hi}] outside [0, {max}]")))
        } else {
            Ok(())
        }
    };
    check(ranges.yaw, 2.0 * PI, "yaw")?;
    check(ranges.pitch, PI, "pitch")?;
    check(ranges.roll, 2.0 * PI, "roll")?;
    let mut draw = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
    let yaw = draw(ranges.yaw);
    let pitch = draw(ranges.pitch);
    let roll = draw(ranges.roll);
    Ok(Rotation::from_zyx(yaw, pitch, roll))
}

/// The 60 rotations mapping the canonical icosahedron onto itself, identity
/// first.
pub fn icosahedral_group() -> Vec<Rotation> {
    let base = build_icosphere(0).expect("rank 0 is always valid");
    let frame = |u: &Vec3, w: &Vec3| {
        let e1 = *u;
        let e2 = (w - u * w.dot(u)).normalize();
        Matrix3::from_columns(&[e1, e2, e1.cross(&e2)])
    };
    let v0 = base.vertices[0];
    let n0 = base.vertices[base.neighbors[0][0] as usize];
    let source = frame(&v0, &n0);
    let mut group = Vec::with_capacity(60);
    for a in 0..12 {
        for &b in &base.neighbors[a] {
            let target = frame(&base.vertices[a], &base.vertices[b as usize]);
            let m = target * source.transpose();
            group.push(Rotation {
                quaternion: UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m)),
                provenance: Provenance::IcosahedralGroupElement,
            });
        }
    }
    group
}

/// Pull-back nearest-neighbor map: `map[i] = argmax_j ⟨R⁻¹ p_i, p_j⟩`, so
/// `rotated[i] = signal[map[i]]` approximates the signal rotated by `R`.
pub fn nn_index_map(rotation: &Rotation, mesh: &IcosphereMesh) -> Vec<u32> {
    let inv = rotation.quaternion.inverse();
    mesh.vertices
        .par_iter()
        .map(|p| nearest_vertex(&(inv * p), &mesh.vertices))
        .collect()
}

/// Pull-back map of the mirror `y → −y` (horizontal flip of the panorama).
pub fn mirror_index_map(mesh: &IcosphereMesh) -> Vec<u32> {
    mesh.vertices
        .par_iter()
        .map(|p| nearest_vertex(&Vec3::new(p.x, -p.y, p.z), &mesh.vertices))
        .collect()
}

/// Gather rows through an index map.
pub fn reindex<T: Copy>(values: &[T], map: &[u32]) -> Vec<T> {
    map.iter().map(|&j| values[j as usize]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotationMapSet {
    pub rotation: Rotation,
    /// Map on the token rank.
    pub idx_proj: Vec<u32>,
    /// Map on the output rank.
    pub idx_img: Vec<u32>,
}

pub fn build_rotation_maps(rotation: Rotation, token_mesh: &IcosphereMesh, output_mesh: &IcosphereMesh) -> RotationMapSet {
    RotationMapSet {
        rotation,
        idx_proj: nn_index_map(&rotation, token_mesh),
        idx_img: nn_index_map(&rotation, output_mesh),
    }
}

/// True when `map` is a bijection of `0..map.len()`.
pub fn is_permutation(map: &[u32]) -> bool {
    let mut seen = vec![false; map.len()];
    for &j in map {
        match seen.get_mut(j as usize) {
            Some(s) if !*s => *s = true,
            _ => return false,
        }
    }
    true
}

/// Row-major `H × W × C` raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn at(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.width + c) * self.channels + ch]
    }

    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: f64) {
        self.data[(r * self.width + c) * self.channels + ch] = v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

/// Direction of the ERP pixel centre `(r, c)`.
pub fn erp_pixel_direction(r: usize, c: usize, height: usize, width: usize) -> Vec3 {
    let lon = 2.0 * PI * (c as f64 + 0.5) / width as f64 - PI;
    let lat = FRAC_PI_2 - PI * (r as f64 + 0.5) / height as f64;
    Vec3::new(lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin())
}

/// Continuous pixel coordinates `(row, col)` of a direction; pixel centres
/// sit at integer coordinates.
pub fn erp_pixel_coords(p: &Vec3, height: usize, width: usize) -> (f64, f64) {
    let lon = p.y.atan2(p.x);
    let lat = p.z.clamp(-1.0, 1.0).asin();
    let col = (lon + PI) / (2.0 * PI) * width as f64 - 0.5;
    let row = (FRAC_PI_2 - lat) / PI * height as f64 - 0.5;
    (row, col)
}

/// Resample an equirectangular raster under `rotation` by inverse mapping.
/// Longitude wraps; rows clamp at the poles.
pub fn erp_remap(image: &Raster, rotation: &Rotation, interpolation: Interpolation) -> Result<Raster> {
    let (h, w, ch) = (image.height, image.width, image.channels);
    if w != 2 * h || h == 0 {
        return Err(Error::Precondition(format!("ERP raster must be 2:1, got {h}x{w}")));
    }
    let inv = rotation.quaternion.inverse();
    let mut out = Raster::new(h, w, ch);
    let wrap = |c: i64| c.rem_euclid(w as i64) as usize;
    let clamp_row = |r: i64| r.clamp(0, h as i64 - 1) as usize;
    out.data
        .par_chunks_mut(w * ch)
        .enumerate()
        .for_each(|(r, row)| {
            for c in 0..w {
                let src = inv * erp_pixel_direction(r, c, h, w);
                let (y, x) = erp_pixel_coords(&src, h, w);
                let dst = &mut row[c * ch..(c + 1) * ch];
                match interpolation {
                    Interpolation::Nearest => {
                        let (rr, cc) = (clamp_row((y + 0.5).floor() as i64), wrap((x + 0.5).floor() as i64));
                        for (k, d) in dst.iter_mut().enumerate() {
                            *d = image.at(rr, cc, k);
                        }
                    }
                    Interpolation::Bilinear => {
                        let (y0, x0) = (y.floor(), x.floor());
                        let (fy, fx) = (y - y0, x - x0);
                        let (r0, r1) = (clamp_row(y0 as i64), clamp_row(y0 as i64 + 1));
                        let (c0, c1) = (wrap(x0 as i64), wrap(x0 as i64 + 1));
                        for (k, d) in dst.iter_mut().enumerate() {
                            let top = (1.0 - fx) * image.at(r0, c0, k) + fx * image.at(r0, c1, k);
                            let bot = (1.0 - fx) * image.at(r1, c0, k) + fx * image.at(r1, c1, k);
                            *d = (1.0 - fy) * top + fy * bot;
                        }
                    }
                }
            }
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn capped_sampler_respects_range_and_seed() {
        let cap = 35f64.to_radians();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut max: f64 = 0.0;
        for _ in 0..10_000 {
            let r = sample_rotation_capped(cap, &mut rng).unwrap();
            max = max.max(r.angle());
        }
        assert!(max <= cap + 1e-12);
        let a: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..5).map(|_| sample_rotation_capped(cap, &mut rng).unwrap().wxyz()).collect()
        };
        let b: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..5).map(|_| sample_rotation_capped(cap, &mut rng).unwrap().wxyz()).collect()
        };
        assert_eq!(a, b);
        let tiny = sample_rotation_capped(1e-9, &mut rng).unwrap();
        assert!(tiny.angle() <= 1e-9 + 1e-15);
        assert!(sample_rotation_capped(0.0, &mut rng).is_err());
        assert!(sample_rotation_capped(4.0, &mut rng).is_err());
    }

    #[test]
    fn uniform_sampler_has_zero_mean_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut mean = Matrix3::<f64>::zeros();
        for _ in 0..n {
            let r = sample_rotation_uniform(&mut rng);
            assert!((r.quaternion.quaternion().norm() - 1.0).abs() < 1e-12);
            mean += r.matrix();
        }
        mean /= n as f64;
        // each entry has variance 1/3 under Haar measure
        let bound = 3.0 * (1.0 / 3.0 / n as f64).sqrt();
        assert!(mean.iter().all(|v| v.abs() < bound), "{mean}");
        let a = sample_rotation_uniform(&mut rng);
        let b = sample_rotation_uniform(&mut rng);
        assert!((a.compose(&b).quaternion.quaternion().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zyx_examples() {
        let id = Rotation::from_zyx(0.0, 0.0, 0.0);
        assert!((id.matrix() - Matrix3::identity()).abs().max() < 1e-15);
        let r = Rotation::from_zyx(PI, 0.0, 0.0);
        assert!((r.apply(&Vec3::x()) + Vec3::x()).norm() < 1e-12);
        // explicit Rz Ry Rx product
        let (y, p, ro) = (0.4, 1.1, -2.0);
        let rz = Matrix3::new(f64::cos(y), -f64::sin(y), 0.0, f64::sin(y), f64::cos(y), 0.0, 0.0, 0.0, 1.0);
        let ry = Matrix3::new(f64::cos(p), 0.0, f64::sin(p), 0.0, 1.0, 0.0, -f64::sin(p), 0.0, f64::cos(p));
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, f64::cos(ro), -f64::sin(ro), 0.0, f64::sin(ro), f64::cos(ro));
        assert!((Rotation::from_zyx(y, p, ro).matrix() - rz * ry * rx).abs().max() < 1e-12);
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..4 {
            assert_eq!(
                sample_rotation_zyx(EulerRanges::full(), &mut r1).unwrap(),
                sample_rotation_zyx(EulerRanges::full(), &mut r2).unwrap()
            );
        }
        let bad = EulerRanges { pitch: (0.0, 4.0), ..EulerRanges::full() };
        assert!(sample_rotation_zyx(bad, &mut r1).is_err());
    }

    #[test]
    fn quaternion_matrix_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let r = sample_rotation_uniform(&mut rng);
            let m = r.matrix();
            assert!((m.determinant() - 1.0).abs() < 1e-9);
            assert!((m * m.transpose() - Matrix3::identity()).abs().max() < 1e-9);
            let back = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
            let q = r.quaternion.quaternion();
            let b = back.quaternion();
            let err = (q - b).norm().min((q + b).norm());
            assert!(err < 1e-9);
        }
    }

    #[test]
    fn icosahedral_group_is_closed_and_distinct() {
        let g = icosahedral_group();
        assert_eq!(g.len(), 60);
        assert!(g[0].angle() < 1e-12);
        let same = |a: &Rotation, b: &Rotation| (a.matrix() - b.matrix()).abs().max() < 1e-9;
        for i in 0..60 {
            for j in (i + 1)..60 {
                assert!(!same(&g[i], &g[j]));
            }
        }
        for a in g.iter().step_by(7) {
            for b in g.iter().step_by(5) {
                let c = a.compose(b);
                assert!(g.iter().any(|x| same(x, &c)));
            }
        }
    }

    #[test]
    fn identity_maps_are_identity() {
        let t = build_icosphere(2).unwrap();
        let o = build_icosphere(3).unwrap();
        let maps = build_rotation_maps(Rotation::identity(), &t, &o);
        assert!(maps.idx_proj.iter().enumerate().all(|(i, &j)| i == j as usize));
        assert!(maps.idx_img.iter().enumerate().all(|(i, &j)| i == j as usize));
    }

    #[test]
    fn group_maps_are_permutations_and_invert() {
        let m = build_icosphere(3).unwrap();
        for g in icosahedral_group() {
            let fwd = nn_index_map(&g, &m);
            let back = nn_index_map(&g.inverse(), &m);
            assert!(is_permutation(&fwd));
            let composed = reindex(&fwd, &back);
            assert!(composed.iter().enumerate().all(|(i, &j)| i == j as usize));
        }
        assert!(is_permutation(&mirror_index_map(&m)));
    }

    #[test]
    fn generic_rotation_map_error_is_below_edge_length() {
        let m = build_icosphere(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = sample_rotation_uniform(&mut rng);
        let map = nn_index_map(&r, &m);
        let mean_err: f64 = map
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                let moved = r.apply(&m.vertices[j as usize]);
                moved.dot(&m.vertices[i]).clamp(-1.0, 1.0).acos()
            })
            .sum::<f64>()
            / m.len() as f64;
        assert!(mean_err <= m.mean_edge_length());
    }

    #[test]
    fn erp_identity_and_yaw_shift() {
        let (h, w) = (16, 32);
        let mut img = Raster::new(h, w, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for v in img.data.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        assert_eq!(erp_remap(&img, &Rotation::identity(), Interpolation::Nearest).unwrap(), img);
        for k in [1usize, 5, 31] {
            let rot = Rotation::yaw(2.0 * PI * k as f64 / w as f64);
            let out = erp_remap(&img, &rot, Interpolation::Nearest).unwrap();
            for r in 0..h {
                for c in 0..w {
                    assert_eq!(out.at(r, c, 1), img.at(r, (c + w - k) % w, 1));
                }
            }
        }
        assert!(erp_remap(&Raster::new(4, 4, 1), &Rotation::identity(), Interpolation::Nearest).is_err());
        let b = erp_remap(&img, &Rotation::identity(), Interpolation::Bilinear).unwrap();
        assert!(b.data.iter().zip(&img.data).all(|(a, b)| (a - b).abs() < 1e-9));
    }
}
