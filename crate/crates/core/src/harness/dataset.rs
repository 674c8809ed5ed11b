//! Synthetic gravity-aligned spherical scenes.
//!
//! A scene is a background class, one to three near-equatorial great-circle
//! bands, a floor cap around the south pole, a ceiling cap around the north
//! pole and a few object caps at class-specific latitudes. Labels depend on
//! direction only, so rotated ground truth is an index permutation away.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::icosphere::{IcosphereMesh, Vec3};
use crate::model::IGNORE_CLASS;
use crate::so3::{nn_index_map, reindex, sample_rotation_capped, Provenance, Rotation};

pub const NUM_CLASSES: usize = 14;
pub const FLOOR: u32 = 1;
pub const CEILING: u32 = 2;
const BACKGROUND_CLASSES: [u32; 2] = [3, 4];
const BAND_CLASSES: [u32; 3] = [5, 6, 7];
const OBJECT_CLASSES: [u32; 6] = [8, 9, 10, 11, 12, 13];

/// Preferred latitude of each object class, degrees.
fn object_latitude(class: u32) -> f64 {
    match class {
        8 => -35.0,
        9 => -20.0,
        10 => -5.0,
        11 => 10.0,
        12 => 25.0,
        _ => 40.0,
    }
}

/// Base RGB of each class.
pub fn class_color(class: u32) -> [f64; 3] {
    const COLORS: [[f64; 3]; NUM_CLASSES] = [
        [0.5, 0.5, 0.5],
        [0.55, 0.35, 0.2],
        [0.9, 0.9, 0.85],
        [0.75, 0.7, 0.55],
        [0.6, 0.65, 0.75],
        [0.3, 0.55, 0.3],
        [0.8, 0.4, 0.4],
        [0.35, 0.35, 0.7],
        [0.9, 0.6, 0.2],
        [0.2, 0.7, 0.7],
        [0.6, 0.2, 0.6],
        [0.95, 0.85, 0.3],
        [0.25, 0.25, 0.25],
        [0.45, 0.8, 0.45],
    ];
    COLORS[class as usize]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cap {
    pub center: Vec3,
    /// Angular radius, radians.
    pub radius: f64,
    pub class: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    pub normal: Vec3,
    /// Angular half width around the great circle, radians.
    pub half_width: f64,
    pub class: u32,
}

/// Smooth colour perturbation `Σ_k a_k exp(κ (p·u_k − 1))` per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Bumps {
    pub centers: Vec<Vec3>,
    pub amplitudes: Vec<[f64; 3]>,
    pub sharpness: f64,
}

impl Bumps {
    fn eval(&self, p: &Vec3) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (u, a) in self.centers.iter().zip(&self.amplitudes) {
            let w = (self.sharpness * (p.dot(u) - 1.0)).exp();
            for c in 0..3 {
                out[c] += a[c] * w;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub background: u32,
    pub bands: Vec<Band>,
    /// Painted in order; later caps win.
    pub caps: Vec<Cap>,
    pub tint: [f64; 3],
    pub bumps: Bumps,
}

impl Scene {
    pub fn label_at(&self, p: &Vec3) -> u32 {
        let mut label = self.background;
        for b in &self.bands {
            if p.dot(&b.normal).clamp(-1.0, 1.0).asin().abs() <= b.half_width {
                label = b.class;
            }
        }
        for c in &self.caps {
            if p.dot(&c.center) >= c.radius.cos() {
                label = c.class;
            }
        }
        label
    }

    pub fn color_at(&self, p: &Vec3) -> [f64; 3] {
        let base = class_color(self.label_at(p));
        let n = self.bumps.eval(p);
        [0, 1, 2].map(|c| base[c] + self.tint[c] + n[c])
    }

    pub fn labels_on(&self, mesh: &IcosphereMesh) -> Vec<u32> {
        mesh.vertices.iter().map(|p| self.label_at(p)).collect()
    }

    /// The same scene seen after rotating the world by `r`.
    pub fn rotated(&self, r: &Rotation) -> Self {
        let mut s = self.clone();
        for b in &mut s.bands {
            b.normal = r.apply(&b.normal);
        }
        for c in &mut s.caps {
            c.center = r.apply(&c.center);
        }
        for u in &mut s.bumps.centers {
            *u = r.apply(u);
        }
        s
    }
}

fn unit_from_lat_lon(lat: f64, lon: f64) -> Vec3 {
    Vec3::new(lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin())
}

fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Knobs of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneStyle {
    pub ignore_fraction: f64,
    pub smooth_noise: f64,
    pub white_noise: f64,
    pub tint: f64,
}

impl Default for SceneStyle {
    fn default() -> Self {
        Self {
            ignore_fraction: 0.02,
            smooth_noise: 0.15,
            white_noise: 0.08,
            tint: 0.05,
        }
    }
}

pub fn sample_scene<R: Rng>(style: &SceneStyle, rng: &mut R) -> Scene {
    let deg = PI / 180.0;
    let background = BACKGROUND_CLASSES[rng.random_range(0..BACKGROUND_CLASSES.len())];
    let mut band_classes = BAND_CLASSES.to_vec();
    band_classes.shuffle(rng);
    let n_bands = rng.random_range(1..=3);
    let bands = band_classes[..n_bands]
        .iter()
        .map(|&class| {
            let tilt = rng.random_range(0.0..20.0) * deg;
            let az = rng.random_range(0.0..2.0 * PI);
            Band {
                normal: unit_from_lat_lon(PI / 2.0 - tilt, az),
                half_width: rng.random_range(4.0..10.0) * deg,
                class,
            }
        })
        .collect();
    let k = rng.random_range(3..=8);
    let mut caps = Vec::with_capacity(k);
    caps.push(Cap {
        center: unit_from_lat_lon(-PI / 2.0 + rng.random_range(0.0..10.0) * deg, rng.random_range(0.0..2.0 * PI)),
        radius: rng.random_range(30.0..45.0) * deg,
        class: FLOOR,
    });
    caps.push(Cap {
        center: unit_from_lat_lon(PI / 2.0 - rng.random_range(0.0..10.0) * deg, rng.random_range(0.0..2.0 * PI)),
        radius: rng.random_range(25.0..40.0) * deg,
        class: CEILING,
    });
    let mut objects = OBJECT_CLASSES.to_vec();
    objects.shuffle(rng);
    for &class in &objects[..k - 2] {
        let lat = (object_latitude(class) + rng.random_range(-6.0..6.0)) * deg;
        caps.push(Cap {
            center: unit_from_lat_lon(lat, rng.random_range(0.0..2.0 * PI)),
            radius: rng.random_range(8.0..18.0) * deg,
            class,
        });
    }
    let tint = [0; 3].map(|_| rng.random_range(-style.tint..=style.tint));
    let n_bumps = 6;
    let bumps = Bumps {
        centers: (0..n_bumps).map(|_| random_unit(rng)).collect(),
        amplitudes: (0..n_bumps)
            .map(|_| [0; 3].map(|_| rng.random_range(-style.smooth_noise..=style.smooth_noise)))
            .collect(),
        sharpness: 4.0,
    };
    Scene {
        background,
        bands,
        caps,
        tint,
        bumps,
    }
}

/// One labelled spherical image at the output rank.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `L × 3` synthetic colour.
    pub features: Array2<f64>,
    pub labels: Vec<u32>,
    /// Rotation applied by a pose perturbation, if any.
    pub rotation: Option<Rotation>,
}

impl SegSample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.features.nrows() != self.labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} labels",
                self.features.nrows(),
                self.labels.len()
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&y| y as usize >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {num_classes})")));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature".into()));
        }
        Ok(())
    }

    /// Resample features and labels through a pull-back index map.
    pub fn reindexed(&self, map: &[u32]) -> Self {
        let idx: Vec<usize> = map.iter().map(|&j| j as usize).collect();
        Self {
            features: self.features.select(ndarray::Axis(0), &idx),
            labels: reindex(&self.labels, map),
            rotation: self.rotation,
        }
    }
}

pub fn render_sample<R: Rng>(scene: &Scene, mesh: &IcosphereMesh, style: &SceneStyle, rng: &mut R) -> SegSample {
    let l = mesh.len();
    let mut features = Array2::zeros((l, 3));
    let mut labels = scene.labels_on(mesh);
    for (i, p) in mesh.vertices.iter().enumerate() {
        let c = scene.color_at(p);
        for k in 0..3 {
            let w: f64 = rng.sample(StandardNormal);
            features[[i, k]] = c[k] + style.white_noise * w;
        }
    }
    for y in labels.iter_mut() {
        if rng.random::<f64>() < style.ignore_fraction {
            *y = IGNORE_CLASS;
        }
    }
    SegSample {
        features,
        labels,
        rotation: None,
    }
}

/// `n` samples drawn from `seed`; the same seed always yields the same bytes.
pub fn make_synthetic_dataset(mesh: &IcosphereMesh, n: usize, seed: u64, style: &SceneStyle) -> Result<Vec<SegSample>> {
    if n == 0 {
        return Err(Error::Precondition("dataset needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let scene = sample_scene(style, &mut rng);
            render_sample(&scene, mesh, style, &mut rng)
        })
        .collect())
}

/// Rotate every sample by its own capped axis-angle draw, applied through
/// the output-rank nearest-neighbour map.
pub fn pose_perturb_dataset(data: &[SegSample], mesh: &IcosphereMesh, max_angle: f64, seed: u64) -> Result<Vec<SegSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.iter()
        .map(|s| {
            let r = if max_angle == 0.0 {
                Rotation {
                    provenance: Provenance::AxisAngleCapped,
                    ..Rotation::identity()
                }
            } else {
                sample_rotation_capped(max_angle, &mut rng)?
            };
            let mut out = if max_angle == 0.0 { s.clone() } else { s.reindexed(&nn_index_map(&r, mesh)) };
            out.rotation = Some(r);
            Ok(out)
        })
        .collect()
}

pub fn dataset_to_container(data: &[SegSample], rank: usize, meta: serde_json::Value) -> Result<Container> {
    let first = data.first().ok_or_else(|| Error::Data("empty dataset".into()))?;
    let (l, c) = first.features.dim();
    let mut c_out = Container::new("dataset", json!({"rank": rank, "count": data.len(), "channels": c, "generator": meta}));
    let mut feats = Vec::with_capacity(data.len() * l * c);
    let mut labels = Vec::with_capacity(data.len() * l);
    for s in data {
        if s.features.dim() != (l, c) {
            return Err(Error::Data("samples have inconsistent shapes".into()));
        }
        feats.extend(s.features.iter());
        labels.extend(&s.labels);
    }
    c_out.push_f64("features", &[data.len(), l, c], feats);
    c_out.push_u32("labels", &[data.len(), l], labels);
    if data.iter().all(|s| s.rotation.is_some()) {
        let q: Vec<f64> = data.iter().flat_map(|s| s.rotation.unwrap().wxyz()).collect();
        c_out.push_f64("quaternions", &[data.len(), 4], q);
    }
    Ok(c_out)
}

/// Returns the samples and their output rank.
pub fn dataset_from_container(c: &Container) -> Result<(Vec<SegSample>, usize)> {
    c.expect_kind("dataset")?;
    let rank = c.meta["rank"].as_u64().ok_or_else(|| Error::Format("dataset manifest has no rank".into()))? as usize;
    let (fs, feats) = c.f64("features")?;
    let (ls, labels) = c.u32("labels")?;
    if fs.len() != 3 || ls.len() != 2 || fs[0] != ls[0] || fs[1] != ls[1] {
        return Err(Error::Format(format!("inconsistent dataset shapes {fs:?} / {ls:?}")));
    }
    let (n, l, ch) = (fs[0], fs[1], fs[2]);
    let quats = c.f64("quaternions").ok().map(|(_, q)| q.to_vec());
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let features = Array2::from_shape_vec((l, ch), feats[k * l * ch..(k + 1) * l * ch].to_vec()).expect("shape checked");
        let rotation = match &quats {
            Some(q) => Some(Rotation::from_wxyz(
                [q[4 * k], q[4 * k + 1], q[4 * k + 2], q[4 * k + 3]],
                Provenance::AxisAngleCapped,
            )?),
            None => None,
        };
        let s = SegSample {
            features,
            labels: labels[k * l..(k + 1) * l].to_vec(),
            rotation,
        };
        s.validate(NUM_CLASSES)?;
        out.push(s);
    }
    Ok((out, rank))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::icosphere::build_icosphere;
    use crate::so3::icosahedral_group;

    #[test]
    fn fixed_seed_gives_identical_bytes() {
        let mesh = build_icosphere(3).unwrap();
        let a = make_synthetic_dataset(&mesh, 4, 11, &SceneStyle::default()).unwrap();
        let b = make_synthetic_dataset(&mesh, 4, 11, &SceneStyle::default()).unwrap();
        let ca = dataset_to_container(&a, 3, json!({})).unwrap().to_bytes();
        let cb = dataset_to_container(&b, 3, json!({})).unwrap().to_bytes();
        assert_eq!(ca, cb);
        let c = make_synthetic_dataset(&mesh, 4, 12, &SceneStyle::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn samples_are_valid_and_varied() {
        let mesh = build_icosphere(3).unwrap();
        let data = make_synthetic_dataset(&mesh, 20, 3, &SceneStyle::default()).unwrap();
        let mut ignored = 0usize;
        for s in &data {
            s.validate(NUM_CLASSES).unwrap();
            let mut classes: Vec<u32> = s.labels.iter().copied().filter(|&y| y != IGNORE_CLASS).collect();
            classes.sort_unstable();
            classes.dedup();
            assert!(classes.len() >= 3, "{classes:?}");
            ignored += s.labels.iter().filter(|&&y| y == IGNORE_CLASS).count();
        }
        let frac = ignored as f64 / (20 * mesh.len()) as f64;
        assert!((0.01..0.03).contains(&frac), "{frac}");
    }

    #[test]
    fn rotated_scenes_match_index_maps_for_group_rotations() {
        let mesh = build_icosphere(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scene = sample_scene(&SceneStyle::default(), &mut rng);
        let labels = scene.labels_on(&mesh);
        for g in icosahedral_group() {
            let direct = scene.rotated(&g).labels_on(&mesh);
            assert_eq!(direct, reindex(&labels, &nn_index_map(&g, &mesh)));
        }
    }

    #[test]
    fn pose_perturbation_contracts() {
        let mesh = build_icosphere(3).unwrap();
        let data = make_synthetic_dataset(&mesh, 6, 1, &SceneStyle::default()).unwrap();
        let same = pose_perturb_dataset(&data, &mesh, 0.0, 9).unwrap();
        for (a, b) in data.iter().zip(&same) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.labels, b.labels);
        }
        let cap = 35f64.to_radians();
        let p1 = pose_perturb_dataset(&data, &mesh, cap, 9).unwrap();
        let p2 = pose_perturb_dataset(&data, &mesh, cap, 9).unwrap();
        assert_eq!(
            dataset_to_container(&p1, 3, json!({})).unwrap().to_bytes(),
            dataset_to_container(&p2, 3, json!({})).unwrap().to_bytes()
        );
        assert!(p1.iter().all(|s| s.rotation.unwrap().angle() <= cap + 1e-12));
    }

    #[test]
    fn container_round_trip() {
        let mesh = build_icosphere(2).unwrap();
        let data = make_synthetic_dataset(&mesh, 3, 2, &SceneStyle::default()).unwrap();
        let data = pose_perturb_dataset(&data, &mesh, 0.3, 1).unwrap();
        let c = dataset_to_container(&data, 2, json!({"seed": 2})).unwrap();
        let (back, rank) = dataset_from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(rank, 2);
        assert_eq!(back.len(), 3);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.labels, b.labels);
            assert!((a.rotation.unwrap().quaternion.coords - b.rotation.unwrap().quaternion.coords).norm() < 1e-15);
        }
    }
}
