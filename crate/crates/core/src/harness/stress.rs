//! Unrestricted-rotation stress evaluation.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::harness::dataset::SegSample;
use crate::harness::metrics::{Confusion, MiouResult};
use crate::icosphere::IcosphereMesh;
use crate::model::{Geometry, Model};
use crate::so3::{nn_index_map, sample_rotation_zyx, EulerRanges, Rotation};

/// Anything that labels an output-rank field.
pub trait Predictor: Sync {
    fn num_classes(&self) -> usize;
    fn output_mesh(&self) -> &IcosphereMesh;
    fn predict(&self, features: &SegSample) -> Result<Vec<u32>>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub geometry: &'a Geometry,
}

impl Predictor for ModelPredictor<'_> {
    fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    fn output_mesh(&self) -> &IcosphereMesh {
        &self.geometry.output_mesh
    }

    fn predict(&self, s: &SegSample) -> Result<Vec<u32>> {
        let x0 = self.geometry.tokens_from_output(s.features.view())?;
        self.model.predict(self.geometry, x0.view())
    }
}

/// The ZYX Euler draws of the protocol: `n_repeats × n_rotations` rotations
/// from one stream, independent of any model.
pub fn stress_rotations(seed: u64, n_rotations: usize, n_repeats: usize) -> Vec<Rotation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_rotations * n_repeats)
        .map(|_| sample_rotation_zyx(EulerRanges::full(), &mut rng).expect("full ranges are valid"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationResult {
    pub repeat: usize,
    pub index: usize,
    /// `(yaw, pitch, roll)` in degrees.
    pub zyx_deg: [f64; 3],
    pub quaternion_wxyz: [f64; 4],
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressReport {
    pub base_miou: f64,
    pub so3_miou: f64,
    pub per_rotation: Vec<RotationResult>,
    /// Per-class IoU on the unrotated set, index = class id.
    pub base_per_class: Vec<Option<f64>>,
    /// Per-class IoU averaged over rotations in which the class occurs.
    pub so3_per_class: Vec<Option<f64>>,
    pub config_fingerprint: String,
    pub seed: u64,
    pub n_rotations: usize,
    pub n_repeats: usize,
    pub samples: usize,
}

impl StressReport {
    /// Range and consistency checks a report must satisfy.
    pub fn check(&self) -> Result<()> {
        let in_range = |v: f64| (0.0..=100.0).contains(&v);
        let classes = self.base_per_class.iter().chain(&self.so3_per_class).flatten();
        if !in_range(self.base_miou) || !in_range(self.so3_miou) || !self.per_rotation.iter().all(|r| in_range(r.miou)) || !classes.clone().all(|&v| in_range(v)) {
            return Err(Error::Data("stress report value outside [0, 100]".into()));
        }
        if self.per_rotation.len() != self.n_rotations * self.n_repeats {
            return Err(Error::Data("stress report has the wrong number of rotations".into()));
        }
        Ok(())
    }
}

/// SHA-256 of the canonical TOML rendering of a configuration.
pub fn config_fingerprint(cfg: &ModelConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_toml_string().as_bytes()))
}

fn defined(r: MiouResult, what: &str) -> Result<(f64, Vec<Option<f64>>)> {
    match r.miou {
        Some(m) => Ok((m, r.per_class)),
        None => Err(Error::Data(format!("mIoU undefined on {what}: no labelled nodes"))),
    }
}

fn dataset_miou<P: Predictor>(p: &P, data: &[SegSample], map: Option<&[u32]>) -> Result<MiouResult> {
    let outs: Vec<(Vec<u32>, Vec<u32>)> = data
        .par_iter()
        .map(|s| {
            let s = match map {
                Some(m) => s.reindexed(m),
                None => s.clone(),
            };
            Ok((p.predict(&s)?, s.labels))
        })
        .collect::<Result<_>>()?;
    let mut c = Confusion::new(p.num_classes());
    for (pred, labels) in &outs {
        c.add(pred, labels)?;
    }
    Ok(c.result())
}

/// Evaluate on the unrotated set and on every protocol rotation, rotating
/// features and labels through output-rank index maps.
pub fn stress_test<P: Predictor>(
    p: &P,
    data: &[SegSample],
    rotations: &[Rotation],
    n_repeats: usize,
    seed: u64,
    fingerprint: String,
) -> Result<StressReport> {
    let l = p.output_mesh().len();
    if data.iter().any(|s| s.labels.len() != l) {
        return Err(Error::Config(format!("dataset rank does not match the model's output rank {}", p.output_mesh().rank)));
    }
    if data.is_empty() || n_repeats == 0 || rotations.is_empty() || rotations.len() % n_repeats != 0 {
        return Err(Error::Precondition("stress test needs samples and a whole number of rotations per repeat".into()));
    }
    let n_rot = rotations.len() / n_repeats;
    let (base_miou, base_per_class) = defined(dataset_miou(p, data, None)?, "the base set")?;
    let k = p.num_classes();
    let mut class_sum = vec![0.0; k];
    let mut class_n = vec![0usize; k];
    let mut per_rotation = Vec::with_capacity(rotations.len());
    for (j, r) in rotations.iter().enumerate() {
        let map = nn_index_map(r, p.output_mesh());
        let (m, pc) = defined(dataset_miou(p, data, Some(&map))?, "a rotated set")?;
        for (c, v) in pc.iter().enumerate() {
            if let Some(v) = v {
                class_sum[c] += v;
                class_n[c] += 1;
            }
        }
        let (roll, pitch, yaw) = r.quaternion.euler_angles();
        per_rotation.push(RotationResult {
            repeat: j / n_rot,
            index: j % n_rot,
            zyx_deg: [yaw * 180.0 / PI, pitch * 180.0 / PI, roll * 180.0 / PI],
            quaternion_wxyz: r.wxyz(),
            miou: m,
        });
    }
    let so3_miou = per_rotation.iter().map(|r| r.miou).sum::<f64>() / per_rotation.len() as f64;
    let so3_per_class = (0..k).map(|c| (class_n[c] > 0).then(|| class_sum[c] / class_n[c] as f64)).collect();
    let report = StressReport {
        base_miou,
        so3_miou,
        per_rotation,
        base_per_class,
        so3_per_class,
        config_fingerprint: fingerprint,
        seed,
        n_rotations: n_rot,
        n_repeats,
        samples: data.len(),
    };
    report.check()?;
    Ok(report)
}

/// Stress test of a trained model with the standard ZYX rotation suite.
pub fn stress_model(model: &Model, geo: &Geometry, data: &[SegSample], n_rotations: usize, n_repeats: usize, seed: u64) -> Result<StressReport> {
    if geo.output_rank() != model.config.output_rank {
        return Err(Error::Config("geometry does not match the checkpoint".into()));
    }
    let rotations = stress_rotations(seed, n_rotations, n_repeats);
    let p = ModelPredictor { model, geometry: geo };
    stress_test(&p, data, &rotations, n_repeats, seed, config_fingerprint(&model.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{make_synthetic_dataset, SceneStyle};
    use crate::icosphere::build_icosphere;

    struct Constant {
        mesh: IcosphereMesh,
        class: u32,
    }

    impl Predictor for Constant {
        fn num_classes(&self) -> usize {
            14
        }
        fn output_mesh(&self) -> &IcosphereMesh {
            &self.mesh
        }
        fn predict(&self, s: &SegSample) -> Result<Vec<u32>> {
            Ok(vec![self.class; s.labels.len()])
        }
    }

    /// Reads the ground truth back.
    struct Oracle {
        mesh: IcosphereMesh,
    }

    impl Predictor for Oracle {
        fn num_classes(&self) -> usize {
            14
        }
        fn output_mesh(&self) -> &IcosphereMesh {
            &self.mesh
        }
        fn predict(&self, s: &SegSample) -> Result<Vec<u32>> {
            Ok(s.labels.clone())
        }
    }

    fn data(mesh: &IcosphereMesh) -> Vec<SegSample> {
        make_synthetic_dataset(mesh, 3, 4, &SceneStyle::default()).unwrap()
    }

    #[test]
    fn rotation_suite_is_a_pure_function_of_seed() {
        let a = stress_rotations(7, 10, 3);
        assert_eq!(a.len(), 30);
        assert_eq!(a, stress_rotations(7, 10, 3));
        assert_ne!(a, stress_rotations(8, 10, 3));
    }

    #[test]
    fn ignore_class_predictor_is_rotation_invariant() {
        let mesh = build_icosphere(3).unwrap();
        let d = data(&mesh);
        let p = Constant { mesh: mesh.clone(), class: 0 };
        let r = stress_test(&p, &d, &stress_rotations(1, 4, 2), 2, 1, String::new()).unwrap();
        assert_eq!(r.base_miou, 0.0);
        assert_eq!(r.so3_miou, r.base_miou);
    }

    #[test]
    fn identity_suite_reproduces_base() {
        let mesh = build_icosphere(3).unwrap();
        let d = data(&mesh);
        let p = Constant { mesh: mesh.clone(), class: 3 };
        let r = stress_test(&p, &d, &vec![Rotation::identity(); 4], 2, 0, String::new()).unwrap();
        assert!((r.so3_miou - r.base_miou).abs() <= 1e-9);
        assert!(r.base_miou > 0.0);
    }

    #[test]
    fn perfect_predictor_scores_100_everywhere() {
        let mesh = build_icosphere(3).unwrap();
        let d = data(&mesh);
        let r = stress_test(&Oracle { mesh: mesh.clone() }, &d, &stress_rotations(2, 3, 1), 1, 2, String::new()).unwrap();
        assert_eq!(r.base_miou, 100.0);
        assert_eq!(r.so3_miou, 100.0);
        assert_eq!(r.per_rotation.len(), 3);
    }

    #[test]
    fn reports_are_bit_identical_and_rank_checked() {
        let cfg = ModelConfig {
            output_rank: 2,
            levels: 1,
            dim: 8,
            heads: 2,
            blocks_per_stage: 1,
            ..ModelConfig::default()
        };
        let model = Model::new(&cfg).unwrap();
        let geo = Geometry::build(&cfg).unwrap();
        let mesh = build_icosphere(2).unwrap();
        let d = data(&mesh);
        let a = stress_model(&model, &geo, &d, 3, 2, 5).unwrap();
        let b = stress_model(&model, &geo, &d, 3, 2, 5).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let wrong = data(&build_icosphere(3).unwrap());
        assert!(matches!(stress_model(&model, &geo, &wrong, 3, 2, 5), Err(Error::Config(_))));
    }
}
