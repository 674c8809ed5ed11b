//! Deterministic single-process training loop.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, YawAugmentation};
use crate::error::{Error, Result};
use crate::harness::dataset::SegSample;
use crate::harness::metrics::{Confusion, MiouResult};
use crate::icosphere::IcosphereMesh;
use crate::model::{Checkpoint, Geometry, Model, RngState, SampleLoss};
use crate::so3::{build_rotation_maps, mirror_index_map, nn_index_map, sample_rotation_uniform, Rotation};

/// Offset separating the training stream from the initialization stream.
const TRAIN_STREAM: u64 = 0x7a1e_5eed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub seg_loss: f64,
    pub eq_loss: f64,
    pub total_loss: f64,
    pub val_miou: Option<f64>,
    pub wall_time_s: f64,
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Yaw and mirror index maps on the output mesh, built lazily and shared.
pub struct Augmenter<'a> {
    mesh: &'a IcosphereMesh,
    mode: YawAugmentation,
    flip: bool,
    yaw: Vec<OnceLock<Vec<u32>>>,
    mirror: OnceLock<Vec<u32>>,
}

/// One augmentation draw: yaw in whole degrees and an optional mirror.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub yaw_deg: u32,
    pub flip: bool,
}

impl<'a> Augmenter<'a> {
    pub fn new(mesh: &'a IcosphereMesh, mode: YawAugmentation, flip: bool) -> Self {
        Self {
            mesh,
            mode,
            flip,
            yaw: (0..360).map(|_| OnceLock::new()).collect(),
            mirror: OnceLock::new(),
        }
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> AugmentDraw {
        let yaw_deg = match self.mode {
            YawAugmentation::Off => 0,
            YawAugmentation::Continuous => rng.random_range(0..360),
            YawAugmentation::Aligned => 180 * rng.random_range(0..2),
        };
        let flip = self.flip && rng.random::<bool>();
        AugmentDraw { yaw_deg, flip }
    }

    pub fn yaw_map(&self, deg: u32) -> &[u32] {
        self.yaw[deg as usize % 360].get_or_init(|| nn_index_map(&Rotation::yaw((deg as f64).to_radians()), self.mesh))
    }

    pub fn mirror_map(&self) -> &[u32] {
        self.mirror.get_or_init(|| mirror_index_map(self.mesh))
    }

    pub fn apply(&self, s: &SegSample, d: AugmentDraw) -> SegSample {
        let mut out = if d.yaw_deg == 0 { s.clone() } else { s.reindexed(self.yaw_map(d.yaw_deg)) };
        if d.flip {
            out = out.reindexed(self.mirror_map());
        }
        out
    }
}

fn check_rank(geo: &Geometry, data: &[SegSample]) -> Result<()> {
    let l = geo.output_mesh.len();
    if let Some(s) = data.iter().find(|s| s.labels.len() != l) {
        return Err(Error::Config(format!(
            "dataset has {} nodes per sample but output rank {} has {l}",
            s.labels.len(),
            geo.output_rank()
        )));
    }
    Ok(())
}

/// Aggregate mIoU of `model` over a dataset; evaluation runs in parallel.
pub fn evaluate(model: &Model, geo: &Geometry, data: &[SegSample]) -> Result<MiouResult> {
    check_rank(geo, data)?;
    let preds: Vec<Vec<u32>> = data
        .par_iter()
        .map(|s| model.predict(geo, geo.tokens_from_output(s.features.view())?.view()))
        .collect::<Result<_>>()?;
    let mut c = Confusion::new(model.config.num_classes);
    for (p, s) in preds.iter().zip(data) {
        c.add(p, &s.labels)?;
    }
    Ok(c.result())
}

/// Train from `config.seed`. `val` defaults to the (unaugmented) training
/// set. One JSON record per epoch is written to `log` when given.
pub fn train(config: &ModelConfig, data: &[SegSample], val: Option<&[SegSample]>, log: Option<&mut dyn Write>) -> Result<TrainOutput> {
    let model = Model::new(config)?;
    let geo = Geometry::build(config)?;
    train_from(Checkpoint::new(model), &geo, data, val, log)
}

pub fn train_from(
    mut ckpt: Checkpoint,
    geo: &Geometry,
    data: &[SegSample],
    val: Option<&[SegSample]>,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutput> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for s in data {
        s.validate(ckpt.model.config.num_classes)?;
    }
    check_rank(geo, data)?;
    let cfg = ckpt.model.config.clone();
    let val = val.unwrap_or(data);
    let train_seed = cfg.seed.wrapping_add(TRAIN_STREAM);
    let mut rng = if ckpt.step == 0 {
        ChaCha8Rng::seed_from_u64(train_seed)
    } else {
        ckpt.rng.restore()
    };
    let aug = Augmenter::new(&geo.output_mesh, cfg.yaw_aug, cfg.flip_aug);
    let use_eq = cfg.l_eq && cfg.lambda_eq > 0.0;
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let n_params = ckpt.model.params.len();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut per_sample: Vec<Option<SampleLoss>> = vec![None; data.len()];
        for batch in order.chunks(cfg.batch_size) {
            let draws: Vec<AugmentDraw> = batch.iter().map(|_| aug.draw(&mut rng)).collect();
            let maps = use_eq.then(|| {
                let r = sample_rotation_uniform(&mut rng);
                build_rotation_maps(r, geo.token_mesh(), &geo.output_mesh)
            });
            let model = &ckpt.model;
            let results: Vec<(Vec<f64>, SampleLoss)> = batch
                .par_iter()
                .zip(&draws)
                .map(|(&i, &d)| {
                    let s = aug.apply(&data[i], d);
                    let x0 = geo.tokens_from_output(s.features.view())?;
                    let mut g = vec![0.0; n_params];
                    let loss = model.sample_loss_grad(geo, x0.view(), &s.labels, maps.as_ref(), &mut g)?;
                    Ok((g, loss))
                })
                .collect::<Result<_>>()?;
            let mut grads = vec![0.0; n_params];
            for ((g, loss), &i) in results.iter().zip(batch) {
                if !loss.total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at epoch {epoch}, step {}: sample {i}, seg {}, eq {}",
                        ckpt.step, loss.seg, loss.eq
                    )));
                }
                for (a, b) in grads.iter_mut().zip(g) {
                    *a += b;
                }
                per_sample[i] = Some(*loss);
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
                let name = ckpt.model.params.specs().iter().find(|s| (s.offset..s.offset + s.numel()).contains(&k));
                return Err(Error::Numerical(format!(
                    "non-finite gradient at epoch {epoch}, step {} in parameter {}",
                    ckpt.step,
                    name.map_or("?", |s| s.name.as_str())
                )));
            }
            ckpt.optimizer.update(&mut ckpt.model.params.values, &grads);
            ckpt.step += 1;
        }
        let n = data.len() as f64;
        let losses: Vec<SampleLoss> = per_sample.into_iter().map(|l| l.expect("every sample visited")).collect();
        let record = EpochRecord {
            epoch,
            step: ckpt.step,
            seg_loss: losses.iter().map(|l| l.seg).sum::<f64>() / n,
            eq_loss: losses.iter().map(|l| l.eq).sum::<f64>() / n,
            total_loss: losses.iter().map(|l| l.total).sum::<f64>() / n,
            val_miou: evaluate(&ckpt.model, geo, val)?.miou,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&record).expect("record serializes"))?;
        }
        records.push(record);
    }
    ckpt.rng = RngState::capture(train_seed, &rng);
    Ok(TrainOutput { checkpoint: ckpt, log: records })
}
