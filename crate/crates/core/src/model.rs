//! U-shaped spherical transformer: token projection, encoder/bottleneck/
//! decoder stages over descending icosphere ranks, per-token logits
//! reprojected to the output rank, and the training objectives.

use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::block::{BlockCache, BlockOptions, BlockShape, RankContext, TransformerBlock};
use crate::config::ModelConfig;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::icosphere::{build_icosphere, IcosphereMesh};
use crate::nn::{Linear, Params};
use crate::so3::RotationMapSet;
use crate::transfer::{RankTransfer, SamplingMode, TiePolicy};

pub const IGNORE_CLASS: u32 = 0;

/// Every mesh, cache and transfer operator a model configuration needs.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub output_mesh: IcosphereMesh,
    /// Output rank to token rank.
    pub token_transfer: RankTransfer,
    pub mode: SamplingMode,
    contexts: Vec<Option<RankContext>>,
    transfers: Vec<Option<RankTransfer>>,
    token_position: Array2<f64>,
}

impl Geometry {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        Self::build_with_ties(cfg, TiePolicy::default())
    }

    /// As [`Geometry::build`] with an explicit parent tie policy.
    pub fn build_with_ties(cfg: &ModelConfig, ties: TiePolicy) -> Result<Self> {
        cfg.validate()?;
        let t = cfg.token_rank();
        let bottom = cfg.bottom_rank();
        let output_mesh = build_icosphere(cfg.output_rank)?;
        let mut contexts: Vec<Option<RankContext>> = vec![None; t + 1];
        for (r, slot) in contexts.iter_mut().enumerate().skip(bottom) {
            *slot = Some(RankContext::build(r, cfg.anchors, cfg.radial_bins, cfg.fourier_order)?);
        }
        let make = |fine: &IcosphereMesh, coarse: &IcosphereMesh| {
            RankTransfer::with_options(fine, coarse, cfg.sigma.unwrap_or_else(|| coarse.mean_edge_length()), ties)
        };
        let mut transfers: Vec<Option<RankTransfer>> = vec![None; t + 1];
        for r in (bottom + 1)..=t {
            let fine = &contexts[r].as_ref().unwrap().mesh;
            let coarse = &contexts[r - 1].as_ref().unwrap().mesh;
            transfers[r] = Some(make(fine, coarse)?);
        }
        let token_mesh = &contexts[t].as_ref().unwrap().mesh;
        let token_transfer = make(&output_mesh, token_mesh)?;
        let lat = token_mesh.latitudes();
        let token_position = Array2::from_shape_fn((lat.len(), 2), |(i, c)| if c == 0 { lat[i].sin() } else { lat[i].cos() });
        Ok(Self {
            output_mesh,
            token_transfer,
            mode: if cfg.geo_sampling { SamplingMode::Geometric } else { SamplingMode::Naive },
            contexts,
            transfers,
            token_position,
        })
    }

    pub fn output_rank(&self) -> usize {
        self.output_mesh.rank
    }

    pub fn token_rank(&self) -> usize {
        self.token_transfer.coarse_rank
    }

    pub fn context(&self, rank: usize) -> Result<&RankContext> {
        self.contexts
            .get(rank)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Config(format!("no geometric cache for rank {rank}")))
    }

    /// Transfer from `fine_rank` to `fine_rank − 1`.
    pub fn transfer(&self, fine_rank: usize) -> Result<&RankTransfer> {
        self.transfers
            .get(fine_rank)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Config(format!("no transfer from rank {fine_rank}")))
    }

    pub fn token_mesh(&self) -> &IcosphereMesh {
        &self.contexts[self.token_rank()].as_ref().unwrap().mesh
    }

    /// Downsample an output-rank field to the token rank.
    pub fn tokens_from_output(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.output_mesh.len() {
            return Err(Error::Config(format!(
                "field has {} nodes, output rank {} has {}",
                x.nrows(),
                self.output_rank(),
                self.output_mesh.len()
            )));
        }
        Ok(self.token_transfer.down_operator(self.mode).apply(x))
    }
}

/// Activations retained by [`Model::forward`] for the backward pass.
pub struct Tape {
    embed_in: Array2<f64>,
    encoder: Vec<Vec<BlockCache>>,
    bottleneck: Vec<BlockCache>,
    fuse_in: Vec<Array2<f64>>,
    decoder: Vec<Vec<BlockCache>>,
    head_in: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    embed: Linear,
    encoder: Vec<Vec<TransformerBlock>>,
    bottleneck: Vec<TransformerBlock>,
    fuse: Vec<Linear>,
    decoder: Vec<Vec<TransformerBlock>>,
    head: Linear,
}

impl Model {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = Params::new();
        let shape = BlockShape {
            dim: config.dim,
            heads: config.heads,
            order: config.fourier_order,
            bins: config.radial_bins,
            init_log_scale: config.init_log_scale,
        };
        let options = BlockOptions {
            quadrature: config.quadrature_attn,
            gauge_bias: config.gauge_bias,
        };
        let d = config.dim;
        let in_dim = config.in_channels + if config.abs_lat_pe { 2 } else { 0 };
        let embed = Linear::new(&mut p, "embed", in_dim, d, true, &mut rng);
        let stage = |p: &mut Params, name: &str, rng: &mut ChaCha8Rng| -> Result<Vec<TransformerBlock>> {
            (0..config.blocks_per_stage)
                .map(|b| TransformerBlock::new(p, &format!("{name}.{b}"), shape, options, rng))
                .collect()
        };
        let mut encoder = Vec::new();
        for l in 0..config.levels {
            encoder.push(stage(&mut p, &format!("enc{l}"), &mut rng)?);
        }
        let bottleneck = stage(&mut p, "bottleneck", &mut rng)?;
        let mut fuse = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..config.levels {
            fuse.push(Linear::new(&mut p, &format!("dec{l}.fuse"), 2 * d, d, true, &mut rng));
            decoder.push(stage(&mut p, &format!("dec{l}"), &mut rng)?);
        }
        let head = Linear::new(&mut p, "head", d, config.num_classes, true, &mut rng);
        Ok(Self {
            config: config.clone(),
            params: p,
            embed,
            encoder,
            bottleneck,
            fuse,
            decoder,
            head,
        })
    }

    /// Model with the layout implied by `config` and the given values.
    pub fn with_values(config: &ModelConfig, values: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(config)?;
        if values.len() != m.params.len() {
            return Err(Error::Format(format!("expected {} parameters, got {}", m.params.len(), values.len())));
        }
        m.params.values = values;
        Ok(m)
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    fn layout(&self) -> (usize, usize) {
        (self.config.token_rank(), self.config.levels)
    }

    /// Append position channels (when enabled) and embed to `D`.
    /// Returns the embedding and the embedding layer's input.
    pub fn project_tokens(&self, geo: &Geometry, x0: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if x0.nrows() != geo.token_mesh().len() {
            return Err(Error::Config(format!(
                "token field has {} nodes, rank {} has {}",
                x0.nrows(),
                geo.token_rank(),
                geo.token_mesh().len()
            )));
        }
        if x0.ncols() != self.config.in_channels {
            return Err(Error::Data(format!("expected {} input channels, got {}", self.config.in_channels, x0.ncols())));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("token features contain non-finite values".into()));
        }
        let embed_in = if self.config.abs_lat_pe {
            concatenate![Axis(1), x0, geo.token_position.view()]
        } else {
            x0.to_owned()
        };
        Ok((self.embed.forward(&self.params, embed_in.view()), embed_in))
    }

    /// Gradient of the token projection with respect to the raw tokens.
    pub fn project_tokens_backward(&self, embed_in: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, grads: &mut [f64]) -> Array2<f64> {
        let dx = self.embed.backward(&self.params, embed_in, dy, grads);
        dx.slice(s![.., ..self.config.in_channels]).to_owned()
    }


    fn check_geometry(&self, geo: &Geometry) -> Result<()> {
        if geo.output_rank() != self.config.output_rank || geo.token_rank() != self.config.token_rank() {
            return Err(Error::Config(format!(
                "geometry is for output rank {}, model expects {}",
                geo.output_rank(),
                self.config.output_rank
            )));
        }
        Ok(())
    }

    /// Logits at the output rank for raw token features `x0` (`L_tok × C_in`).
    pub fn forward(&self, geo: &Geometry, x0: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_geometry(geo)?;
        let p = &self.params;
        let (t, levels) = self.layout();
        let mode = geo.mode;
        let (mut h, embed_in) = self.project_tokens(geo, x0)?;

        let mut encoder = Vec::with_capacity(levels);
        let mut skips = Vec::with_capacity(levels);
        for (l, blocks) in self.encoder.iter().enumerate() {
            let ctx = geo.context(t - l)?;
            let mut caches = Vec::with_capacity(blocks.len());
            for b in blocks {
                let (y, c) = b.forward(p, ctx, h.view())?;
                h = y;
                caches.push(c);
            }
            encoder.push(caches);
            let down = geo.transfer(t - l)?.down_operator(mode).apply(h.view());
            skips.push(std::mem::replace(&mut h, down));
        }

        let bottom = geo.context(t - levels)?;
        let mut bottleneck = Vec::with_capacity(self.bottleneck.len());
        for b in &self.bottleneck {
            let (y, c) = b.forward(p, bottom, h.view())?;
            h = y;
            bottleneck.push(c);
        }

        let mut fuse_in: Vec<Array2<f64>> = (0..levels).map(|_| Array2::zeros((0, 0))).collect();
        let mut decoder: Vec<Vec<BlockCache>> = (0..levels).map(|_| Vec::new()).collect();
        for l in (0..levels).rev() {
            let ctx = geo.context(t - l)?;
            let up = geo.transfer(t - l)?.up_operator(mode).apply(h.view());
            let cat = concatenate![Axis(1), up, skips[l]];
            h = self.fuse[l].forward(p, cat.view());
            fuse_in[l] = cat;
            for b in &self.decoder[l] {
                let (y, c) = b.forward(p, ctx, h.view())?;
                h = y;
                decoder[l].push(c);
            }
        }

        let token_logits = self.head.forward(p, h.view());
        let logits = geo.token_transfer.up_operator(mode).apply(token_logits.view());
        Ok((
            logits,
            Tape {
                embed_in,
                encoder,
                bottleneck,
                fuse_in,
                decoder,
                head_in: h,
            },
        ))
    }

    /// Accumulate `∂L/∂θ` into `grads` given `∂L/∂logits`; returns `∂L/∂x0`.
    pub fn backward(&self, geo: &Geometry, tape: &Tape, dlogits: ArrayView2<'_, f64>, grads: &mut [f64]) -> Result<Array2<f64>> {
        let p = &self.params;
        let (t, levels) = self.layout();
        let mode = geo.mode;
        let d = self.config.dim;
        let dtok = geo.token_transfer.up_operator(mode).apply_transpose(dlogits);
        let mut dh = self.head.backward(p, tape.head_in.view(), dtok.view(), grads);

        let mut dskips: Vec<Array2<f64>> = Vec::with_capacity(levels);
        for l in 0..levels {
            let ctx = geo.context(t - l)?;
            for (b, c) in self.decoder[l].iter().zip(&tape.decoder[l]).rev() {
                dh = b.backward(p, ctx, c, dh.view(), grads)?;
            }
            let dcat = self.fuse[l].backward(p, tape.fuse_in[l].view(), dh.view(), grads);
            dskips.push(dcat.slice(s![.., d..]).to_owned());
            dh = geo.transfer(t - l)?.up_operator(mode).apply_transpose(dcat.slice(s![.., ..d]));
        }

        let bottom = geo.context(t - levels)?;
        for (b, c) in self.bottleneck.iter().zip(&tape.bottleneck).rev() {
            dh = b.backward(p, bottom, c, dh.view(), grads)?;
        }

        for l in (0..levels).rev() {
            let ctx = geo.context(t - l)?;
            dh = geo.transfer(t - l)?.down_operator(mode).apply_transpose(dh.view()) + &dskips[l];
            for (b, c) in self.encoder[l].iter().zip(&tape.encoder[l]).rev() {
                dh = b.backward(p, ctx, c, dh.view(), grads)?;
            }
        }
        Ok(self.project_tokens_backward(tape.embed_in.view(), dh.view(), grads))
    }

    pub fn logits(&self, geo: &Geometry, x0: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(geo, x0)?.0)
    }

    /// Per-node argmax class at the output rank (ties to the lowest class).
    pub fn predict(&self, geo: &Geometry, x0: ArrayView2<'_, f64>) -> Result<Vec<u32>> {
        Ok(argmax_rows(self.logits(geo, x0)?.view()))
    }

    /// Consistency loss value for one rotation.
    pub fn eq_loss(&self, geo: &Geometry, x0: ArrayView2<'_, f64>, maps: &RotationMapSet) -> Result<f64> {
        let z = self.logits(geo, x0)?;
        let z_rot = self.logits(geo, gather_rows(x0, &maps.idx_proj)?.view())?;
        Ok(consistency_loss(z.view(), z_rot.view(), &maps.idx_img)?.0)
    }

    /// Consistency loss with gradients accumulated into `grads`. The target
    /// branch is treated as a constant.
    pub fn eq_loss_grad(&self, geo: &Geometry, x0: ArrayView2<'_, f64>, maps: &RotationMapSet, grads: &mut [f64]) -> Result<f64> {
        let z = self.logits(geo, x0)?;
        let (value, _) = self.eq_term_grad(geo, x0, z.view(), maps, 1.0, grads)?;
        Ok(value)
    }

    fn eq_term_grad(
        &self,
        geo: &Geometry,
        x0: ArrayView2<'_, f64>,
        z: ArrayView2<'_, f64>,
        maps: &RotationMapSet,
        weight: f64,
        grads: &mut [f64],
    ) -> Result<(f64, Array2<f64>)> {
        let x_rot = gather_rows(x0, &maps.idx_proj)?;
        let (z_rot, tape) = self.forward(geo, x_rot.view())?;
        let (value, dz) = consistency_loss(z, z_rot.view(), &maps.idx_img)?;
        let dx = self.backward(geo, &tape, (dz * weight).view(), grads)?;
        Ok((value, dx))
    }

    /// `L_seg + λ·L_eq` for one sample, with gradients accumulated into
    /// `grads`. The consistency term is skipped when `maps` is `None`.
    pub fn sample_loss_grad(
        &self,
        geo: &Geometry,
        x0: ArrayView2<'_, f64>,
        labels: &[u32],
        maps: Option<&RotationMapSet>,
        grads: &mut [f64],
    ) -> Result<SampleLoss> {
        let (z, tape) = self.forward(geo, x0)?;
        let seg = seg_loss(z.view(), labels)?;
        self.backward(geo, &tape, seg.grad.view(), grads)?;
        let eq = match maps {
            Some(m) => self.eq_term_grad(geo, x0, z.view(), m, self.config.lambda_eq, grads)?.0,
            None => 0.0,
        };
        Ok(SampleLoss {
            seg: seg.loss,
            eq,
            total: total_loss(seg.loss, eq, self.config.lambda_eq)?,
            valid_nodes: seg.valid_nodes,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleLoss {
    pub seg: f64,
    pub eq: f64,
    pub total: f64,
    pub valid_nodes: usize,
}

pub fn argmax_rows(x: ArrayView2<'_, f64>) -> Vec<u32> {
    x.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (c, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

/// `out[i] = x[idx[i]]`.
pub fn gather_rows(x: ArrayView2<'_, f64>, idx: &[u32]) -> Result<Array2<f64>> {
    if idx.len() != x.nrows() || idx.iter().any(|&j| j as usize >= x.nrows()) {
        return Err(Error::Config(format!("index map of length {} does not fit {} rows", idx.len(), x.nrows())));
    }
    let idx: Vec<usize> = idx.iter().map(|&j| j as usize).collect();
    Ok(x.select(Axis(0), &idx))
}

#[derive(Clone, Debug)]
pub struct SegLoss {
    pub loss: f64,
    pub valid_nodes: usize,
    /// `∂loss/∂logits`.
    pub grad: Array2<f64>,
}

impl SegLoss {
    pub fn no_valid_nodes(&self) -> bool {
        self.valid_nodes == 0
    }
}

/// Mean cross-entropy over nodes whose label is not [`IGNORE_CLASS`].
pub fn seg_loss(logits: ArrayView2<'_, f64>, labels: &[u32]) -> Result<SegLoss> {
    let (l, c) = logits.dim();
    if labels.len() != l {
        return Err(Error::Data(format!("{} labels for {l} nodes", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y as usize >= c) {
        return Err(Error::Data(format!("label {bad} outside [0, {c})")));
    }
    let valid = labels.iter().filter(|&&y| y != IGNORE_CLASS).count();
    let mut grad = Array2::zeros((l, c));
    if valid == 0 {
        return Ok(SegLoss {
            loss: 0.0,
            valid_nodes: 0,
            grad,
        });
    }
    let inv = 1.0 / valid as f64;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y == IGNORE_CLASS {
            continue;
        }
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        total += max + sum.ln() - row[y as usize];
        let mut g = grad.row_mut(i);
        for (k, v) in row.iter().enumerate() {
            g[k] = (v - max).exp() / sum * inv;
        }
        g[y as usize] -= inv;
    }
    Ok(SegLoss {
        loss: total * inv,
        valid_nodes: valid,
        grad,
    })
}

/// `mean((z_rot − z[idx_img])²)` over all elements, with `z` held constant.
/// Returns the value and `∂/∂z_rot`.
pub fn consistency_loss(z: ArrayView2<'_, f64>, z_rot: ArrayView2<'_, f64>, idx_img: &[u32]) -> Result<(f64, Array2<f64>)> {
    if z.dim() != z_rot.dim() {
        return Err(Error::Config(format!("logit shapes differ: {:?} vs {:?}", z.dim(), z_rot.dim())));
    }
    let target = gather_rows(z, idx_img)?;
    let diff = &z_rot - &target;
    let n = diff.len() as f64;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((value, diff * (2.0 / n)))
}

pub fn total_loss(seg: f64, eq: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Precondition(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(seg + lambda * eq)
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, cfg: &ModelConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Position of a `ChaCha8Rng` stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Adam,
    pub rng: RngState,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        let optimizer = Adam::new(model.params.len(), &model.config);
        let rng = RngState {
            seed: model.config.seed,
            word_pos: 0,
        };
        Self {
            model,
            optimizer,
            rng,
            step: 0,
        }
    }

    pub fn to_container(&self) -> Container {
        let cfg = &self.model.config;
        let mut c = Container::new(
            "checkpoint",
            json!({
                "config": cfg,
                "step": self.step,
                "rng": {"seed": self.rng.seed, "word_pos": self.rng.word_pos.to_string()},
                "adam_step": self.optimizer.step,
            }),
        );
        let p = &self.model.params;
        for spec in p.specs() {
            let values = p.values[spec.offset..spec.offset + spec.numel()].to_vec();
            c.push_f64(&format!("param/{}", spec.name), &spec.shape, values);
        }
        c.push_f64("adam/m", &[p.len()], self.optimizer.m.clone());
        c.push_f64("adam/v", &[p.len()], self.optimizer.v.clone());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("checkpoint")?;
        let bad = |what: &str| Error::Format(format!("checkpoint manifest is missing {what}"));
        let config: ModelConfig =
            serde_json::from_value(c.meta.get("config").cloned().ok_or_else(|| bad("config"))?).map_err(|e| Error::Format(e.to_string()))?;
        let mut model = Model::new(&config)?;
        let specs = model.params.specs().to_vec();
        for spec in &specs {
            let (shape, values) = c.f64(&format!("param/{}", spec.name))?;
            if shape != spec.shape.as_slice() {
                return Err(Error::Format(format!("parameter {} has shape {shape:?}, expected {:?}", spec.name, spec.shape)));
            }
            model.params.values[spec.offset..spec.offset + spec.numel()].copy_from_slice(values);
        }
        let mut optimizer = Adam::new(model.params.len(), &config);
        optimizer.m = c.f64("adam/m")?.1.to_vec();
        optimizer.v = c.f64("adam/v")?.1.to_vec();
        if optimizer.m.len() != model.params.len() || optimizer.v.len() != model.params.len() {
            return Err(Error::Format("optimizer state has the wrong length".into()));
        }
        optimizer.step = c.meta["adam_step"].as_u64().ok_or_else(|| bad("adam_step"))?;
        let rng = RngState {
            seed: c.meta["rng"]["seed"].as_u64().ok_or_else(|| bad("rng seed"))?,
            word_pos: c.meta["rng"]["word_pos"]
                .as_str()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("rng position"))?,
        };
        let step = c.meta["step"].as_u64().ok_or_else(|| bad("step"))?;
        Ok(Self {
            model,
            optimizer,
            rng,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
