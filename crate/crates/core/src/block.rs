//! Pre-norm transformer block on one icosphere rank, and the per-rank
//! geometric tables it reads.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::attention::{AttentionParams, AttentionState, OMEGA_FLOOR};
use crate::error::Result;
use crate::gauge_bias::{accumulate_bias_gradients, eval_bias_with_basis, BiasCoeffs, PooledBasis};
use crate::geometry::{build_geodesic_cache, GeodesicCache};
use crate::icosphere::{build_icosphere, build_neighbor_table, IcosphereMesh, NeighborTable};
use crate::nn::{gelu, gelu_grad, Init, LayerNorm, LayerNormCache, Linear, ParamId, Params};

/// Immutable geometry of one rank: mesh, neighborhoods, geodesic cache,
/// pooled Fourier basis and log area weights.
#[derive(Clone, Debug)]
pub struct RankContext {
    pub mesh: IcosphereMesh,
    pub table: NeighborTable,
    pub cache: GeodesicCache,
    pub basis: PooledBasis,
    pub log_omega: Vec<f64>,
    zero_log_omega: Vec<f64>,
}

impl RankContext {
    pub fn build(rank: usize, anchors: usize, bins: usize, order: usize) -> Result<Self> {
        Self::from_mesh(build_icosphere(rank)?, anchors, bins, order)
    }

    pub fn from_mesh(mesh: IcosphereMesh, anchors: usize, bins: usize, order: usize) -> Result<Self> {
        let table = build_neighbor_table(&mesh);
        let cache = build_geodesic_cache(&mesh, &table, anchors, bins)?;
        let basis = PooledBasis::new(&cache, order);
        let log_omega = mesh.area_weights.iter().map(|w| w.max(OMEGA_FLOOR).ln()).collect();
        let zero_log_omega = vec![0.0; mesh.len()];
        Ok(Self {
            mesh,
            table,
            cache,
            basis,
            log_omega,
            zero_log_omega,
        })
    }

    pub fn len(&self) -> usize {
        self.mesh.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mesh.is_empty()
    }

    /// `log ω`, or zeros when the quadrature correction is disabled.
    pub fn quadrature_term(&self, enabled: bool) -> &[f64] {
        if enabled {
            &self.log_omega
        } else {
            &self.zero_log_omega
        }
    }
}

/// Which optional attention terms a block uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockOptions {
    pub quadrature: bool,
    pub gauge_bias: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct BiasParams {
    pub cos_coeffs: ParamId,
    pub sin_coeffs: ParamId,
    pub heads: usize,
    pub order: usize,
    pub bins: usize,
}

impl BiasParams {
    fn coeffs<'a>(&self, p: &'a Params) -> BiasCoeffs<'a> {
        BiasCoeffs {
            heads: self.heads,
            order: self.order,
            bins: self.bins,
            cos_coeffs: p.slice(self.cos_coeffs),
            sin_coeffs: p.slice(self.sin_coeffs),
        }
    }
}

/// `x ← x + Attn(LN(x))`, then `x ← x + MLP(LN(x))` with a `D → 2D → D`
/// GELU MLP.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: AttentionParams,
    pub bias: Option<BiasParams>,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub options: BlockOptions,
}

pub struct BlockCache {
    n1: LayerNormCache,
    attn: AttentionState,
    n2: LayerNormCache,
    h2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

/// Sizes shared by every block of a model.
#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub dim: usize,
    pub heads: usize,
    pub order: usize,
    pub bins: usize,
    pub init_log_scale: f64,
}

impl TransformerBlock {
    pub fn new<R: Rng>(p: &mut Params, name: &str, shape: BlockShape, options: BlockOptions, rng: &mut R) -> Result<Self> {
        let d = shape.dim;
        let norm1 = LayerNorm::new(p, &format!("{name}.norm1"), d, rng);
        let attn = AttentionParams::new(p, &format!("{name}.attn"), d, shape.heads, shape.init_log_scale, rng)?;
        let bias = options.gauge_bias.then(|| {
            let dims = [shape.heads, shape.order + 1, shape.bins];
            BiasParams {
                cos_coeffs: p.add(format!("{name}.bias.cos"), &dims, Init::Zeros, rng),
                sin_coeffs: p.add(format!("{name}.bias.sin"), &dims, Init::Zeros, rng),
                heads: shape.heads,
                order: shape.order,
                bins: shape.bins,
            }
        });
        let norm2 = LayerNorm::new(p, &format!("{name}.norm2"), d, rng);
        let fc1 = Linear::new(p, &format!("{name}.mlp.fc1"), d, 2 * d, true, rng);
        let fc2 = Linear::new(p, &format!("{name}.mlp.fc2"), 2 * d, d, true, rng);
        Ok(Self {
            norm1,
            attn,
            bias,
            norm2,
            fc1,
            fc2,
            options,
        })
    }

    pub fn forward(&self, p: &Params, ctx: &RankContext, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, BlockCache)> {
        let (h1, n1) = self.norm1.forward(p, x);
        let bias = match &self.bias {
            Some(b) => eval_bias_with_basis(b.coeffs(p), &ctx.cache, &ctx.basis)?,
            None => Vec::new(),
        };
        let (a, attn) = self
            .attn
            .forward(p, h1.view(), &ctx.table, &bias, ctx.quadrature_term(self.options.quadrature));
        let x1 = &x + &a;
        let (h2, n2) = self.norm2.forward(p, x1.view());
        let pre_act = self.fc1.forward(p, h2.view());
        let act = pre_act.mapv(gelu);
        let out = x1 + self.fc2.forward(p, act.view());
        Ok((
            out,
            BlockCache {
                n1,
                attn,
                n2,
                h2,
                pre_act,
                act,
            },
        ))
    }

    pub fn backward(
        &self,
        p: &Params,
        ctx: &RankContext,
        cache: &BlockCache,
        upstream: ArrayView2<'_, f64>,
        grads: &mut [f64],
    ) -> Result<Array2<f64>> {
        let dact = self.fc2.backward(p, cache.act.view(), upstream, grads);
        let dpre = dact * &cache.pre_act.mapv(gelu_grad);
        let dh2 = self.fc1.backward(p, cache.h2.view(), dpre.view(), grads);
        let dx1 = &upstream + &self.norm2.backward(p, &cache.n2, dh2.view(), grads);
        let ag = self.attn.backward(p, &cache.attn, &ctx.table, dx1.view(), grads);
        if let Some(b) = &self.bias {
            let mut gc = vec![0.0; p.spec(b.cos_coeffs).numel()];
            let mut gs = vec![0.0; gc.len()];
            accumulate_bias_gradients(b.coeffs(p), &ctx.cache, &ctx.basis, &ag.bias, &mut gc, &mut gs)?;
            for (dst, src) in grads[p.range(b.cos_coeffs)].iter_mut().zip(&gc) {
                *dst += src;
            }
            for (dst, src) in grads[p.range(b.sin_coeffs)].iter_mut().zip(&gs) {
                *dst += src;
            }
        }
        let dx = dx1 + self.norm1.backward(p, &cache.n1, ag.input.view(), grads);
        Ok(dx)
    }

    /// The block's attention-logit bias, `L × K × H` (empty when disabled).
    pub fn bias_tensor(&self, p: &Params, ctx: &RankContext) -> Result<Vec<f64>> {
        match &self.bias {
            Some(b) => eval_bias_with_basis(b.coeffs(p), &ctx.cache, &ctx.basis),
            None => Ok(Vec::new()),
        }
    }
}
