//! Experiment configuration: architecture, ablation flags, optimizer and
//! training schedule in one flat TOML table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icosphere::DEFAULT_MAX_RANK;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YawAugmentation {
    Off,
    /// Uniform yaw quantized to 1° bins, applied through nearest-neighbor maps.
    Continuous,
    /// Only yaws that map the mesh onto itself (0° and 180°), applied exactly.
    Aligned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub output_rank: usize,
    /// Number of encoder/decoder stages below the token rank.
    pub levels: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub fourier_order: usize,
    pub radial_bins: usize,
    pub anchors: usize,
    pub init_log_scale: f64,
    /// Upsampling kernel bandwidth in radians; the mean coarse edge length
    /// when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,

    pub abs_lat_pe: bool,
    pub quadrature_attn: bool,
    pub gauge_bias: bool,
    pub geo_sampling: bool,
    pub l_eq: bool,
    pub lambda_eq: f64,

    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub yaw_aug: YawAugmentation,
    pub flip_aug: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            output_rank: 5,
            levels: 3,
            dim: 32,
            heads: 4,
            blocks_per_stage: 2,
            num_classes: 14,
            in_channels: 3,
            fourier_order: 6,
            radial_bins: 16,
            anchors: 3,
            init_log_scale: 10f64.ln(),
            sigma: None,
            abs_lat_pe: false,
            quadrature_attn: true,
            gauge_bias: true,
            geo_sampling: true,
            l_eq: true,
            lambda_eq: 0.05,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 100,
            batch_size: 8,
            yaw_aug: YawAugmentation::Continuous,
            flip_aug: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn token_rank(&self) -> usize {
        self.output_rank.saturating_sub(1)
    }

    /// Rank of the bottleneck stage.
    pub fn bottom_rank(&self) -> usize {
        self.token_rank().saturating_sub(self.levels)
    }

    /// Ranks visited by the backbone, token rank first.
    pub fn stage_ranks(&self) -> Vec<usize> {
        (0..=self.levels).map(|l| self.token_rank() - l).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.output_rank == 0 || self.output_rank > DEFAULT_MAX_RANK {
            return fail(format!("output_rank must be in 1..={DEFAULT_MAX_RANK}, got {}", self.output_rank));
        }
        if self.levels > self.token_rank() {
            return fail(format!("levels {} exceeds token rank {}", self.levels, self.token_rank()));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.num_classes < 2 || self.in_channels == 0 {
            return fail("num_classes must be ≥ 2 and in_channels ≥ 1".into());
        }
        if self.radial_bins == 0 || self.anchors == 0 {
            return fail("radial_bins and anchors must be positive".into());
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return fail(format!("sigma must be positive, got {s}"));
            }
        }
        if !(self.lambda_eq >= 0.0) || !(self.learning_rate >= 0.0) {
            return fail("lambda_eq and learning_rate must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return fail("adam betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// TOML rendering; an unset `sigma` appears as a comment.
    pub fn to_toml_string(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        if self.sigma.is_some() {
            return text;
        }
        text.lines()
            .flat_map(|l| {
                let extra = l.starts_with("init_log_scale").then_some("# sigma = <radians; unset uses the mean coarse edge length>");
                std::iter::once(l).chain(extra)
            })
            .map(|l| format!("{l}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ModelConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        assert_eq!(ModelConfig::from_toml_str("").unwrap(), cfg);
        assert_eq!(cfg.stage_ranks(), vec![4, 3, 2, 1]);
        assert_eq!(cfg.bottom_rank(), 1);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = ModelConfig::from_toml_str("output_rank = 3\nlevels = 2\nabs_lat_pe = true\nyaw_aug = \"aligned\"\n").unwrap();
        assert_eq!(cfg.token_rank(), 2);
        assert!(cfg.abs_lat_pe);
        assert_eq!(cfg.yaw_aug, YawAugmentation::Aligned);
        assert_eq!(cfg.dim, 32);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["levels = 9", "dim = 30", "bogus = 1", "sigma = -1.0", "output_rank = 8", "num_classes = 1"] {
            assert!(matches!(ModelConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }
}
