use serde::{Deserialize, Serialize};

use crate::act_st::ActConfig;
use crate::datagen::DataKind;
use crate::density::DensityKind;
use crate::error::{Error, Result};
use crate::filtering::{BceScale, FilterConfig, FilterKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlf,
    Af,
    ActSt,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlf" => Ok(Self::Mlf),
            "af" => Ok(Self::Af),
            "act-st" => Ok(Self::ActSt),
            other => Err(Error::Config(format!("unknown model '{other}' (expected mlf, af or act-st)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mlf => "mlf",
            Self::Af => "af",
            Self::ActSt => "act-st",
        }
    }
}

/// Everything needed to rebuild and retrain a model. Stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub kind: DataKind,
    pub density: DensityKind,
    pub n_max: usize,
    pub k_max: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Datasets per forward/backward pass; gradients are accumulated across the batch.
    pub micro_batch: usize,
    pub dim: usize,
    pub heads: usize,
    pub inducing: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    #[serde(default)]
    pub bce_scale: BceScale,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Mlf,
            kind: DataKind::Mog,
            density: DensityKind::Gaussian,
            n_max: 1000,
            k_max: 4,
            steps: 20_000,
            batch: 100,
            lr: 5e-4,
            seed: 0,
            micro_batch: 10,
            dim: 128,
            heads: 4,
            inducing: 32,
            encoder_depth: 4,
            decoder_depth: 2,
            bce_scale: BceScale::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 || self.micro_batch == 0 {
            return bad("batch and micro-batch must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.n_max < 4 || self.k_max == 0 {
            return bad(format!("need n_max ≥ 4 and k_max ≥ 1, got ({}, {})", self.n_max, self.k_max));
        }
        match self.model {
            ModelKind::ActSt if self.density != DensityKind::Gaussian => {
                return bad("act-st always fits a Gaussian mixture; use --density gaussian".into())
            }
            ModelKind::ActSt if self.kind != DataKind::Mog => return bad("act-st is only defined for mog data".into()),
            _ => {}
        }
        match self.model {
            ModelKind::ActSt => self.act_config().validate(),
            _ => self.filter_config().validate(),
        }
    }

    pub fn filter_config(&self) -> FilterConfig {
        let kind = if self.model == ModelKind::Af { FilterKind::Af } else { FilterKind::Mlf };
        FilterConfig {
            dim: self.dim,
            heads: self.heads,
            inducing: self.inducing,
            encoder_depth: self.encoder_depth,
            decoder_depth: self.decoder_depth,
            bce_scale: self.bce_scale,
            ..FilterConfig::new(kind, self.density)
        }
    }

    pub fn act_config(&self) -> ActConfig {
        ActConfig {
            dim: self.dim,
            heads: self.heads,
            inducing: self.inducing,
            encoder_depth: self.encoder_depth,
            decoder_depth: self.decoder_depth,
            k_max: self.k_max,
        }
    }

    /// Flat description for logs and reports.
    pub fn describe(&self) -> Vec<(String, String)> {
        let v = serde_json::to_value(self).expect("config serialises");
        v.as_object()
            .map(|o| o.iter().map(|(k, v)| (k.clone(), v.as_str().map_or_else(|| v.to_string(), str::to_string))).collect())
            .unwrap_or_default()
    }
}
