//! Run configuration: a TOML file with `[dataset]`, `[model]`, `[train]`,
//! `[eval]` and optional `[ablation]` tables.

use std::path::Path;

use goalcast_core::envsim::{DatasetConfig, EnvironmentSpec, SimConfig, FUTURE_LEN, PAST_LEN};
use goalcast_core::metrics::Units;
use goalcast_models::macro_models::LongGoalSpec;
use goalcast_models::micro_model::MicroSpec;
use goalcast_models::unet::UNetSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetProfile {
    pub seed: u64,
    /// Environments in train, val, test.
    pub envs_per_split: [usize; 3],
    pub scenes_per_env: usize,
    pub window_stride: usize,
    pub env_size: usize,
    pub units: Units,
    pub past_len: usize,
    pub future_len: usize,
    /// 1-based future steps used as waypoints; the last future step is
    /// always the long-term goal.
    pub sg_indices: Vec<usize>,
    pub raster_size: usize,
    /// Fixed local-map radius in grid pixels; when absent the radius is 20×
    /// the mean per-step displacement of each window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_radius_px: Option<u32>,
    pub heatmap_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub lg_encoder: Vec<usize>,
    pub lg_decoder: Vec<usize>,
    pub lg_prior_channels: Vec<usize>,
    pub lg_posterior_channels: Vec<usize>,
    pub sg_encoder: Vec<usize>,
    pub sg_decoder: Vec<usize>,
    pub lg_latent: usize,
    pub micro_latent: usize,
    pub micro_enc_hidden: usize,
    pub micro_prior_hidden: usize,
    pub micro_ctx: usize,
    pub micro_dec_hidden: usize,
    /// Total-KL floor of the long-goal CVAE, spread evenly over its latent dims.
    pub lg_free_bits: f64,
    /// Total-KL floor of the trajectory CVAE.
    pub micro_free_bits: f64,
    pub beta: f64,
    pub lr_lg: f64,
    pub lr_sg: f64,
    pub lr_micro: f64,
    pub grad_clip: f64,
    pub anneal_epochs: usize,
    pub pretrain_epochs: usize,
}

/// Input of the waypoint network during its training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SgInput {
    /// Ground-truth long-goal heatmaps.
    Gt,
    /// One prior sample of the trained long-goal model.
    Predicted,
    /// Per sample, either of the above with equal probability.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainProfile {
    pub seed: u64,
    pub batch_size: usize,
    pub lg_epochs: usize,
    pub sg_epochs: usize,
    pub micro_epochs: usize,
    pub sg_input: SgInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProfile {
    pub k: Vec<usize>,
    pub seed: u64,
    /// Multiplier on prior standard deviations at sampling time; 0 gives the
    /// degenerate prior-mean diagnostic.
    pub prior_std_scale: f64,
    /// Fixed KDE bandwidth; Scott's rule when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kde_bandwidth: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    #[serde(default)]
    pub without_sg_net: bool,
    #[serde(default)]
    pub without_micro: bool,
    #[serde(default)]
    pub without_ll_prior: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 3] = ["without_sg_net", "without_micro", "without_ll_prior"];

    /// Enables the named switch.
    pub fn enable(&mut self, name: &str) -> Result<()> {
        match name {
            "without_sg_net" => self.without_sg_net = true,
            "without_micro" => self.without_micro = true,
            "without_ll_prior" => self.without_ll_prior = true,
            "none" | "base" => {}
            other => {
                return Err(PipelineError::Usage(format!(
                    "unknown ablation '{other}', expected one of {:?}",
                    Self::NAMES
                )))
            }
        }
        Ok(())
    }

    /// Directory tag for checkpoints, logs and reports.
    pub fn tag(&self) -> String {
        let on: Vec<&str> = [self.without_sg_net, self.without_micro, self.without_ll_prior]
            .iter()
            .zip(Self::NAMES)
            .filter(|(f, _)| **f)
            .map(|(_, n)| n)
            .collect();
        if on.is_empty() {
            "base".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetProfile,
    pub model: ModelProfile,
    pub train: TrainProfile,
    pub eval: EvalProfile,
    #[serde(default)]
    pub ablation: Ablation,
}

pub const DESK_TOML: &str = include_str!("../../../configs/desk.toml");
pub const SMOKE_TOML: &str = include_str!("../../../configs/smoke.toml");
pub const FULL_TOML: &str = include_str!("../../../configs/full.toml");

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Built-in profile by name: `desk`, `smoke` or `full`.
    pub fn preset(name: &str) -> Option<Self> {
        let text = match name {
            "desk" => DESK_TOML,
            "smoke" => SMOKE_TOML,
            "full" => FULL_TOML,
            _ => return None,
        };
        Some(Self::from_toml(text).expect("built-in profiles are valid"))
    }

    /// Reads a config file, or a built-in profile when `spec` names one and
    /// is not a file.
    pub fn load(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if !path.is_file() {
            if let Some(cfg) = Self::preset(spec) {
                return Ok(cfg);
            }
        }
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let d = &self.dataset;
        if d.past_len != PAST_LEN || d.future_len != FUTURE_LEN {
            return bad(format!("windows are {PAST_LEN}+{FUTURE_LEN} frames; got {}+{}", d.past_len, d.future_len));
        }
        if !d.sg_indices.windows(2).all(|w| w[0] < w[1]) || d.sg_indices.iter().any(|&i| i == 0 || i >= d.future_len) {
            return bad(format!("sg_indices {:?} must be strictly increasing in 1..{}", d.sg_indices, d.future_len));
        }
        if d.envs_per_split.contains(&0) || d.scenes_per_env == 0 || d.window_stride == 0 {
            return bad("dataset counts must be >= 1".into());
        }
        if !(d.heatmap_variance > 0.0) || d.raster_size < 8 || d.local_radius_px == Some(0) {
            return bad("heatmap variance, raster size or local radius out of range".into());
        }
        let m = &self.model;
        for spec in [self.long_goal_spec().unet, self.waypoint_spec().unwrap_or_else(|| self.unet_waypoint(1))] {
            spec.validate()?;
            if !d.raster_size.is_multiple_of(spec.size_multiple()) {
                return bad(format!("raster size {} not divisible by {}", d.raster_size, spec.size_multiple()));
            }
        }
        if !(m.lg_free_bits >= 0.0 && m.micro_free_bits >= 0.0 && m.beta > 0.0 && m.grad_clip > 0.0) {
            return bad("free bits must be >= 0, beta and grad_clip > 0".into());
        }
        if ![m.lr_lg, m.lr_sg, m.lr_micro].iter().all(|&lr| lr > 0.0 && lr.is_finite()) {
            return bad("learning rates must be positive".into());
        }
        if self.train.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if self.eval.k.is_empty() || self.eval.k.contains(&0) || !(self.eval.prior_std_scale >= 0.0) {
            return bad("eval.k must list values >= 1 and prior_std_scale must be >= 0".into());
        }
        if self.eval.kde_bandwidth.is_some_and(|h| !(h > 0.0)) {
            return bad("kde_bandwidth must be > 0".into());
        }
        if self.ablation.without_sg_net && self.ablation.without_micro {
            return bad("without_sg_net and without_micro leave no trajectory decoder".into());
        }
        Ok(())
    }

    /// Waypoint indices in effect: none without the waypoint network, every
    /// intermediate step without the trajectory model.
    pub fn effective_sg_indices(&self) -> Vec<usize> {
        if self.ablation.without_sg_net {
            Vec::new()
        } else if self.ablation.without_micro {
            (1..self.dataset.future_len).collect()
        } else {
            self.dataset.sg_indices.clone()
        }
    }

    /// Goal points handed to the trajectory model: waypoints plus long goal.
    pub fn n_goals(&self) -> usize {
        self.effective_sg_indices().len() + 1
    }

    pub fn long_goal_spec(&self) -> LongGoalSpec {
        let m = &self.model;
        LongGoalSpec {
            unet: UNetSpec {
                encoder_channels: m.lg_encoder.clone(),
                decoder_channels: m.lg_decoder.clone(),
                in_channels: 2,
                out_channels: 1,
            },
            latent_dim: m.lg_latent,
            prior_channels: m.lg_prior_channels.clone(),
            posterior_channels: m.lg_posterior_channels.clone(),
        }
    }

    fn unet_waypoint(&self, n_sg: usize) -> UNetSpec {
        UNetSpec {
            encoder_channels: self.model.sg_encoder.clone(),
            decoder_channels: self.model.sg_decoder.clone(),
            in_channels: 3,
            out_channels: n_sg + 1,
        }
    }

    /// `None` when the waypoint network is ablated.
    pub fn waypoint_spec(&self) -> Option<UNetSpec> {
        (!self.ablation.without_sg_net).then(|| self.unet_waypoint(self.effective_sg_indices().len()))
    }

    pub fn micro_spec(&self) -> MicroSpec {
        let m = &self.model;
        MicroSpec {
            past_len: self.dataset.past_len,
            future_len: self.dataset.future_len,
            n_goals: self.n_goals(),
            map_dim: *m.lg_encoder.last().expect("validated"),
            z_dim: m.micro_latent,
            enc_hidden: m.micro_enc_hidden,
            prior_hidden: m.micro_prior_hidden,
            ctx_dim: m.micro_ctx,
            dec_hidden: m.micro_dec_hidden,
            goal_feature: 2,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let d = &self.dataset;
        DatasetConfig {
            seed: d.seed,
            envs_per_split: d.envs_per_split,
            scenes_per_env: d.scenes_per_env,
            window_stride: d.window_stride,
            environment: EnvironmentSpec {
                height: d.env_size,
                width: d.env_size,
                ..EnvironmentSpec::default()
            },
            sim: SimConfig::default(),
        }
    }

    /// Hash of everything that influences trained parameters.
    pub fn training_hash(&self) -> String {
        #[derive(Serialize)]
        struct Part<'a> {
            dataset: &'a DatasetProfile,
            model: &'a ModelProfile,
            train: &'a TrainProfile,
            ablation: &'a Ablation,
        }
        let part = Part {
            dataset: &self.dataset,
            model: &self.model,
            train: &self.train,
            ablation: &self.ablation,
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&part).expect("serialises")))
    }

    /// Hash of the complete configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serialises")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for name in ["desk", "smoke", "full"] {
            let cfg = RunConfig::preset(name).unwrap();
            assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
        let full = RunConfig::preset("full").unwrap();
        assert_eq!(full.model.lg_encoder, vec![32, 32, 64, 64, 64]);
        assert_eq!(full.dataset.local_radius_px, Some(80));
        assert_eq!(full.dataset.sg_indices, vec![4, 8]);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::preset("desk").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.eval.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.training_hash(), b.training_hash());
        b.train.seed += 1;
        assert_ne!(a.training_hash(), b.training_hash());
    }

    #[test]
    fn rejects_bad_sg_indices_and_unknown_keys() {
        let mut c = RunConfig::preset("desk").unwrap();
        c.dataset.sg_indices = vec![8, 4];
        assert!(c.validate().is_err());
        c.dataset.sg_indices = vec![4, 12];
        assert!(c.validate().is_err());
        let text = RunConfig::preset("desk").unwrap().to_toml().replace("[eval]", "[eval]\nbogus = 1");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn ablations_reshape_goal_sets() {
        let mut c = RunConfig::preset("desk").unwrap();
        assert_eq!(c.n_goals(), 3);
        assert_eq!(c.waypoint_spec().unwrap().out_channels, 3);
        c.ablation.enable("without_micro").unwrap();
        assert_eq!(c.effective_sg_indices(), (1..12).collect::<Vec<_>>());
        assert_eq!(c.waypoint_spec().unwrap().out_channels, 12);
        let mut d = RunConfig::preset("desk").unwrap();
        d.ablation.enable("without_sg_net").unwrap();
        assert!(d.waypoint_spec().is_none());
        assert_eq!(d.n_goals(), 1);
        assert_eq!(d.ablation.tag(), "without_sg_net");
        assert!(d.ablation.enable("nonsense").is_err());
        c.ablation.enable("without_sg_net").unwrap();
        assert!(c.validate().is_err());
    }
}
