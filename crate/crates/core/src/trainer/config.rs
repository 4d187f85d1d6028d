use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::rggm::{NoiseScoreMode, LearnSettings};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Graph generative branches every batch.
    #[default]
    Xggm,
    /// Plain BCE training of the VQA model.
    Baseline,
}

/// Classifier input used when predicting answers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferencePath {
    /// `cls(x)`.
    #[default]
    Direct,
    /// `cls(x + v̄)` with `v̄` from a noise-free pass of the relation branch.
    RelationGraph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub eta: f64,
    pub sigma: f64,
    pub n_k: usize,
    pub n_l: usize,
    pub n_objects: usize,
    pub hidden: usize,
    pub alpha_r: f64,
    pub beta_r: f64,
    pub alpha_n: f64,
    pub beta_n: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub noise_score_mode: NoiseScoreMode,
    pub tie_assembly: bool,
    pub separate_encoders: bool,
    pub node_bias: bool,
    pub feature_noise: f64,
    pub kl_bins: usize,
    pub kl_eps: f64,
    pub kl_temperature: f64,
    pub var_floor: f64,
    pub inference: InferencePath,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Xggm,
            eta: 0.8,
            sigma: 1.0,
            n_k: 2,
            n_l: 2,
            n_objects: 8,
            hidden: 16,
            alpha_r: 6.0,
            beta_r: 72.0,
            alpha_n: 6.6,
            beta_n: 0.17,
            lr: 1e-3,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            noise_score_mode: NoiseScoreMode::Corrected,
            tie_assembly: false,
            separate_encoders: false,
            node_bias: true,
            feature_noise: 0.3,
            kl_bins: 16,
            kl_eps: 1e-3,
            kl_temperature: 0.01,
            var_floor: 1e-6,
            inference: InferencePath::Direct,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta must be in [0, 1], got {}", self.eta));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be > 0, got {}", self.sigma));
        }
        if self.n_k == 0 || self.n_objects < 2 || self.hidden == 0 || self.batch_size == 0 {
            return bad("n_k, hidden and batch_size must be >= 1 and n_objects >= 2".into());
        }
        if self.kl_bins < 2 || !(self.kl_eps > 0.0) || !(self.kl_temperature > 0.0) || !(self.var_floor > 0.0) {
            return bad("kl_bins >= 2 and kl_eps, kl_temperature, var_floor > 0 required".into());
        }
        if self.mode == Mode::Xggm && self.n_objects < 3 {
            return bad("the relation branch needs n_objects >= 3 (at least two relation elements)".into());
        }
        if !(self.feature_noise >= 0.0) {
            return bad(format!("feature_noise must be >= 0, got {}", self.feature_noise));
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            n_objects: self.n_objects,
            hidden: self.hidden,
            iterations: self.n_k,
            layers: self.n_l,
            tie_assembly: self.tie_assembly,
        }
    }

    pub fn learn_settings(&self) -> LearnSettings {
        LearnSettings {
            sigma: self.sigma,
            noise_score_mode: self.noise_score_mode,
            var_floor: self.var_floor,
            kl_bins: self.kl_bins,
            kl_eps: self.kl_eps,
            kl_temperature: self.kl_temperature,
        }
    }

    /// Encoder parameter prefix for each branch.
    pub fn encoder_prefix(&self, relation_branch: bool) -> &'static str {
        match (self.separate_encoders, relation_branch) {
            (false, _) => "enc",
            (true, true) => "enc_r",
            (true, false) => "enc_n",
        }
    }
}
