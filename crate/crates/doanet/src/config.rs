//! TOML-backed run configuration. Unset fields fall back to the full-scale
//! experiment defaults (512-sample Hamming frames at 50% overlap, sigma 8,
//! 256/500 cRF trunk, 300/300 SPS estimator, Adam at 1e-4 with max-norm-3
//! clipping and one linear warm-up epoch).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SirMode {
    /// All sources at equal active power.
    Zero,
    /// Per-interferer SIR drawn uniformly from [-10, 10] dB.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Miso,
    Mimo,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Miso => write!(f, "miso"),
            ModelKind::Mimo => write!(f, "mimo"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    /// Candidate source counts per utterance, chosen uniformly.
    pub source_counts: Vec<usize>,
    pub sir_mode: SirMode,
    pub utterance_secs: f64,
    pub sample_rate: u32,
    /// Minimum pairwise angle separation in degrees.
    pub min_separation_deg: f64,
    /// When true, every utterance must contain a source pair closer than
    /// 15 degrees (the small-included-angle protocol).
    pub small_angle: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            train_count: 200,
            val_count: 40,
            test_count: 40,
            source_counts: vec![2],
            sir_mode: SirMode::Zero,
            utterance_secs: 4.0,
            sample_rate: 16_000,
            min_separation_deg: 5.0,
            small_angle: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub frame_size: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { frame_size: 512, hop: 256 }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.frame_size / 2 + 1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub sigma: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self { sigma: 8.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Maximum number of sound sources (MIMO branch count).
    pub n_max: usize,
    pub channels: usize,
    /// Side length of the cRF tap grid (3 gives taps in {-1, 0, 1}^2).
    pub taps: usize,
    pub trunk_fc: usize,
    pub trunk_gru: usize,
    pub trunk_gru_layers: usize,
    pub sps_fc: usize,
    pub sps_gru: usize,
    pub sps_gru_layers: usize,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_max: 2,
            channels: 6,
            taps: 3,
            trunk_fc: 256,
            trunk_gru: 500,
            trunk_gru_layers: 2,
            sps_fc: 300,
            sps_gru: 300,
            sps_gru_layers: 2,
            init_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs on validation loss.
    pub patience: usize,
    pub clip_norm: f64,
    /// Decoupled weight decay coefficient (0 disables it).
    pub weight_decay: f64,
    /// Multiplier applied to the learning rate when validation loss has not
    /// improved for `lr_patience` epochs. 1.0 disables the schedule.
    pub lr_decay: f64,
    /// Plateau length in epochs before the learning rate is decayed.
    pub lr_patience: usize,
    /// Utterances per gradient step.
    pub batch_size: usize,
    /// Shuffling seed for the epoch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            max_epochs: 50,
            patience: 3,
            clip_norm: 3.0,
            weight_decay: 0.0,
            lr_decay: 1.0,
            lr_patience: 3,
            batch_size: 4,
            seed: 1234,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub tolerance_deg: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.5, tolerance_deg: 5.0 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub stft: StftConfig,
    pub labels: LabelConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stft.hop * 2 != self.stft.frame_size {
            return Err(Error::Config("stft.hop must be frame_size / 2".into()));
        }
        if self.dataset.source_counts.is_empty() {
            return Err(Error::Config("dataset.source_counts must not be empty".into()));
        }
        if self.dataset.source_counts.iter().any(|&n| n < 2) {
            return Err(Error::Config("every mixture needs at least 2 sources".into()));
        }
        if let Some(&max) = self.dataset.source_counts.iter().max() {
            if max > self.model.n_max {
                return Err(Error::Config(format!(
                    "source count {max} exceeds model.n_max {}",
                    self.model.n_max
                )));
            }
        }
        if self.model.taps % 2 == 0 || self.model.taps == 0 {
            return Err(Error::Config("model.taps must be odd".into()));
        }
        if self.labels.sigma <= 0.0 {
            return Err(Error::Config("labels.sigma must be > 0".into()));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Config("eval.threshold must lie in (0, 1)".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.train.weight_decay < 0.0 {
            return Err(Error::Config("train.weight_decay must be >= 0".into()));
        }
        if !(self.train.lr_decay > 0.0 && self.train.lr_decay <= 1.0) {
            return Err(Error::Config("train.lr_decay must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Stable hex digest of the whole configuration, embedded in every
    /// artifact so reruns can be matched to their config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        digest_hex(canonical.as_bytes())
    }

    /// Digest of only the sections that determine the generated dataset.
    /// Stored in the manifest, so tweaking training hyperparameters does
    /// not force a re-simulation.
    pub fn data_hash(&self) -> String {
        let canonical = serde_json::to_string(&(&self.dataset, &self.stft))
            .expect("config serializes");
        digest_hex(canonical.as_bytes())
    }

    /// Digest of everything that determines cached features and labels:
    /// the dataset, the label encoding, and the parts of the model section
    /// that shape them (branch and channel counts, not layer widths).
    pub fn feature_hash(&self) -> String {
        let canonical = serde_json::to_string(&(
            &self.dataset,
            &self.stft,
            &self.labels,
            self.model.n_max,
            self.model.channels,
        ))
        .expect("config serializes");
        digest_hex(canonical.as_bytes())
    }

    /// Digest of the sections that determine a trained model and its raw
    /// outputs: everything except the evaluation settings.
    pub fn model_hash(&self) -> String {
        let canonical = serde_json::to_string(&(
            &self.dataset,
            &self.stft,
            &self.labels,
            &self.model,
            &self.train,
        ))
        .expect("config serializes");
        digest_hex(canonical.as_bytes())
    }

    pub fn samples_per_utterance(&self) -> usize {
        (self.dataset.utterance_secs * self.dataset.sample_rate as f64).round() as usize
    }
}

fn digest_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_full_scale_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.stft.frame_size, 512);
        assert_eq!(cfg.stft.hop, 256);
        assert_eq!(cfg.stft.bins(), 257);
        assert_eq!(cfg.labels.sigma, 8.0);
        assert_eq!(cfg.model.trunk_fc, 256);
        assert_eq!(cfg.model.trunk_gru, 500);
        assert_eq!(cfg.model.sps_fc, 300);
        assert_eq!(cfg.model.sps_gru, 300);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.train.clip_norm, 3.0);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn partial_toml_keeps_defaults_elsewhere() {
        let cfg: RunConfig = toml::from_str("[train]\nlearning_rate = 1e-3\n").unwrap();
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.model.trunk_gru, 500);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.train.learning_rate = 2e-4;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.stft.hop = 100;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.dataset.source_counts = vec![5];
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.eval.threshold = 1.5;
        assert!(cfg.validate().is_err());
    }
}
