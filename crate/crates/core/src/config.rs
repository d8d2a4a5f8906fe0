//! Run configuration, loaded from TOML with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::PerturbConfig;
use crate::channel::{wavelength_from_ghz, PortGrid};
use crate::error::{Error, Result};
use crate::masking::DEFAULT_SENTINEL;
use crate::nn::net::{ArchConfig, DEFAULT_CSCA_PATCH};

pub const SEED_ENV: &str = "FAS_CANET_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Amplitude perturbation and the FFT loss term enabled.
    Full,
    /// Both disabled.
    CanetB,
}

/// Where AWGN is applied when a sample is loaded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoisePlacement {
    Input,
    Target,
    Both,
}

impl NoisePlacement {
    pub fn noisy_input(self) -> bool {
        matches!(self, Self::Input | Self::Both)
    }

    pub fn noisy_target(self) -> bool {
        matches!(self, Self::Target | Self::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n_y: usize,
    pub n_x: usize,
    /// Aperture along x and y, in centimetres.
    pub w_x_cm: f64,
    pub w_y_cm: f64,
    pub freq_ghz: f64,
    pub m_t: usize,
    /// Path-loss scale δ.
    pub delta: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_y: 32,
            n_x: 16,
            w_x_cm: 2.0,
            w_y_cm: 4.0,
            freq_ghz: 3.4,
            m_t: 8,
            delta: 1.0,
        }
    }
}

impl GridConfig {
    pub fn port_grid(&self) -> Result<PortGrid> {
        PortGrid::from_frequency(self.n_x, self.n_y, self.w_x_cm / 100.0, self.w_y_cm / 100.0, self.freq_ghz)
    }

    pub fn wavelength(&self) -> f64 {
        wavelength_from_ghz(self.freq_ghz)
    }

    pub fn n_ports(&self) -> usize {
        self.n_y * self.n_x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `manifest.json` and the shards.
    pub dir: PathBuf,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            train: 4096,
            val: 512,
            test: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub flag_channel: bool,
    /// Divides every hidden width of the layer stack; 1 is full width.
    pub width_div: usize,
    pub csca_patch: usize,
    pub sentinel: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            flag_channel: true,
            width_div: 1,
            csca_patch: DEFAULT_CSCA_PATCH,
            sentinel: DEFAULT_SENTINEL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Fraction of ports masked, drawn uniformly from this band per sample.
    pub mask_ratio: [f64; 2],
    pub snr_db: Vec<f64>,
    /// Weight β of the FFT amplitude term.
    pub loss_beta: f64,
    pub grad_clip: Option<f64>,
    pub noise: NoisePlacement,
    pub ablation: Ablation,
    /// Validation samples scored after each epoch.
    pub val_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            dropout: 0.5,
            mask_ratio: [0.80, 0.95],
            snr_db: vec![0.0, 10.0, 20.0],
            loss_beta: 0.02,
            grad_clip: None,
            noise: NoisePlacement::Input,
            ablation: Ablation::Full,
            val_cap: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub observed: Vec<usize>,
    pub snr_db: Vec<f64>,
    /// Replace predictions at observed ports with their known values.
    pub overwrite_observed: bool,
}

/// Observation rates behind the default sweep.
pub const OBSERVED_FRACTIONS: [f64; 4] = [0.05, 0.10, 0.20, 0.50];

/// Observed port counts at [`OBSERVED_FRACTIONS`] of `n_ports`, at least 1 each.
pub fn observed_counts(n_ports: usize) -> Vec<usize> {
    let mut v: Vec<usize> = OBSERVED_FRACTIONS
        .iter()
        .map(|f| ((n_ports as f64 * f).round() as usize).clamp(1, n_ports))
        .collect();
    v.dedup();
    v
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            observed: observed_counts(512),
            snr_db: vec![0.0, 10.0, 20.0],
            overwrite_observed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub perturb: PerturbConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            grid: GridConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            perturb: PerturbConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn invalid(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| invalid("<document>", e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.n_x < 2 || g.n_y < 2 {
            return Err(invalid("grid", "n_x and n_y must be at least 2"));
        }
        if !(g.w_x_cm > 0.0 && g.w_y_cm > 0.0 && g.freq_ghz > 0.0) {
            return Err(invalid("grid", "apertures and frequency must be positive"));
        }
        if g.m_t == 0 {
            return Err(invalid("grid.m_t", "must be at least 1"));
        }
        if !(g.delta > 0.0) {
            return Err(invalid("grid.delta", "must be positive"));
        }
        if self.model.width_div == 0 {
            return Err(invalid("model.width_div", "must be at least 1"));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be at least 1"));
        }
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.weight_decay < 0.0 {
            return Err(invalid("train", "optimizer settings out of range"));
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return Err(invalid("train.dropout", "must lie in [0, 1)"));
        }
        let [lo, hi] = t.mask_ratio;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(invalid("train.mask_ratio", "need 0 < low <= high < 1"));
        }
        if t.snr_db.is_empty() || t.snr_db.iter().any(|s| s.is_nan()) {
            return Err(invalid("train.snr_db", "need at least one SNR"));
        }
        if t.loss_beta < 0.0 {
            return Err(invalid("train.loss_beta", "must be nonnegative"));
        }
        if matches!(t.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(invalid("train.grad_clip", "must be positive"));
        }
        self.perturb.validate().map_err(|e| invalid("perturb", e.to_string()))?;
        let n_s = g.n_ports();
        if self.eval.observed.iter().any(|&k| k == 0 || k > n_s) {
            return Err(invalid("eval.observed", format!("counts must lie in 1..={n_s}")));
        }
        self.arch().shape_trace().map_err(|e| invalid("model", e.to_string()))?;
        Ok(())
    }

    pub fn arch(&self) -> ArchConfig {
        let mut arch = ArchConfig::scaled(
            self.grid.m_t,
            self.grid.n_y,
            self.grid.n_x,
            self.model.flag_channel,
            self.model.width_div,
        );
        arch.dropout = self.train.dropout;
        arch.csca_patch = self.model.csca_patch;
        arch
    }

    /// β actually applied, after the ablation switch.
    pub fn effective_loss_beta(&self) -> f64 {
        match self.train.ablation {
            Ablation::Full => self.train.loss_beta,
            Ablation::CanetB => 0.0,
        }
    }

    pub fn effective_perturb(&self) -> PerturbConfig {
        PerturbConfig {
            enabled: self.perturb.enabled && self.train.ablation == Ablation::Full,
            ..self.perturb
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("run config serializes")))
    }

    /// Apply `FAS_CANET_SEED` if set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Some(seed) = seed_from_env()? {
            self.seed = seed;
        }
        Ok(())
    }
}

pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| invalid(SEED_ENV, format!("not an unsigned integer: {v:?}"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observed_counts_follow_rates() {
        assert_eq!(observed_counts(512), vec![26, 51, 102, 256]);
        assert_eq!(observed_counts(32), vec![2, 3, 6, 16]);
        assert_eq!(observed_counts(4), vec![1, 2]);
    }

    #[test]
    fn defaults_mirror_training_protocol() {
        let c = RunConfig::default();
        assert_eq!(c.train.lr, 5e-4);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.weight_decay, 1e-4);
        assert_eq!((c.train.beta1, c.train.beta2), (0.9, 0.999));
        assert_eq!(c.train.dropout, 0.5);
        assert_eq!(c.train.loss_beta, 0.02);
        assert_eq!((c.perturb.gamma, c.perturb.mu), (0.5, 0.05));
        assert_eq!(c.grid.freq_ghz, 3.4);
        assert_eq!(c.train.mask_ratio, [0.80, 0.95]);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        let partial = RunConfig::from_toml_str("seed = 7\n[train]\nepochs = 2\nablation = \"canet-b\"\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.train.epochs, 2);
        assert_eq!(partial.effective_loss_beta(), 0.0);
        assert!(!partial.effective_perturb().enabled);
        assert_eq!(partial.train.lr, 5e-4);
    }

    #[test]
    fn unknown_keys_report_their_path() {
        match RunConfig::from_toml_str("[train]\nlearning_rate = 0.1\n") {
            Err(Error::Config { path, message }) => {
                assert!(path.contains("train"), "{path}");
                assert!(message.contains("learning_rate"), "{message}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(matches!(
            RunConfig::from_toml_str("[train]\nbatch_size = 0\n"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
