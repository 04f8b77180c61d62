//! Experiment configuration: a TOML tree with one table per stage.
//!
//! ```toml
//! [dims]
//! n_r = 4
//! n_t = 1
//! k = 1
//! t = 16
//! n = 8
//!
//! [prior.source]
//! kind = "mixture"
//! means = [-1.0, 1.0]
//! weights = [0.5, 0.5]
//! variance = 0.01
//!
//! [experiment]
//! snr_db = [0.0, 10.0, 20.0]
//! trials = 300
//! ```
//!
//! Every table except `[dims]` may be omitted; see the field defaults below.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dims: DimsConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub prior: PriorsConfig,
    #[serde(default)]
    pub pvd: PvdSection,
    #[serde(default)]
    pub baselines: BaselinesConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsConfig {
    pub n_r: usize,
    pub n_t: usize,
    pub k: usize,
    pub t: usize,
    #[serde(default = "one")]
    pub n_u: usize,
    pub n: usize,
    #[serde(default = "unit")]
    pub power: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ChannelModel {
    #[default]
    Rayleigh,
    /// Exponentially correlated Kronecker surrogate.
    Kronecker,
    /// Entries drawn from the receiver's Gaussian channel prior.
    Prior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    #[serde(default)]
    pub model: ChannelModel,
    #[serde(default)]
    pub rho_rx: f64,
    #[serde(default)]
    pub rho_tx: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Linear,
    Saturating,
    /// Text file in the encoder interchange format.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default)]
    pub kind: EncoderKind,
    #[serde(default = "unit")]
    pub gain: f64,
    /// Encoders are drawn once per experiment from this seed and known to the receiver.
    #[serde(default)]
    pub seed: u64,
    /// Rescale every codeword to average power `P` (a nonlinear map).
    #[serde(default)]
    pub normalize_power: bool,
    /// Relative paths resolve against the config file's directory.
    #[serde(default)]
    pub file: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Linear,
            gain: 1.0,
            seed: 0,
            normalize_power: false,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PriorsConfig {
    #[serde(default)]
    pub channel: ChannelPriorConfig,
    #[serde(default)]
    pub source: SourcePriorConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ChannelPriorKind {
    #[default]
    Gaussian,
    /// Gaussian centred on the true channel of each trial.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelPriorConfig {
    #[serde(default)]
    pub kind: ChannelPriorKind,
    /// `[re, im]` of the common entry mean.
    #[serde(default)]
    pub mean: [f64; 2],
    #[serde(default = "unit")]
    pub variance: f64,
}

impl Default for ChannelPriorConfig {
    fn default() -> Self {
        Self {
            kind: ChannelPriorKind::Gaussian,
            mean: [0.0, 0.0],
            variance: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SourcePriorKind {
    #[default]
    Gaussian,
    /// Components centred on constant vectors `means[c]·1`.
    Mixture,
    /// Gaussian centred on the true source; the truth is drawn from `N(mean, spread)`.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourcePriorConfig {
    #[serde(default)]
    pub kind: SourcePriorKind,
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "unit")]
    pub variance: f64,
    #[serde(default)]
    pub means: Vec<f64>,
    #[serde(default)]
    pub weights: Vec<f64>,
    #[serde(default = "unit")]
    pub spread: f64,
}

impl Default for SourcePriorConfig {
    fn default() -> Self {
        Self {
            kind: SourcePriorKind::Gaussian,
            mean: 0.0,
            variance: 1.0,
            means: Vec::new(),
            weights: Vec::new(),
            spread: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvdSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    #[serde(default = "default_sigma_max")]
    pub sigma_max: f64,
    /// Overrides `sigma_min` for the channel schedule.
    #[serde(default)]
    pub channel_sigma_min: Option<f64>,
    #[serde(default = "default_inner")]
    pub inner_iters: usize,
    #[serde(default = "one")]
    pub samples: usize,
    #[serde(default = "default_zeta_h")]
    pub zeta_h: f64,
    #[serde(default = "default_zeta_d")]
    pub zeta_d: f64,
    #[serde(default = "yes")]
    pub chain_through_score: bool,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_exact_threshold")]
    pub exact_threshold: usize,
}

impl Default for PvdSection {
    fn default() -> Self {
        Self {
            enabled: true,
            steps: default_steps(),
            sigma_min: default_sigma_min(),
            sigma_max: default_sigma_max(),
            channel_sigma_min: None,
            inner_iters: default_inner(),
            samples: 1,
            zeta_h: default_zeta_h(),
            zeta_d: default_zeta_d(),
            chain_through_score: true,
            probes: default_probes(),
            exact_threshold: default_exact_threshold(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselinesConfig {
    /// Pilot-based LMMSE with two-stage decoding.
    #[serde(default)]
    pub lmmse: bool,
    /// LMMSE that uses the true transmitted signal as pilot.
    #[serde(default = "yes")]
    pub oracle: bool,
    /// Pilot slots per block.
    #[serde(default)]
    pub n_p: usize,
}

impl Default for BaselinesConfig {
    fn default() -> Self {
        Self {
            lmmse: false,
            oracle: true,
            n_p: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_snr")]
    pub snr_db: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// 0 uses every available core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Fill `wall_ms`; off by default so output bytes depend only on seed and config.
    #[serde(default)]
    pub record_timing: bool,
    /// Trials whose PVD step sizes are inflated until they diverge (robustness checks).
    #[serde(default)]
    pub diverge_trials: Vec<usize>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            snr_db: default_snr(),
            trials: default_trials(),
            seed: 0,
            workers: 0,
            output: default_output(),
            record_timing: false,
            diverge_trials: Vec::new(),
        }
    }
}

fn one() -> usize {
    1
}
fn unit() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_steps() -> usize {
    30
}
fn default_sigma_min() -> f64 {
    0.01
}
fn default_sigma_max() -> f64 {
    100.0
}
fn default_inner() -> usize {
    20
}
fn default_zeta_h() -> f64 {
    0.1
}
fn default_zeta_d() -> f64 {
    0.05
}
fn default_probes() -> usize {
    8
}
fn default_exact_threshold() -> usize {
    blind_mimo::encoder::DEFAULT_EXACT_THRESHOLD
}
fn default_snr() -> Vec<f64> {
    vec![10.0]
}
fn default_trials() -> usize {
    300
}
fn default_output() -> PathBuf {
    PathBuf::from("results.csv")
}

/// One invariant violation, addressed by its dotted config path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Default)]
struct Report(Vec<Violation>);

impl Report {
    fn check(&mut self, ok: bool, path: &str, message: impl Into<String>) {
        if !ok {
            self.0.push(Violation {
                path: path.to_string(),
                message: message.into(),
            });
        }
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Every violated invariant; empty for a runnable config.
    pub fn validate(&self) -> Vec<Violation> {
        let mut r = Report::default();
        let d = &self.dims;
        for (name, v) in [
            ("n_r", d.n_r),
            ("n_t", d.n_t),
            ("k", d.k),
            ("t", d.t),
            ("n_u", d.n_u),
            ("n", d.n),
        ] {
            r.check(v >= 1, &format!("dims.{name}"), "must be at least 1");
        }
        r.check(positive(d.power), "dims.power", "must be positive");

        let c = &self.channel;
        for (name, rho) in [("rho_rx", c.rho_rx), ("rho_tx", c.rho_tx)] {
            r.check(
                (0.0..1.0).contains(&rho),
                &format!("channel.{name}"),
                "must lie in [0, 1)",
            );
        }
        r.check(
            c.model != ChannelModel::Prior || self.prior.channel.kind == ChannelPriorKind::Gaussian,
            "channel.model",
            "drawing from the prior needs a gaussian channel prior",
        );

        let e = &self.encoder;
        r.check(
            e.kind != EncoderKind::Saturating || (e.gain.is_finite() && e.gain != 0.0),
            "encoder.gain",
            "must be finite and nonzero",
        );
        r.check(
            e.kind != EncoderKind::File || e.file.is_some(),
            "encoder.file",
            "required when kind = \"file\"",
        );

        let pc = &self.prior.channel;
        r.check(
            positive(pc.variance),
            "prior.channel.variance",
            "must be positive",
        );
        r.check(
            pc.mean.iter().all(|m| m.is_finite()),
            "prior.channel.mean",
            "must be finite",
        );
        let ps = &self.prior.source;
        r.check(
            positive(ps.variance),
            "prior.source.variance",
            "must be positive",
        );
        r.check(ps.mean.is_finite(), "prior.source.mean", "must be finite");
        if ps.kind == SourcePriorKind::Mixture {
            r.check(
                !ps.means.is_empty(),
                "prior.source.means",
                "mixture needs at least one component",
            );
            r.check(
                ps.weights.len() == ps.means.len(),
                "prior.source.weights",
                "needs one weight per component",
            );
            r.check(
                ps.weights.iter().all(|w| *w > 0.0)
                    && (ps.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9,
                "prior.source.weights",
                "must be positive and sum to 1",
            );
        }
        if ps.kind == SourcePriorKind::Oracle {
            r.check(
                positive(ps.spread),
                "prior.source.spread",
                "must be positive",
            );
        }

        let p = &self.pvd;
        r.check(p.steps >= 1, "pvd.steps", "must be at least 1");
        r.check(
            positive(p.sigma_min) && p.sigma_min < p.sigma_max && p.sigma_max.is_finite(),
            "pvd.schedule",
            "needs 0 < sigma_min < sigma_max",
        );
        if let Some(s) = p.channel_sigma_min {
            r.check(
                positive(s) && s < p.sigma_max,
                "pvd.channel_sigma_min",
                "needs 0 < value < sigma_max",
            );
        }
        r.check(p.inner_iters >= 1, "pvd.inner_iters", "must be at least 1");
        r.check(p.samples >= 1, "pvd.samples", "must be at least 1");
        r.check(positive(p.zeta_h), "pvd.zeta_h", "must be positive");
        r.check(positive(p.zeta_d), "pvd.zeta_d", "must be positive");
        r.check(p.probes >= 1, "pvd.probes", "must be at least 1");

        let b = &self.baselines;
        if b.lmmse {
            r.check(
                b.n_p >= 1 && b.n_p < d.t,
                "baselines.n_p",
                "needs 1 ≤ n_p < t",
            );
            if b.n_p >= 1 && b.n_p < d.t {
                r.check(
                    (d.k * d.t) % (d.t - b.n_p) == 0,
                    "baselines.n_p",
                    "k·t must be divisible by the data slots t − n_p",
                );
            }
        }
        r.check(
            p.enabled || b.lmmse || b.oracle,
            "baselines",
            "no method enabled",
        );

        let x = &self.experiment;
        r.check(x.trials >= 1, "experiment.trials", "must be at least 1");
        r.check(
            !x.snr_db.is_empty(),
            "experiment.snr_db",
            "must not be empty",
        );
        r.check(
            x.snr_db.iter().all(|s| s.is_finite()),
            "experiment.snr_db",
            "must be finite",
        );
        r.check(
            x.diverge_trials.iter().all(|&t| t < x.trials),
            "experiment.diverge_trials",
            "indices must be below trials",
        );
        r.0
    }

    pub fn mimo_dims(&self) -> blind_mimo::MimoDims {
        let d = &self.dims;
        blind_mimo::MimoDims {
            n_r: d.n_r,
            n_t: d.n_t,
            k: d.k,
            t: d.t,
            n_u: d.n_u,
            n: d.n,
            power: d.power,
            sigma_n2: 0.0,
        }
    }
}

/// The configuration shipped with the binary.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ExperimentConfig {
        ExperimentConfig::from_toml("[dims]\nn_r = 2\nn_t = 1\nk = 1\nt = 4\nn = 3\n").unwrap()
    }

    #[test]
    fn shipped_default_is_valid() {
        let cfg = ExperimentConfig::from_toml(DEFAULT_CONFIG).unwrap();
        assert_eq!(cfg.validate(), vec![]);
    }

    #[test]
    fn defaults_fill_missing_tables() {
        let cfg = minimal();
        assert_eq!(cfg.experiment.trials, 300);
        assert_eq!(cfg.pvd.steps, 30);
        assert_eq!(cfg.dims.n_u, 1);
        assert!(cfg.validate().is_empty());
    }

    #[test]
    fn partial_table_matches_missing_table() {
        let partial = ExperimentConfig::from_toml(
            "[dims]\nn_r = 2\nn_t = 1\nk = 1\nt = 4\nn = 3\n[baselines]\n[pvd]\n[experiment]\n[encoder]\n",
        )
        .unwrap();
        assert_eq!(partial, minimal());
    }

    #[test]
    fn zero_trials_reported() {
        let mut cfg = minimal();
        cfg.experiment.trials = 0;
        let v = cfg.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].path, "experiment.trials");
    }

    #[test]
    fn inverted_schedule_reported() {
        let mut cfg = minimal();
        cfg.pvd.sigma_min = 200.0;
        assert!(cfg.validate().iter().any(|v| v.path == "pvd.schedule"));
    }

    #[test]
    fn every_violation_listed() {
        let mut cfg = minimal();
        cfg.dims.n_r = 0;
        cfg.pvd.zeta_d = -1.0;
        cfg.experiment.snr_db.clear();
        let paths: Vec<String> = cfg.validate().into_iter().map(|v| v.path).collect();
        assert_eq!(paths, vec!["dims.n_r", "pvd.zeta_d", "experiment.snr_db"]);
    }

    #[test]
    fn pilot_accounting_checked() {
        let mut cfg = minimal();
        cfg.baselines.lmmse = true;
        cfg.baselines.n_p = 1;
        assert!(cfg.validate().iter().any(|v| v.path == "baselines.n_p"));
        cfg.baselines.n_p = 2;
        assert!(cfg.validate().is_empty());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_toml(
            "[dims]\nn_r = 2\nn_t = 1\nk = 1\nt = 4\nn = 3\nbogus = 1\n",
        );
        assert!(err.is_err());
    }

    #[test]
    fn round_trip() {
        let cfg = ExperimentConfig::from_toml(DEFAULT_CONFIG).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
