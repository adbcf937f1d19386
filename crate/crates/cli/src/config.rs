//! File-backed experiment configuration (TOML).
//!
//! Every section is optional; missing keys take the defaults below, unknown
//! keys are rejected. Training and server defaults are the full-scale
//! hyper-parameters; `configs/desk.toml` holds the desk-scale ones.

use std::path::{Path, PathBuf};

use hfedatm_core::client::{DpBudget, LocalAlgorithm, LocalTraining};
use hfedatm_core::data::GeneratorConfig;
use hfedatm_core::experiment::FederationSpec;
use hfedatm_core::fot::SinkhornConfig;
use hfedatm_core::orchestrator::{LrSchedule, Mode, RunConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    pub data: DataConfig,
    pub topology: TopologyConfig,
    pub training: TrainingConfig,
    pub server: ServerConfig,
    pub privacy: PrivacyConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            modes: vec![Mode::Avg, Mode::Hfedatm],
            data: DataConfig::default(),
            topology: TopologyConfig::default(),
            training: TrainingConfig::default(),
            server: ServerConfig::default(),
            privacy: PrivacyConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub domains: usize,
    pub classes: usize,
    pub per_domain: usize,
    pub image: [usize; 3],
    pub noise: f64,
    pub target_domain: usize,
    /// Heterogeneity: 1 is IID, 0 is exclusive-domain.
    pub lambda: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            domains: 4,
            classes: 4,
            per_domain: 240,
            image: [3, 16, 16],
            noise: 0.1,
            target_domain: 3,
            lambda: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyConfig {
    pub stations: usize,
    pub clients_per_station: usize,
    pub active_fraction: f64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            stations: 10,
            clients_per_station: 10,
            active_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub station_rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// `0` trains with FedAvg, anything positive with FedProx.
    pub fedprox_mu: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            station_rounds: 5,
            epochs: 10,
            batch_size: 32,
            lr: 0.01,
            schedule: LrSchedule::Cosine,
            fedprox_mu: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    pub lambda_ot: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub alpha: f64,
    pub reference_station: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        let s = SinkhornConfig::default();
        Self {
            lambda_ot: s.lambda,
            sinkhorn_iters: s.max_iter,
            sinkhorn_tol: s.tol,
            alpha: hfedatm_core::merge::DEFAULT_ALPHA,
            reference_station: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacyConfig {
    /// Absent: no DP. `inf`: clip only.
    #[serde(with = "epsilon")]
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub clip: f64,
    /// Spectral clip applied without DP.
    pub gram_clip: Option<f64>,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            epsilon: None,
            delta: 1e-5,
            clip: 1.0,
            gram_clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write wall-clock columns into metrics.csv. Off by default so that the
    /// file is byte-identical across runs; timings.csv always has them.
    pub timings_in_metrics: bool,
    pub station_artifacts: bool,
    pub alignment_csv: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("hfedatm-out"),
            timings_in_metrics: false,
            station_artifacts: false,
            alignment_csv: false,
        }
    }
}

/// `inf` has no JSON form, so infinite ε is written as the string "inf".
mod epsilon {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(e) if e.is_infinite() => s.serialize_some("inf"),
            Some(e) => s.serialize_some(e),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Number(n)) => Ok(Some(n)),
            Some(Repr::Text(t)) => parse(&t).map(Some).map_err(serde::de::Error::custom),
        }
    }

    pub fn parse(text: &str) -> Result<f64, String> {
        match text.trim() {
            "inf" | "infinity" | "∞" => Ok(f64::INFINITY),
            other => other.parse().map_err(|_| format!("invalid ε {other:?}")),
        }
    }
}

pub use epsilon::parse as parse_epsilon;

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("field `{name}`: {msg}"))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(field("seeds", "at least one seed is required"));
        }
        if self.modes.is_empty() {
            return Err(field("modes", "at least one mode is required"));
        }
        let d = &self.data;
        if d.domains < 2 {
            return Err(field("data.domains", "need at least two domains"));
        }
        if d.target_domain >= d.domains {
            return Err(field("data.target_domain", format!("{} is not below data.domains", d.target_domain)));
        }
        if d.classes < 2 {
            return Err(field("data.classes", "need at least two classes"));
        }
        if d.per_domain < d.classes {
            return Err(field("data.per_domain", "must be at least data.classes"));
        }
        if d.image[1] != d.image[2] || d.image[0] == 0 {
            return Err(field("data.image", "images must be [channels, n, n]"));
        }
        if let Err(e) = self.federation().model_spec().and_then(|s| s.shapes()) {
            return Err(field("data.image", format!("too small for the network: {e}")));
        }
        if !(d.noise >= 0.0) {
            return Err(field("data.noise", "must be ≥ 0"));
        }
        if !(0.0..=1.0).contains(&d.lambda) {
            return Err(field("data.lambda", format!("{} is outside [0, 1]", d.lambda)));
        }
        let t = &self.topology;
        if t.stations == 0 {
            return Err(field("topology.stations", "must be ≥ 1"));
        }
        if t.clients_per_station == 0 {
            return Err(field("topology.clients_per_station", "must be ≥ 1"));
        }
        if !(t.active_fraction > 0.0 && t.active_fraction <= 1.0) {
            return Err(field("topology.active_fraction", "must lie in (0, 1]"));
        }
        let tr = &self.training;
        for (name, v) in [
            ("training.rounds", tr.rounds),
            ("training.station_rounds", tr.station_rounds),
            ("training.epochs", tr.epochs),
            ("training.batch_size", tr.batch_size),
        ] {
            if v == 0 {
                return Err(field(name, "must be ≥ 1"));
            }
        }
        if !(tr.lr >= 0.0) || !tr.lr.is_finite() {
            return Err(field("training.lr", "must be finite and ≥ 0"));
        }
        if !(tr.fedprox_mu >= 0.0) {
            return Err(field("training.fedprox_mu", "must be ≥ 0"));
        }
        let s = &self.server;
        if !(s.lambda_ot > 0.0) || !s.lambda_ot.is_finite() {
            return Err(field("server.lambda_ot", "must be positive"));
        }
        if s.sinkhorn_iters == 0 {
            return Err(field("server.sinkhorn_iters", "must be ≥ 1"));
        }
        if !(s.sinkhorn_tol >= 0.0) {
            return Err(field("server.sinkhorn_tol", "must be ≥ 0"));
        }
        if !(0.0..=1.0).contains(&s.alpha) {
            return Err(field("server.alpha", "must lie in [0, 1]"));
        }
        if s.reference_station >= t.stations {
            return Err(field("server.reference_station", "must name an existing station"));
        }
        let p = &self.privacy;
        if let Some(e) = p.epsilon {
            if !(e > 0.0) {
                return Err(field("privacy.epsilon", "must be positive or inf"));
            }
        }
        if !(p.delta > 0.0 && p.delta < 1.0) {
            return Err(field("privacy.delta", "must lie in (0, 1)"));
        }
        if !(p.clip > 0.0) || !p.clip.is_finite() {
            return Err(field("privacy.clip", "must be positive"));
        }
        if let Some(c) = p.gram_clip {
            if !(c > 0.0) || !c.is_finite() {
                return Err(field("privacy.gram_clip", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn federation(&self) -> FederationSpec {
        let d = &self.data;
        FederationSpec {
            generator: GeneratorConfig {
                domains: d.domains,
                classes: d.classes,
                per_domain: d.per_domain,
                image: d.image,
                noise: d.noise,
            },
            target_domain: d.target_domain,
            stations: self.topology.stations,
            clients_per_station: self.topology.clients_per_station,
            lambda: d.lambda,
            active_fraction: self.topology.active_fraction,
        }
    }

    pub fn run_config(&self, mode: Mode, seed: u64) -> RunConfig {
        let tr = &self.training;
        RunConfig {
            mode,
            rounds: tr.rounds,
            station_rounds: tr.station_rounds,
            local: LocalTraining {
                algorithm: if tr.fedprox_mu > 0.0 {
                    LocalAlgorithm::FedProx { mu: tr.fedprox_mu }
                } else {
                    LocalAlgorithm::FedAvg
                },
                epochs: tr.epochs,
                batch_size: tr.batch_size,
                lr: tr.lr,
            },
            schedule: tr.schedule,
            sinkhorn: SinkhornConfig {
                lambda: self.server.lambda_ot,
                max_iter: self.server.sinkhorn_iters,
                tol: self.server.sinkhorn_tol,
            },
            alpha: self.server.alpha,
            reference_station: self.server.reference_station,
            gram_clip: self.privacy.gram_clip,
            dp: self.privacy.epsilon.map(|epsilon| DpBudget {
                epsilon,
                delta: self.privacy.delta,
                clip: self.privacy.clip,
            }),
            seed,
        }
    }
}
