//! Round loop of the three-tier federation: broadcast, station rounds of
//! client training, station aggregation, server merge, evaluation.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::{privatize, train_local, ClientId, ClientUpdate, DpBudget, LocalTraining};
use crate::data::Samples;
use crate::fot::SinkhornConfig;
use crate::math::SeededRng;
use crate::merge::{average_stations, build_station_package, hfedatm_merge, model_breadth, MergeReport, ServerConfig, StationAlignmentReport, StationPackage};
use crate::model::{predict, ModelWeights};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Avg,
    Hfedatm,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Avg => "avg",
            Mode::Hfedatm => "hfedatm",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(Mode::Avg),
            "hfedatm" => Ok(Mode::Hfedatm),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?} (expected avg or hfedatm)"))),
        }
    }
}

/// Which global clients belong to which station.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    /// `stations[e]` lists the global client indices of station `e`.
    pub stations: Vec<Vec<usize>>,
    /// Fraction of each station's clients drawn per station round.
    pub active_fraction: f64,
}

impl Topology {
    /// Station-major numbering: station `e` owns clients
    /// `e·k .. (e+1)·k` for `k` clients per station.
    pub fn uniform(stations: usize, clients_per_station: usize) -> Self {
        Self {
            stations: (0..stations)
                .map(|e| (e * clients_per_station..(e + 1) * clients_per_station).collect())
                .collect(),
            active_fraction: 1.0,
        }
    }

    pub fn clients(&self) -> usize {
        self.stations.iter().map(Vec::len).sum()
    }

    pub fn validate(&self, clients: usize) -> Result<()> {
        if self.stations.is_empty() || self.stations.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("every station needs at least one client".into()));
        }
        if !(self.active_fraction > 0.0 && self.active_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "active fraction must lie in (0, 1], got {}",
                self.active_fraction
            )));
        }
        let mut seen = vec![false; clients];
        for &c in self.stations.iter().flatten() {
            if c >= clients || seen[c] {
                return Err(Error::InvalidArgument(format!(
                    "client {c} is unknown or belongs to more than one station"
                )));
            }
            seen[c] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("some clients are not attached to a station".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr·(1 + cos(π·r/R))/2` over global rounds.
    Cosine,
}

impl LrSchedule {
    pub fn at(self, base: f64, round: usize, rounds: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * round as f64 / rounds as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    /// Global rounds `R`.
    pub rounds: usize,
    /// Station rounds `N` per global round.
    pub station_rounds: usize,
    pub local: LocalTraining,
    pub schedule: LrSchedule,
    pub sinkhorn: SinkhornConfig,
    /// Station-side Gram shrinkage `α`.
    pub alpha: f64,
    /// Station whose model is the alignment reference.
    pub reference_station: usize,
    /// Spectral clip applied to client Grams even without DP.
    pub gram_clip: Option<f64>,
    pub dp: Option<DpBudget>,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.station_rounds == 0 || self.local.epochs == 0 || self.local.batch_size == 0 {
            return Err(Error::InvalidArgument("rounds, station rounds, epochs and batch size must be ≥ 1".into()));
        }
        if !(self.local.lr >= 0.0) || !self.local.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be finite and ≥ 0, got {}", self.local.lr)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("α must lie in [0, 1], got {}", self.alpha)));
        }
        if let Some(b) = &self.dp {
            b.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub mode: Mode,
    /// Mean training loss over each station's last station round.
    pub station_losses: Vec<f64>,
    pub target_acc: f64,
    pub breadth_pre: f64,
    pub breadth_post: f64,
    pub t_train_s: f64,
    pub t_align_s: f64,
    pub t_merge_s: f64,
    pub jitter_count: usize,
    pub aborted_clients: Vec<ClientId>,
    /// Digest of the station models entering the server step.
    pub station_checksum: String,
    /// Per-station FOT diagnostics (hfedatm mode only).
    pub alignments: Vec<StationAlignmentReport>,
}

impl RoundRecord {
    pub fn mean_station_loss(&self) -> f64 {
        self.station_losses.iter().sum::<f64>() / self.station_losses.len().max(1) as f64
    }

    pub fn seconds(&self) -> f64 {
        self.t_train_s + self.t_align_s + self.t_merge_s
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub weights: ModelWeights,
    /// Station uploads of the final round.
    pub last_packages: Vec<StationPackage>,
    /// Server report of the final round (hfedatm mode only).
    pub last_report: Option<MergeReport>,
}

/// Fraction of argmax-correct predictions.
pub fn evaluate(weights: &ModelWeights, target: &Samples) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    if target.width() != weights.spec().input_len() {
        return Err(Error::Dimension(format!(
            "samples have width {}, model expects {}",
            target.width(),
            weights.spec().input_len()
        )));
    }
    let pred = predict(weights, &target.inputs)?;
    let correct = pred.iter().zip(&target.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / target.len() as f64)
}

pub fn models_checksum(models: &[&ModelWeights]) -> String {
    let mut h = Sha256::new();
    for m in models {
        for s in m.param_slices() {
            for v in s {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
}

fn active_clients(members: &[usize], fraction: f64, rng: &mut SeededRng) -> Vec<usize> {
    if fraction >= 1.0 {
        return members.to_vec();
    }
    let take = ((fraction * members.len() as f64).ceil() as usize).clamp(1, members.len());
    let mut order = members.to_vec();
    rng.shuffle(&mut order);
    let mut chosen = order[..take].to_vec();
    chosen.sort_unstable();
    chosen
}

const TAG_ACTIVE: u64 = 0xac71;
const TAG_DP: u64 = 0xd9;

/// Runs `R` global rounds from `init`. `client_data[c]` is client `c`'s
/// local set; `target` is only used for evaluation.
pub fn run(config: &RunConfig, topology: &Topology, client_data: &[Samples], target: &Samples, init: &ModelWeights) -> Result<RunOutput> {
    config.validate()?;
    topology.validate(client_data.len())?;
    if config.reference_station >= topology.stations.len() {
        return Err(Error::InvalidArgument(format!(
            "reference station {} out of range",
            config.reference_station
        )));
    }
    let capture = config.mode == Mode::Hfedatm;
    let server = ServerConfig {
        sinkhorn: config.sinkhorn,
        reference: config.reference_station,
    };
    let mut global = init.clone();
    let mut records = Vec::with_capacity(config.rounds);
    let mut last_packages = Vec::new();
    let mut last_report = None;

    for round in 0..config.rounds {
        let t0 = Instant::now();
        let local = LocalTraining {
            lr: config.schedule.at(config.local.lr, round, config.rounds),
            ..config.local
        };
        let mut station_models: Vec<ModelWeights> = vec![global.clone(); topology.stations.len()];
        let mut packages: Vec<StationPackage> = Vec::new();
        let mut aborted = Vec::new();
        for n in 1..=config.station_rounds {
            let last = n == config.station_rounds;
            let jobs: Vec<(usize, usize, usize)> = topology
                .stations
                .iter()
                .enumerate()
                .flat_map(|(e, members)| {
                    let mut rng = SeededRng::derive(config.seed, &[round as u64, e as u64, n as u64, TAG_ACTIVE]);
                    active_clients(members, topology.active_fraction, &mut rng)
                        .into_iter()
                        .enumerate()
                        .map(move |(i, c)| (e, i, c))
                })
                .collect();
            let results: Vec<(ClientId, Result<ClientUpdate>)> = jobs
                .par_iter()
                .map(|&(e, i, c)| {
                    let id = ClientId { station: e, index: i };
                    let mut rng = SeededRng::derive(config.seed, &[round as u64, e as u64, n as u64, c as u64]);
                    let out = train_local(id, &station_models[e], &client_data[c], &local, &mut rng, capture && last)
                        .and_then(|mut u| {
                            if !u.grams.is_empty() {
                                let mut rng = SeededRng::derive(config.seed, &[round as u64, e as u64, c as u64, TAG_DP]);
                                u.grams = privatize(u.grams, config.gram_clip, config.dp.as_ref(), &mut rng)?;
                            }
                            Ok(u)
                        });
                    (id, out)
                })
                .collect();
            let mut per_station: Vec<Vec<ClientUpdate>> = vec![Vec::new(); topology.stations.len()];
            for (id, r) in results {
                match r {
                    Ok(u) => per_station[id.station].push(u),
                    Err(Error::Diverged { .. } | Error::InsufficientSamples(_)) => aborted.push(id),
                    Err(e) => return Err(e),
                }
            }
            packages = per_station
                .iter()
                .enumerate()
                .map(|(e, updates)| {
                    if updates.is_empty() {
                        return Err(Error::RoundAborted { round, station: e });
                    }
                    build_station_package(e, updates, config.alpha)
                })
                .collect::<Result<Vec<_>>>()?;
            for p in &packages {
                station_models[p.station] = p.model.clone();
            }
        }
        let station_losses = packages.iter().map(|p| p.mean_loss).collect();
        let refs: Vec<&ModelWeights> = station_models.iter().collect();
        let station_checksum = models_checksum(&refs);
        let t_train_s = t0.elapsed().as_secs_f64();

        let (t_align_s, t_merge_s, breadth_pre, breadth_post, jitter_count);
        let mut alignments = Vec::new();
        match config.mode {
            Mode::Avg => {
                let t = Instant::now();
                global = average_stations(&packages)?;
                t_merge_s = t.elapsed().as_secs_f64();
                t_align_s = 0.0;
                breadth_pre = model_breadth(&refs)?;
                breadth_post = breadth_pre;
                jitter_count = 0;
            }
            Mode::Hfedatm => {
                let (model, report) = hfedatm_merge(&packages, &server)?;
                global = model;
                t_align_s = report.seconds_align;
                t_merge_s = report.seconds_merge;
                breadth_pre = report.breadth_pre;
                breadth_post = report.breadth_post;
                jitter_count = report.jitter_count;
                alignments = report.alignments.clone();
                last_report = Some(report);
            }
        }
        if !global.is_finite() {
            return Err(Error::Diverged { step: round });
        }
        records.push(RoundRecord {
            round,
            mode: config.mode,
            station_losses,
            target_acc: evaluate(&global, target)?,
            breadth_pre,
            breadth_post,
            t_train_s,
            t_align_s,
            t_merge_s,
            jitter_count,
            aborted_clients: aborted,
            station_checksum,
            alignments,
        });
        last_packages = packages;
    }
    Ok(RunOutput {
        records,
        weights: global,
        last_packages,
        last_report,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `(t_hfedatm − t_avg)/t_avg` on median per-round wall time, skipping the
/// first (warm-up) round of each run.
pub fn measure_overhead(avg: &[RoundRecord], hfedatm: &[RoundRecord]) -> Result<f64> {
    let times = |r: &[RoundRecord]| -> Result<f64> {
        if r.len() < 4 {
            return Err(Error::InvalidArgument("overhead needs at least 3 rounds after warm-up".into()));
        }
        Ok(median(r[1..].iter().map(RoundRecord::seconds).collect()))
    };
    let a = times(avg)?;
    let h = times(hfedatm)?;
    Ok((h - a) / a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::LocalAlgorithm;
    use crate::math::gaussian_sample;
    use crate::model::ModelSpec;

    fn spec() -> ModelSpec {
        ModelSpec::reduced_lenet([3, 12, 12], 3).unwrap()
    }

    fn samples(rng: &mut SeededRng, n: usize) -> Samples {
        let x = gaussian_sample(rng, n, 432, 1.0).unwrap();
        let labels = (0..n).map(|i| i % 3).collect();
        Samples::new(x, labels).unwrap()
    }

    fn config(mode: Mode) -> RunConfig {
        RunConfig {
            mode,
            rounds: 2,
            station_rounds: 2,
            local: LocalTraining {
                algorithm: LocalAlgorithm::FedAvg,
                epochs: 1,
                batch_size: 8,
                lr: 0.05,
            },
            schedule: LrSchedule::Cosine,
            sinkhorn: SinkhornConfig::default(),
            alpha: 0.75,
            reference_station: 0,
            gram_clip: None,
            dp: None,
            seed: 9,
        }
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(LrSchedule::Cosine.at(0.1, 0, 10), 0.1);
        assert!((LrSchedule::Cosine.at(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.at(0.1, 7, 10), 0.1);
    }

    #[test]
    fn topology_validation() {
        let t = Topology::uniform(2, 3);
        assert_eq!(t.clients(), 6);
        assert!(t.validate(6).is_ok());
        assert!(t.validate(7).is_err());
        let dup = Topology {
            stations: vec![vec![0, 1], vec![1]],
            active_fraction: 1.0,
        };
        assert!(dup.validate(2).is_err());
    }

    #[test]
    fn single_client_matches_direct_loop() {
        let mut rng = SeededRng::new(1);
        let data = vec![samples(&mut rng, 20)];
        let target = samples(&mut rng, 9);
        let init = ModelWeights::init(&spec(), &mut rng).unwrap();
        let cfg = config(Mode::Avg);
        let out = run(&cfg, &Topology::uniform(1, 1), &data, &target, &init).unwrap();

        let mut w = init.clone();
        for r in 0..cfg.rounds {
            let local = LocalTraining {
                lr: cfg.schedule.at(cfg.local.lr, r, cfg.rounds),
                ..cfg.local
            };
            for n in 1..=cfg.station_rounds {
                let mut rng = SeededRng::derive(cfg.seed, &[r as u64, 0, n as u64, 0]);
                w = train_local(ClientId { station: 0, index: 0 }, &w, &data[0], &local, &mut rng, false)
                    .unwrap()
                    .weights;
            }
        }
        assert_eq!(out.weights.to_flat(), w.to_flat());
    }

    #[test]
    fn identical_stations_merge_exactly() {
        let mut rng = SeededRng::new(2);
        let shared = samples(&mut rng, 12);
        let data = vec![shared.clone(), shared.clone(), shared];
        let target = samples(&mut rng, 9);
        let init = ModelWeights::init(&spec(), &mut rng).unwrap();
        let mut cfg = config(Mode::Hfedatm);
        cfg.rounds = 1;
        cfg.station_rounds = 1;
        // full-batch single epoch: the shuffle only changes summation order
        cfg.local.batch_size = 12;
        let out = run(&cfg, &Topology::uniform(3, 1), &data, &target, &init).unwrap();
        let station = &out.last_packages[0].model;
        for (a, b) in out.weights.to_flat().iter().zip(station.to_flat()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn modes_share_station_computation() {
        let mut rng = SeededRng::new(3);
        let data: Vec<Samples> = (0..4).map(|_| samples(&mut rng, 16)).collect();
        let target = samples(&mut rng, 9);
        let init = ModelWeights::init(&spec(), &mut rng).unwrap();
        let topo = Topology::uniform(2, 2);
        let mut a_cfg = config(Mode::Avg);
        a_cfg.rounds = 1;
        let mut h_cfg = config(Mode::Hfedatm);
        h_cfg.rounds = 1;
        let a = run(&a_cfg, &topo, &data, &target, &init).unwrap();
        let h = run(&h_cfg, &topo, &data, &target, &init).unwrap();
        assert_eq!(a.records[0].station_checksum, h.records[0].station_checksum);
        assert!(h.last_report.is_some());
    }

    #[test]
    fn run_is_deterministic() {
        let mut rng = SeededRng::new(4);
        let data: Vec<Samples> = (0..4).map(|_| samples(&mut rng, 16)).collect();
        let target = samples(&mut rng, 9);
        let init = ModelWeights::init(&spec(), &mut rng).unwrap();
        let topo = Topology {
            active_fraction: 0.5,
            ..Topology::uniform(2, 2)
        };
        let cfg = config(Mode::Hfedatm);
        let a = run(&cfg, &topo, &data, &target, &init).unwrap();
        let b = run(&cfg, &topo, &data, &target, &init).unwrap();
        assert_eq!(a.weights, b.weights);
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.target_acc, y.target_acc);
            assert_eq!(x.station_checksum, y.station_checksum);
        }
    }

    #[test]
    fn empty_client_is_aborted_but_round_proceeds() {
        let mut rng = SeededRng::new(5);
        let data = vec![samples(&mut rng, 16), Samples::empty(432)];
        let target = samples(&mut rng, 9);
        let init = ModelWeights::init(&spec(), &mut rng).unwrap();
        let out = run(&config(Mode::Avg), &Topology::uniform(1, 2), &data, &target, &init).unwrap();
        assert!(!out.records[0].aborted_clients.is_empty());

        let lonely = vec![samples(&mut rng, 16), Samples::empty(432)];
        let err = run(&config(Mode::Avg), &Topology::uniform(2, 1), &lonely, &target, &init).unwrap_err();
        assert!(matches!(err, Error::RoundAborted { station: 1, .. }));
    }

    #[test]
    fn evaluate_cases() {
        // oracle model: zero weights, biases favour class 1
        let spec = spec();
        let mut w = ModelWeights::zeros(&spec).unwrap();
        let last = *spec.linear_layers().last().unwrap();
        let mut layers = w.clone().into_layers();
        if let crate::model::LayerParams::Linear { bias, .. } = &mut layers[last] {
            bias[1] = 1.0;
        }
        w = ModelWeights::from_layers(&spec, layers).unwrap();
        let mut rng = SeededRng::new(6);
        let x = gaussian_sample(&mut rng, 10, 432, 1.0).unwrap();
        let all_one = Samples::new(x.clone(), vec![1; 10]).unwrap();
        assert_eq!(evaluate(&w, &all_one).unwrap(), 1.0);
        let mixed = Samples::new(x, (0..10).map(|i| i % 3).collect()).unwrap();
        let acc = evaluate(&w, &mixed).unwrap();
        let reversed: Vec<usize> = (0..10).rev().collect();
        assert_eq!(evaluate(&w, &mixed.select(&reversed)).unwrap(), acc);
        assert!(evaluate(&w, &Samples::empty(432)).is_err());
        assert!(evaluate(&w, &Samples::empty(5)).is_err());
    }

    #[test]
    fn random_model_is_near_chance() {
        let spec = spec();
        let mut rng = SeededRng::new(7);
        let w = ModelWeights::init(&spec, &mut rng).unwrap();
        let n = 3000;
        let x = gaussian_sample(&mut rng, n, 432, 1.0).unwrap();
        // labels independent of inputs, so any fixed model scores Binomial(n, 1/3)/n
        let labels = (0..n).map(|_| rng.below(3)).collect();
        let acc = evaluate(&w, &Samples::new(x, labels).unwrap()).unwrap();
        let sd = (1.0 / 3.0 * 2.0 / 3.0 / n as f64).sqrt();
        assert!((acc - 1.0 / 3.0).abs() < 3.0 * sd, "acc {acc}");
    }
}
