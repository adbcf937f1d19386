use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hfedatm_core::client::{load_grams, save_grams, GramStat};
use hfedatm_core::experiment::build_federation;
use hfedatm_core::fot::SinkhornConfig;
use hfedatm_core::math::{gaussian_sample, random_orthogonal, symmetric_eigenvalues, SeededRng};
use hfedatm_core::merge::{hfedatm_merge, shrink, MergeReport, ServerConfig, StationPackage};
use hfedatm_core::model::{load_checkpoint, save_checkpoint};
use hfedatm_core::orchestrator::{measure_overhead, run, Mode, RoundRecord};
use serde::{Deserialize, Serialize};

use crate::config::{parse_epsilon, ExperimentConfig};
use crate::{CliError, InspectArgs, MergeArgs, RunArgs};

pub const METRICS_HEADER: &str =
    "round,mode,seed,target_acc,mean_station_loss,breadth_pre,breadth_post,t_train_s,t_align_s,t_merge_s,jitter_count";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunEntry {
    pub seed: u64,
    pub mode: Mode,
    pub rounds: usize,
    pub final_target_acc: f64,
    pub jitter_count: usize,
    pub aborted_clients: usize,
    pub checkpoint: PathBuf,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverheadEntry {
    pub seed: u64,
    /// `(t_hfedatm − t_avg)/t_avg` on median round time after warm-up.
    pub relative: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: String,
    pub rng: String,
    pub config: ExperimentConfig,
    pub runs: Vec<RunEntry>,
    pub median_final_acc_avg: Option<f64>,
    pub median_final_acc_hfedatm: Option<f64>,
    pub overhead: Vec<OverheadEntry>,
    pub total_jitter: usize,
    /// Per-round records of every run, in output order.
    #[serde(skip)]
    pub records: Vec<(u64, Vec<RoundRecord>)>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

fn artifact_error(path: &Path, e: hfedatm_core::Error) -> CliError {
    match e {
        hfedatm_core::Error::Io(source) => CliError::Output {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::from_core(format!("writing {}", path.display()), other),
    }
}

/// Applies command-line overrides on top of the file.
pub fn resolve_config(args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(lambda) = args.lambda {
        cfg.data.lambda = lambda;
    }
    if let Some(mode) = args.mode {
        cfg.modes = vec![mode];
    }
    if let Some(eps) = &args.dp_eps {
        cfg.privacy.epsilon = Some(parse_epsilon(eps).map_err(|e| CliError::Config(format!("--dp-eps: {e}")))?);
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    if let Some(r) = args.rounds {
        cfg.training.rounds = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn metrics_row(buf: &mut String, seed: u64, r: &RoundRecord, timings: bool) {
    let (tt, ta, tm) = if timings {
        (r.t_train_s, r.t_align_s, r.t_merge_s)
    } else {
        (0.0, 0.0, 0.0)
    };
    let _ = writeln!(
        buf,
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.round,
        r.mode.as_str(),
        seed,
        r.target_acc,
        r.mean_station_loss(),
        r.breadth_pre,
        r.breadth_post,
        tt,
        ta,
        tm,
        r.jitter_count
    );
}

/// Runs every (seed, mode) pair and writes metrics.csv, timings.csv,
/// summary.json and one final checkpoint per run.
pub fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> Result<RunSummary, CliError> {
    let cfg = resolve_config(args)?;
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir).map_err(|source| CliError::Output {
        path: dir.clone(),
        source,
    })?;
    let fed_spec = cfg.federation();
    let mut runs = Vec::new();
    let mut all_records = Vec::new();
    let mut overhead = Vec::new();

    for &seed in &cfg.seeds {
        let fed = build_federation(&fed_spec, seed).map_err(|e| CliError::from_core(format!("building data for seed {seed}"), e))?;
        let mut per_mode: Vec<(Mode, Vec<RoundRecord>)> = Vec::new();
        for &mode in &cfg.modes {
            let start = Instant::now();
            let rc = cfg.run_config(mode, seed);
            let result = run(&rc, &fed.topology, &fed.client_data, &fed.target, &fed.init)
                .map_err(|e| CliError::from_core(format!("run (seed {seed}, mode {})", mode.as_str()), e))?;
            let seconds = start.elapsed().as_secs_f64();
            let ckpt = dir.join(format!("final_{}_seed{seed}.hfam", mode.as_str()));
            save_checkpoint(&result.weights, &ckpt).map_err(|e| artifact_error(&ckpt, e))?;
            if cfg.output.station_artifacts {
                for p in &result.last_packages {
                    let stem = format!("station{}_{}_seed{seed}", p.station, mode.as_str());
                    let m = dir.join(format!("{stem}.hfam"));
                    save_checkpoint(&p.model, &m).map_err(|e| artifact_error(&m, e))?;
                    let g = dir.join(format!("{stem}.hfgm"));
                    save_grams(&g, &p.grams).map_err(|e| artifact_error(&g, e))?;
                }
            }
            let last = result.records.last().expect("rounds ≥ 1");
            writeln!(
                out,
                "seed {seed} {:>7}: target acc {:.4} after {} rounds ({:.1}s)",
                mode.as_str(),
                last.target_acc,
                result.records.len(),
                seconds
            )
            .ok();
            runs.push(RunEntry {
                seed,
                mode,
                rounds: result.records.len(),
                final_target_acc: last.target_acc,
                jitter_count: result.records.iter().map(|r| r.jitter_count).sum(),
                aborted_clients: result.records.iter().map(|r| r.aborted_clients.len()).sum(),
                checkpoint: ckpt,
                seconds,
            });
            per_mode.push((mode, result.records));
        }
        let find = |m: Mode| per_mode.iter().find(|(x, _)| *x == m).map(|(_, r)| r);
        if let (Some(a), Some(h)) = (find(Mode::Avg), find(Mode::Hfedatm)) {
            if let Ok(relative) = measure_overhead(a, h) {
                overhead.push(OverheadEntry { seed, relative });
            }
        }
        for (_, records) in per_mode {
            all_records.push((seed, records));
        }
    }

    let mut metrics = String::new();
    let mut timings = String::from("round,mode,seed,t_train_s,t_align_s,t_merge_s\n");
    let mut alignment = String::from("seed,mode,round,layer,station,pre_cost,post_cost,sinkhorn_residual,iterations\n");
    metrics.push_str(METRICS_HEADER);
    metrics.push('\n');
    for (seed, records) in &all_records {
        for r in records {
            metrics_row(&mut metrics, *seed, r, cfg.output.timings_in_metrics);
            let _ = writeln!(
                timings,
                "{},{},{},{},{},{}",
                r.round,
                r.mode.as_str(),
                seed,
                r.t_train_s,
                r.t_align_s,
                r.t_merge_s
            );
            for st in &r.alignments {
                for l in &st.layers {
                    let _ = writeln!(
                        alignment,
                        "{},{},{},{},{},{},{},{},{}",
                        seed,
                        r.mode.as_str(),
                        r.round,
                        l.layer,
                        st.station,
                        l.pre_cost,
                        l.post_cost,
                        l.sinkhorn_residual,
                        l.iterations
                    );
                }
            }
        }
    }
    write_file(&dir.join("metrics.csv"), metrics.as_bytes())?;
    write_file(&dir.join("timings.csv"), timings.as_bytes())?;
    if cfg.output.alignment_csv {
        write_file(&dir.join("alignment.csv"), alignment.as_bytes())?;
    }

    let accs = |m: Mode| median(runs.iter().filter(|r| r.mode == m).map(|r| r.final_target_acc).collect());
    let summary = RunSummary {
        version: env!("CARGO_PKG_VERSION").to_string(),
        rng: SeededRng::ALGORITHM.to_string(),
        median_final_acc_avg: accs(Mode::Avg),
        median_final_acc_hfedatm: accs(Mode::Hfedatm),
        total_jitter: runs.iter().map(|r| r.jitter_count).sum(),
        config: cfg,
        runs,
        overhead,
        records: all_records,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    write_file(&dir.join("summary.json"), json.as_bytes())?;
    writeln!(out, "wrote {}", dir.display()).ok();
    Ok(summary)
}

fn load_input<T>(path: &Path, what: &str, f: impl FnOnce(&Path) -> hfedatm_core::Result<T>) -> Result<T, CliError> {
    f(path).map_err(|e| CliError::Input(format!("cannot read {what} {}: {e}", path.display())))
}

/// Offline server merge of station checkpoints.
pub fn cmd_merge(args: &MergeArgs, out: &mut dyn Write) -> Result<MergeReport, CliError> {
    if args.checkpoints.len() < 2 {
        return Err(CliError::Usage("merge needs at least two checkpoints".into()));
    }
    if args.grams.len() != args.checkpoints.len() {
        return Err(CliError::Usage(format!(
            "{} checkpoints but {} Gram sidecars; pass one sidecar per checkpoint",
            args.checkpoints.len(),
            args.grams.len()
        )));
    }
    if !(0.0..=1.0).contains(&args.alpha) {
        return Err(CliError::Usage(format!("--alpha must lie in [0, 1], got {}", args.alpha)));
    }
    let models = args
        .checkpoints
        .iter()
        .map(|p| load_input(p, "checkpoint", load_checkpoint))
        .collect::<Result<Vec<_>, _>>()?;
    let reference = models[0].spec().structure_fingerprint();
    for (p, m) in args.checkpoints.iter().zip(&models) {
        let found = m.spec().structure_fingerprint();
        if found != reference {
            return Err(CliError::Input(format!(
                "fingerprint mismatch: {} has structure {found:016x}, reference has {reference:016x}",
                p.display()
            )));
        }
    }
    let mut packages = Vec::with_capacity(models.len());
    for (i, (model, gpath)) in models.into_iter().zip(&args.grams).enumerate() {
        let grams = load_input(gpath, "Gram sidecar", load_grams)?
            .into_iter()
            .map(|g| prepare_gram(g, args.alpha, gpath, out))
            .collect::<Result<Vec<_>, _>>()?;
        packages.push(StationPackage {
            station: i,
            model,
            grams,
            active_clients: 1,
            mean_loss: 0.0,
        });
    }
    let config = ServerConfig {
        sinkhorn: SinkhornConfig {
            lambda: args.lambda_ot,
            max_iter: args.sinkhorn_iters,
            ..SinkhornConfig::default()
        },
        reference: 0,
    };
    let (merged, report) = hfedatm_merge(&packages, &config).map_err(|e| CliError::from_core("merge", e))?;
    save_checkpoint(&merged, &args.out).map_err(|e| artifact_error(&args.out, e))?;
    let report_path = args.report.clone().unwrap_or_else(|| args.out.with_extension("report.json"));
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    write_file(&report_path, json.as_bytes())?;
    writeln!(
        out,
        "merged {} checkpoints into {} (breadth {:.6} -> {:.6}, {} jittered solves); report {}",
        args.checkpoints.len(),
        args.out.display(),
        report.breadth_pre,
        report.breadth_post,
        report.jitter_count,
        report_path.display()
    )
    .ok();
    Ok(report)
}

/// Shrinks a raw Gram with `alpha`; already-shrunk Grams are used as stored.
fn prepare_gram(g: GramStat, alpha: f64, path: &Path, out: &mut dyn Write) -> Result<GramStat, CliError> {
    match g.flags.shrink {
        Some(a) => {
            if a != alpha {
                writeln!(
                    out,
                    "note: {} layer {} was already shrunk with α={a}; --alpha {alpha} not applied",
                    path.display(),
                    g.layer
                )
                .ok();
            }
            Ok(g)
        }
        None => {
            let gram = shrink(&g.gram, alpha).map_err(|e| CliError::from_core("shrinkage", e))?;
            let mut flags = g.flags;
            flags.shrink = Some(alpha);
            Ok(GramStat { gram, flags, ..g })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramSummary {
    pub layer: usize,
    pub dims: usize,
    pub batch: usize,
    pub symmetry_residual: f64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub clip: Option<f64>,
    pub dp: Option<(f64, f64)>,
    pub shrink: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityDemo {
    pub trials: usize,
    pub samples: usize,
    pub dim: usize,
    /// Largest `‖G(X) − G(QX)‖_F` over all trials.
    pub max_gram_gap: f64,
    /// Smallest `‖X − QX‖_F`: the data really do differ.
    pub min_data_gap: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub layers: Vec<GramSummary>,
    pub ambiguity: Option<AmbiguityDemo>,
}

pub const AMBIGUITY_TOLERANCE: f64 = 1e-10;

pub fn summarize_gram(g: &GramStat) -> Result<GramSummary, CliError> {
    let mut sym = g.gram.clone();
    sym.symmetrize();
    let eig = symmetric_eigenvalues(&sym).map_err(|e| CliError::Input(format!("layer {}: {e}", g.layer)))?;
    Ok(GramSummary {
        layer: g.layer,
        dims: g.dim(),
        batch: g.batch,
        symmetry_residual: g.gram.asymmetry(),
        min_eigenvalue: eig.first().copied().unwrap_or(0.0),
        max_eigenvalue: eig.last().copied().unwrap_or(0.0),
        clip: g.flags.clip,
        dp: g.flags.dp,
        shrink: g.flags.shrink,
    })
}

/// Draws `X` (`samples × dim`) and a random orthogonal `Q` acting on the
/// sample axis, then compares `XᵀX` with `(QX)ᵀ(QX)`.
pub fn ambiguity_demo(trials: usize, samples: usize, dim: usize, seed: u64) -> Result<AmbiguityDemo, CliError> {
    if trials == 0 || samples < 2 || dim == 0 {
        return Err(CliError::Usage("--trials ≥ 1, --samples ≥ 2 and --dim ≥ 1 are required".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut max_gram_gap: f64 = 0.0;
    let mut min_data_gap = f64::INFINITY;
    for _ in 0..trials {
        let x = gaussian_sample(&mut rng, samples, dim, 1.0).map_err(|e| CliError::from_core("demo", e))?;
        let q = random_orthogonal(&mut rng, samples);
        let qx = q.matmul(&x).map_err(|e| CliError::from_core("demo", e))?;
        let gap = x.gram().sub(&qx.gram()).map_err(|e| CliError::from_core("demo", e))?.frobenius_norm();
        max_gram_gap = max_gram_gap.max(gap);
        min_data_gap = min_data_gap.min(x.sub(&qx).map_err(|e| CliError::from_core("demo", e))?.frobenius_norm());
    }
    Ok(AmbiguityDemo {
        trials,
        samples,
        dim,
        max_gram_gap,
        min_data_gap,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| format!("{x}"))
}

pub fn cmd_inspect_gram(args: &InspectArgs, out: &mut dyn Write) -> Result<InspectReport, CliError> {
    let mut report = InspectReport::default();
    if let Some(path) = &args.path {
        let grams = load_input(path, "Gram sidecar", load_grams)?;
        writeln!(out, "{}: {} Gram record(s)", path.display(), grams.len()).ok();
        for g in &grams {
            let s = summarize_gram(g)?;
            writeln!(
                out,
                "layer {}: {}x{} from {} samples, symmetry residual {:.3e}, eigenvalues [{:.6e}, {:.6e}]",
                s.layer, s.dims, s.dims, s.batch, s.symmetry_residual, s.min_eigenvalue, s.max_eigenvalue
            )
            .ok();
            let dp = s.dp.map_or_else(|| "none".to_string(), |(e, d)| format!("(ε={e}, δ={d})"));
            writeln!(out, "  flags: clip={} dp={} shrink_alpha={}", fmt_opt(s.clip), dp, fmt_opt(s.shrink)).ok();
            report.layers.push(s);
        }
    }
    if args.demo_ambiguity {
        let demo = ambiguity_demo(args.trials, args.samples, args.dim, args.seed)?;
        let verdict = if demo.max_gram_gap <= AMBIGUITY_TOLERANCE { "match" } else { "DIFFER" };
        writeln!(
            out,
            "ambiguity demo: {} trials, X is {}x{}; max ‖G(X) − G(QX)‖_F = {:.3e}, min ‖X − QX‖_F = {:.3}; Grams {verdict} within {:.0e}",
            demo.trials, demo.samples, demo.dim, demo.max_gram_gap, demo.min_data_gap, AMBIGUITY_TOLERANCE
        )
        .ok();
        report.ambiguity = Some(demo);
    }
    Ok(report)
}
