//! Station- and server-side aggregation.
//!
//! Nothing in here sees a sample: stations and the server only handle
//! weights and Gram statistics.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{ClientUpdate, GramStat};
use crate::fot::{align_station, breadth_proxy, Alignment, LayerAlignment, SinkhornConfig};
use crate::math::{project_psd, solve_spd, Matrix, SolveMethod, Tensor4};
use crate::model::{Layer, LayerParams, ModelSpec, ModelWeights};
use crate::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.75;

/// What one station uploads to the server.
#[derive(Clone, Debug)]
pub struct StationPackage {
    pub station: usize,
    pub model: ModelWeights,
    /// Shrunk Grams, one per linear layer. Empty when none were captured.
    pub grams: Vec<GramStat>,
    /// `|S_e|`, the number of clients whose updates were aggregated.
    pub active_clients: usize,
    /// Sample-weighted mean of the clients' training losses.
    pub mean_loss: f64,
}

/// Sample-weighted mean of client models, summed in client-id order.
pub fn station_aggregate(updates: &[ClientUpdate]) -> Result<ModelWeights> {
    if updates.is_empty() {
        return Err(Error::InvalidArgument("station aggregation needs at least one update".into()));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client);
    let fp = sorted[0].weights.fingerprint();
    if let Some(bad) = sorted.iter().find(|u| u.weights.fingerprint() != fp) {
        return Err(Error::ArchitectureMismatch {
            expected: fp,
            found: bad.weights.fingerprint(),
        });
    }
    let total: usize = sorted.iter().map(|u| u.samples).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("clients reported zero samples in total".into()));
    }
    let models: Vec<&ModelWeights> = sorted.iter().map(|u| &u.weights).collect();
    let coeffs: Vec<f64> = sorted.iter().map(|u| u.samples as f64 / total as f64).collect();
    if models.len() == 1 {
        return Ok(models[0].clone());
    }
    ModelWeights::linear_combination(&models, &coeffs)
}

/// Unweighted mean of the clients' Grams for one layer.
pub fn station_gram(grams: &[&Matrix]) -> Result<Matrix> {
    let first = grams
        .first()
        .ok_or_else(|| Error::InvalidArgument("station Gram needs at least one client Gram".into()))?;
    let mut sum = Matrix::zeros(first.rows(), first.cols());
    for g in grams {
        if g.shape() != first.shape() || !g.is_square() {
            return Err(Error::Dimension(format!(
                "client Grams disagree: {:?} vs {:?}",
                g.shape(),
                first.shape()
            )));
        }
        sum.add_assign(g)?;
    }
    sum.scale_in_place(1.0 / grams.len() as f64);
    Ok(sum)
}

/// `αG + (1 − α)·diag(G)`.
pub fn shrink(g: &Matrix, alpha: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("shrinkage α must lie in [0, 1], got {alpha}")));
    }
    if !g.is_square() {
        return Err(Error::Dimension(format!("Gram must be square, got {:?}", g.shape())));
    }
    let mut out = g.scale(alpha);
    for i in 0..g.rows() {
        out.set(i, i, g.get(i, i));
    }
    Ok(out)
}

/// Station-side Gram pipeline for one layer: average then shrink. Averages
/// of noised Grams are first projected onto the PSD cone; this only
/// post-processes privatised data.
pub fn station_gram_stat(grams: &[&GramStat], alpha: f64) -> Result<GramStat> {
    let first = grams
        .first()
        .ok_or_else(|| Error::InvalidArgument("station Gram needs at least one client Gram".into()))?;
    if grams.iter().any(|g| g.layer != first.layer) {
        return Err(Error::InvalidArgument("client Grams belong to different layers".into()));
    }
    let mats: Vec<&Matrix> = grams.iter().map(|g| &g.gram).collect();
    let mut mean = station_gram(&mats)?;
    if grams.iter().any(|g| g.flags.dp.is_some()) {
        mean = project_psd(&mean)?;
    }
    let mut flags = first.flags;
    flags.shrink = Some(alpha);
    Ok(GramStat {
        layer: first.layer,
        gram: shrink(&mean, alpha)?,
        flags,
        batch: grams.iter().map(|g| g.batch).sum(),
    })
}

/// Builds a station's upload. Grams are included only if every update
/// carries them.
pub fn build_station_package(station: usize, updates: &[ClientUpdate], alpha: f64) -> Result<StationPackage> {
    let model = station_aggregate(updates)?;
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client);
    let grams = if sorted.iter().all(|u| !u.grams.is_empty()) {
        let layers: Vec<usize> = sorted[0].grams.iter().map(|g| g.layer).collect();
        layers
            .iter()
            .map(|&layer| {
                let per_client = sorted
                    .iter()
                    .map(|u| {
                        u.grams.iter().find(|g| g.layer == layer).ok_or_else(|| {
                            Error::InvalidArgument(format!("client {:?} has no Gram for layer {layer}", u.client))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                station_gram_stat(&per_client, alpha)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let samples: usize = sorted.iter().map(|u| u.samples).sum();
    let mean_loss = sorted.iter().map(|u| u.mean_loss * u.samples as f64).sum::<f64>() / samples as f64;
    Ok(StationPackage {
        station,
        model,
        grams,
        active_clients: updates.len(),
        mean_loss,
    })
}

/// Filter-wise weighted mean `Σγ_e W_e / Σγ_e`.
pub fn conv_merge(banks: &[&Tensor4], gammas: &[f64]) -> Result<Tensor4> {
    if banks.is_empty() || banks.len() != gammas.len() {
        return Err(Error::InvalidArgument(format!(
            "{} banks but {} weights",
            banks.len(),
            gammas.len()
        )));
    }
    if banks.iter().any(|b| b.dims() != banks[0].dims()) {
        return Err(Error::Dimension("conv banks differ in shape after alignment".into()));
    }
    let total: f64 = gammas.iter().sum();
    if !(total > 0.0) || gammas.iter().any(|g| *g < 0.0) {
        return Err(Error::InvalidArgument(format!("merge weights must be non-negative with positive sum, got {gammas:?}")));
    }
    if banks.iter().all(|b| b.as_slice() == banks[0].as_slice()) {
        return Ok(banks[0].clone());
    }
    let mut out = Tensor4::zeros(banks[0].dims());
    let acc = out.as_mut_slice();
    for (bank, &g) in banks.iter().zip(gammas) {
        let c = g / total;
        for (a, v) in acc.iter_mut().zip(bank.as_slice()) {
            *a += c * v;
        }
    }
    Ok(out)
}

/// Weighted mean of bias vectors.
pub fn weighted_mean_vec(vectors: &[&[f64]], gammas: &[f64]) -> Result<Vec<f64>> {
    if vectors.is_empty() || vectors.len() != gammas.len() {
        return Err(Error::InvalidArgument("weighted mean needs one weight per vector".into()));
    }
    let total: f64 = gammas.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("merge weights must have positive sum".into()));
    }
    let n = vectors[0].len();
    if vectors.iter().any(|v| v.len() != n) {
        return Err(Error::Dimension("vectors differ in length".into()));
    }
    let mut out = vec![0.0; n];
    for (v, &g) in vectors.iter().zip(gammas) {
        for (o, x) in out.iter_mut().zip(*v) {
            *o += g / total * x;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegMeanSolution {
    pub weight: Matrix,
    pub jitter: f64,
    pub method: SolveMethod,
}

/// `W = (ΣĜ_e)⁻¹ Σ(Ĝ_e W̃_e)`, the minimiser of
/// `Σ_e tr((W − W̃_e)ᵀ Ĝ_e (W − W̃_e))`.
///
/// When `ΣĜ_e` is singular the solve adds `δI` to it and `δ·mean(W̃_e)` to
/// the right-hand side, so the answer is still exact for identical inputs.
pub fn regmean_solve(pairs: &[(&Matrix, &Matrix)]) -> Result<RegMeanSolution> {
    let (g0, w0) = pairs
        .first()
        .ok_or_else(|| Error::InvalidArgument("RegMean needs at least one station".into()))?;
    let d = g0.rows();
    let mut lhs = Matrix::zeros(d, d);
    let mut rhs = Matrix::zeros(d, w0.cols());
    for (g, w) in pairs {
        if g.shape() != (d, d) || w.shape() != w0.shape() || w.rows() != d {
            return Err(Error::Dimension(format!(
                "RegMean pair shapes {:?}/{:?} do not match {:?}/{:?}",
                g.shape(),
                w.shape(),
                g0.shape(),
                w0.shape()
            )));
        }
        if !g.is_symmetric(1e-9 * g.max_abs().max(1.0)) {
            return Err(Error::InvalidArgument("RegMean Grams must be symmetric".into()));
        }
        lhs.add_assign(g)?;
        rhs.add_assign(&g.matmul(w)?)?;
    }
    let mut solved = solve_spd(&lhs, &rhs)?;
    if solved.jitter > 0.0 {
        // A bare ridge would pull directions no Gram sees towards zero;
        // anchoring it on the plain mean leaves them at the average instead.
        let mut anchored = rhs;
        for (_, w) in pairs {
            anchored.axpy(solved.jitter / pairs.len() as f64, w)?;
        }
        let mut ridged = lhs;
        for i in 0..d {
            ridged.set(i, i, ridged.get(i, i) + solved.jitter);
        }
        let jitter = solved.jitter;
        solved = solve_spd(&ridged, &anchored)?;
        solved.jitter = jitter;
    }
    Ok(RegMeanSolution {
        weight: solved.solution,
        jitter: solved.jitter,
        method: solved.method,
    })
}

/// `Σ_e tr((W − W̃_e)ᵀ Ĝ_e (W − W̃_e))`.
pub fn regmean_objective(pairs: &[(&Matrix, &Matrix)], w: &Matrix) -> Result<f64> {
    let mut total = 0.0;
    for (g, wt) in pairs {
        let diff = w.sub(wt)?;
        let gd = g.matmul(&diff)?;
        total += diff.as_slice().iter().zip(gd.as_slice()).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total)
}

/// Builds a model from one merged parameter set per layer.
pub fn assemble_global(spec: &ModelSpec, layers: Vec<Option<LayerParams>>) -> Result<ModelWeights> {
    if layers.len() != spec.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} merged layers for a {}-layer spec",
            layers.len(),
            spec.layers.len()
        )));
    }
    let params = layers
        .into_iter()
        .zip(&spec.layers)
        .enumerate()
        .map(|(i, (p, l))| match (p, l) {
            (None, Layer::Conv { .. } | Layer::Linear { .. }) => {
                Err(Error::InvalidArgument(format!("layer {i} has no merged parameters")))
            }
            (None, _) => Ok(LayerParams::None),
            (Some(LayerParams::None), _) => Ok(LayerParams::None),
            (Some(p), Layer::Conv { .. } | Layer::Linear { .. }) => Ok(p),
            (Some(_), _) => Err(Error::InvalidArgument(format!("layer {i} takes no parameters"))),
        })
        .collect::<Result<Vec<_>>>()?;
    ModelWeights::from_layers(spec, params)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Parameterless,
    ConvWeightedMean,
    RegMean,
    /// Linear layer without Grams: falls back to the γ-weighted mean.
    LinearWeightedMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMergeReport {
    pub layer: usize,
    pub method: MergeMethod,
    pub jitter: Option<f64>,
    pub solver: Option<SolveMethod>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationAlignmentReport {
    pub station: usize,
    pub layers: Vec<LayerAlignment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub layers: Vec<LayerMergeReport>,
    pub reference_station: usize,
    pub alignments: Vec<StationAlignmentReport>,
    pub breadth_pre: f64,
    pub breadth_post: f64,
    pub jitter_count: usize,
    pub seconds_align: f64,
    pub seconds_merge: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub sinkhorn: SinkhornConfig,
    /// Index into the package list used as the alignment reference.
    pub reference: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            sinkhorn: SinkhornConfig::default(),
            reference: 0,
        }
    }
}

fn gammas(packages: &[StationPackage]) -> Vec<f64> {
    packages.iter().map(|p| p.active_clients as f64).collect()
}

fn check_packages(packages: &[StationPackage]) -> Result<()> {
    if packages.is_empty() {
        return Err(Error::InvalidArgument("server merge needs at least one station".into()));
    }
    if gammas(packages).iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidArgument("no station reported active clients".into()));
    }
    Ok(())
}

/// The "+Avg" server: γ-weighted mean of station models.
pub fn average_stations(packages: &[StationPackage]) -> Result<ModelWeights> {
    check_packages(packages)?;
    let fp = packages[0].model.fingerprint();
    if let Some(p) = packages.iter().find(|p| p.model.fingerprint() != fp) {
        return Err(Error::ArchitectureMismatch {
            expected: fp,
            found: p.model.fingerprint(),
        });
    }
    let g = gammas(packages);
    let total: f64 = g.iter().sum();
    let models: Vec<&ModelWeights> = packages.iter().map(|p| &p.model).collect();
    let coeffs: Vec<f64> = g.iter().map(|x| x / total).collect();
    ModelWeights::linear_combination(&models, &coeffs)
}

/// Mean over conv layers of the cross-station breadth proxy.
pub fn model_breadth(models: &[&ModelWeights]) -> Result<f64> {
    if models.len() < 2 {
        return Ok(0.0);
    }
    let conv = models[0].spec().conv_layers();
    let mut total = 0.0;
    for &l in &conv {
        let kernel = models[0].conv(l).map(Tensor4::kernel_size).unwrap_or(0);
        let banks = models
            .iter()
            .map(|m| {
                let b = m.conv(l).ok_or_else(|| Error::InvalidArgument(format!("layer {l} is not conv")))?;
                if b.kernel_size() == kernel {
                    Ok(b.clone())
                } else {
                    b.resize_kernels(kernel)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor4> = banks.iter().collect();
        total += breadth_proxy(&refs)?;
    }
    Ok(total / conv.len().max(1) as f64)
}

/// The HFedATM server: FOT-align every station to the reference, merge conv
/// banks by γ-weighted mean, merge linear weights by RegMean on the
/// (re-indexed) shrunk Grams, average biases, assemble.
pub fn hfedatm_merge(packages: &[StationPackage], config: &ServerConfig) -> Result<(ModelWeights, MergeReport)> {
    check_packages(packages)?;
    let reference = packages
        .get(config.reference)
        .ok_or_else(|| Error::InvalidArgument(format!("reference station {} out of range", config.reference)))?;
    let spec = reference.model.spec().clone();
    let start = Instant::now();
    let alignments: Vec<Alignment> = packages
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            if i == config.reference {
                Ok(Alignment::identity(&p.model))
            } else {
                align_station(&reference.model, &p.model, &config.sinkhorn)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let aligned_grams: Vec<Vec<GramStat>> = packages
        .iter()
        .zip(&alignments)
        .map(|(p, a)| p.grams.iter().map(|g| a.reindex_gram(g)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let seconds_align = start.elapsed().as_secs_f64();

    let raw: Vec<&ModelWeights> = packages.iter().map(|p| &p.model).collect();
    let breadth_pre = model_breadth(&raw)?;
    let aligned: Vec<&ModelWeights> = alignments.iter().map(|a| &a.weights).collect();
    let breadth_post = model_breadth(&aligned)?;

    let start = Instant::now();
    let g = gammas(packages);
    let use_regmean = aligned_grams.iter().all(|gs| !gs.is_empty());
    let merged: Vec<(Option<LayerParams>, LayerMergeReport)> = spec
        .layers
        .par_iter()
        .enumerate()
        .map(|(i, layer)| -> Result<_> {
            match layer {
                Layer::Conv { .. } => {
                    let banks: Vec<&Tensor4> = aligned.iter().map(|m| m.conv(i).expect("conv")).collect();
                    Ok((
                        Some(LayerParams::Conv(conv_merge(&banks, &g)?)),
                        LayerMergeReport {
                            layer: i,
                            method: MergeMethod::ConvWeightedMean,
                            jitter: None,
                            solver: None,
                        },
                    ))
                }
                Layer::Linear { .. } => {
                    let params: Vec<(&Matrix, &[f64])> = aligned.iter().map(|m| m.linear(i).expect("linear")).collect();
                    let biases: Vec<&[f64]> = params.iter().map(|(_, b)| *b).collect();
                    let bias = weighted_mean_vec(&biases, &g)?;
                    let grams: Option<Vec<&Matrix>> = use_regmean
                        .then(|| aligned_grams.iter().map(|gs| gs.iter().find(|x| x.layer == i).map(|x| &x.gram)).collect())
                        .flatten();
                    match grams {
                        Some(grams) => {
                            let pairs: Vec<(&Matrix, &Matrix)> =
                                grams.into_iter().zip(params.iter().map(|(w, _)| *w)).collect();
                            let sol = regmean_solve(&pairs)?;
                            Ok((
                                Some(LayerParams::Linear { weight: sol.weight, bias }),
                                LayerMergeReport {
                                    layer: i,
                                    method: MergeMethod::RegMean,
                                    jitter: (sol.jitter > 0.0).then_some(sol.jitter),
                                    solver: Some(sol.method),
                                },
                            ))
                        }
                        None => {
                            let total: f64 = g.iter().sum();
                            let mut weight = Matrix::zeros(params[0].0.rows(), params[0].0.cols());
                            for ((w, _), gamma) in params.iter().zip(&g) {
                                weight.axpy(gamma / total, w)?;
                            }
                            Ok((
                                Some(LayerParams::Linear { weight, bias }),
                                LayerMergeReport {
                                    layer: i,
                                    method: MergeMethod::LinearWeightedMean,
                                    jitter: None,
                                    solver: None,
                                },
                            ))
                        }
                    }
                }
                _ => Ok((
                    None,
                    LayerMergeReport {
                        layer: i,
                        method: MergeMethod::Parameterless,
                        jitter: None,
                        solver: None,
                    },
                )),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let (layers, reports): (Vec<_>, Vec<_>) = merged.into_iter().unzip();
    let model = assemble_global(&spec, layers)?;
    let seconds_merge = start.elapsed().as_secs_f64();
    let jitter_count = reports.iter().filter(|r| r.jitter.is_some()).count();
    let report = MergeReport {
        layers: reports,
        reference_station: reference.station,
        alignments: packages
            .iter()
            .zip(alignments)
            .map(|(p, a)| StationAlignmentReport {
                station: p.station,
                layers: a.layers,
            })
            .collect(),
        breadth_pre,
        breadth_post,
        jitter_count,
        seconds_align,
        seconds_merge,
    };
    Ok((model, report))
}
