//! Local training for one client plus the privacy treatment of its Gram
//! statistics before upload.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::container::{self, Manifest, GRAM_MAGIC};
use crate::data::Samples;
use crate::math::{spectral_norm_symmetric, Matrix, SeededRng};
use crate::model::{backward_sgd_step, forward, ModelWeights, Prox};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum LocalAlgorithm {
    FedAvg,
    FedProx { mu: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTraining {
    pub algorithm: LocalAlgorithm,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

/// `(ε, δ)` budget and clip bound for the Gaussian mechanism on Grams.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpBudget {
    /// `f64::INFINITY` means no noise.
    pub epsilon: f64,
    pub delta: f64,
    pub clip: f64,
}

impl DpBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("ε must be positive, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("δ must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.clip > 0.0) || !self.clip.is_finite() {
            return Err(Error::InvalidArgument(format!("clip bound must be positive, got {}", self.clip)));
        }
        Ok(())
    }

    /// Standard analytic Gaussian-mechanism scale `C·√(2 ln(1.25/δ))/ε`.
    pub fn sigma(&self) -> f64 {
        if self.epsilon.is_infinite() {
            0.0
        } else {
            self.clip * (2.0 * (1.25 / self.delta).ln()).sqrt() / self.epsilon
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GramFlags {
    /// Clip bound applied, if any.
    pub clip: Option<f64>,
    /// `(ε, δ)` of the noise added, if any.
    pub dp: Option<(f64, f64)>,
    /// Shrinkage `α` applied at the station, if any.
    pub shrink: Option<f64>,
}

/// Second-moment matrix `G = XᵀX` of one linear layer's inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GramStat {
    pub layer: usize,
    pub gram: Matrix,
    pub flags: GramFlags,
    /// Rows of `X` that contributed.
    pub batch: usize,
}

impl GramStat {
    pub fn from_activations(layer: usize, x: &Matrix) -> Self {
        Self {
            layer,
            gram: x.gram(),
            flags: GramFlags::default(),
            batch: x.rows(),
        }
    }

    pub fn dim(&self) -> usize {
        self.gram.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClientId {
    pub station: usize,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client: ClientId,
    pub weights: ModelWeights,
    /// One entry per linear layer when Grams were captured, else empty.
    pub grams: Vec<GramStat>,
    pub samples: usize,
    pub mean_loss: f64,
    pub seconds: f64,
}

/// `E` shuffled passes of minibatch SGD (FedAvg) or proximal SGD anchored to
/// `weights_in` (FedProx). When `capture_grams` is set, one extra forward
/// pass of the trained model over the first `min(B, n)` samples of the last
/// epoch's order records each linear layer's input Gram.
pub fn train_local(
    client: ClientId,
    weights_in: &ModelWeights,
    data: &Samples,
    config: &LocalTraining,
    rng: &mut SeededRng,
    capture_grams: bool,
) -> Result<ClientUpdate> {
    let start = Instant::now();
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::InvalidArgument("epochs and batch size must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(Error::InsufficientSamples(format!("client {client:?} has no data")));
    }
    let prox_mu = match config.algorithm {
        LocalAlgorithm::FedAvg => None,
        LocalAlgorithm::FedProx { mu } if mu < 0.0 => {
            return Err(Error::InvalidArgument(format!("FedProx μ must be non-negative, got {mu}")))
        }
        LocalAlgorithm::FedProx { mu } if mu == 0.0 => None,
        LocalAlgorithm::FedProx { mu } => Some(mu),
    };

    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut weights = weights_in.clone();
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let batch = data.select(chunk);
            let prox = prox_mu.map(|mu| Prox { mu, anchor: weights_in });
            let (next, loss) = backward_sgd_step(&weights, &batch.inputs, &batch.labels, config.lr, prox)
                .map_err(|e| match e {
                    Error::Diverged { .. } => Error::Diverged { step: steps },
                    other => other,
                })?;
            if !next.is_finite() {
                return Err(Error::Diverged { step: steps });
            }
            weights = next;
            loss_sum += loss;
            steps += 1;
        }
    }

    let grams = if capture_grams {
        let linear = weights.spec().linear_layers();
        let batch = data.select(&order[..config.batch_size.min(n)]);
        let out = forward(&weights, &batch.inputs, &linear)?;
        out.taps.iter().map(|t| GramStat::from_activations(t.layer, &t.x)).collect()
    } else {
        Vec::new()
    };

    Ok(ClientUpdate {
        client,
        weights,
        grams,
        samples: n,
        mean_loss: loss_sum / steps as f64,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Scales `G` by `C/‖G‖₂` when its spectral norm exceeds `C`. Eigenvectors
/// are untouched; the bound is recorded either way.
pub fn clip_gram(g: &GramStat, bound: f64) -> Result<GramStat> {
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(Error::InvalidArgument(format!("clip bound must be positive, got {bound}")));
    }
    let norm = spectral_norm_symmetric(&g.gram)?;
    let mut out = g.clone();
    if norm > bound {
        out.gram.scale_in_place(bound / norm);
        out.gram.symmetrize();
    }
    out.flags.clip = Some(bound);
    Ok(out)
}

/// Adds symmetric Gaussian noise: i.i.d. `N(0, σ²)` on the upper triangle
/// (diagonal included), mirrored below. Requires a prior clip at or under
/// the budget's bound.
pub fn dp_noise_gram(g: &GramStat, budget: &DpBudget, rng: &mut SeededRng) -> Result<GramStat> {
    budget.validate()?;
    match g.flags.clip {
        Some(c) if c <= budget.clip => {}
        _ => {
            return Err(Error::Precondition(format!(
                "Gram of layer {} must be clipped at ≤ {} before noising",
                g.layer, budget.clip
            )))
        }
    }
    if budget.epsilon.is_infinite() {
        return Ok(g.clone());
    }
    let sigma = budget.sigma();
    let d = g.dim();
    let mut out = g.clone();
    for i in 0..d {
        for j in i..d {
            let noise = sigma * rng.normal();
            out.gram.set(i, j, out.gram.get(i, j) + noise);
            if i != j {
                out.gram.set(j, i, out.gram.get(j, i) + noise);
            }
        }
    }
    out.flags.dp = Some((budget.epsilon, budget.delta));
    Ok(out)
}

/// Clip-then-noise pipeline applied to every captured Gram before upload.
pub fn privatize(grams: Vec<GramStat>, clip: Option<f64>, budget: Option<&DpBudget>, rng: &mut SeededRng) -> Result<Vec<GramStat>> {
    let clip = match (clip, budget) {
        (_, Some(b)) => Some(b.clip),
        (c, None) => c,
    };
    grams
        .into_iter()
        .map(|g| {
            let g = match clip {
                Some(c) => clip_gram(&g, c)?,
                None => g,
            };
            match budget {
                Some(b) => dp_noise_gram(&g, b, rng),
                None => Ok(g),
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GramRecord {
    layer: usize,
    dims: usize,
    batch: usize,
    clip: Option<f64>,
    dp: Option<DpRecord>,
    shrink_alpha: Option<f64>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct DpRecord {
    epsilon: f64,
    delta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GramManifest {
    records: Vec<GramRecord>,
}

impl Manifest for GramManifest {
    fn payload_len(&self) -> usize {
        self.records.iter().map(|r| r.dims * r.dims).sum()
    }
}

/// Gram sidecar: one record per linear layer, matrices row-major.
pub fn save_grams(path: &std::path::Path, grams: &[GramStat]) -> Result<()> {
    let records = grams
        .iter()
        .map(|g| GramRecord {
            layer: g.layer,
            dims: g.dim(),
            batch: g.batch,
            clip: g.flags.clip,
            dp: g.flags.dp.map(|(epsilon, delta)| DpRecord { epsilon, delta }),
            shrink_alpha: g.flags.shrink,
        })
        .collect();
    let payload: Vec<f64> = grams.iter().flat_map(|g| g.gram.as_slice().iter().copied()).collect();
    container::write_file(path, GRAM_MAGIC, &GramManifest { records }, &payload)
}

pub fn load_grams(path: &std::path::Path) -> Result<Vec<GramStat>> {
    let (manifest, values): (GramManifest, _) = container::read_file(path, GRAM_MAGIC)?;
    let mut offset = 0;
    manifest
        .records
        .into_iter()
        .map(|r| {
            let len = r.dims * r.dims;
            let gram = Matrix::from_vec(r.dims, r.dims, values[offset..offset + len].to_vec())?;
            offset += len;
            Ok(GramStat {
                layer: r.layer,
                gram,
                flags: GramFlags {
                    clip: r.clip,
                    dp: r.dp.map(|d| (d.epsilon, d.delta)),
                    shrink: r.shrink_alpha,
                },
                batch: r.batch,
            })
        })
        .collect()
}
