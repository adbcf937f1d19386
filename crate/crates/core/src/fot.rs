//! Filter-wise optimal transport alignment.
//!
//! For every conv layer the target station's kernels are flattened and
//! ℓ2-normalised, compared to the reference station's kernels through a
//! squared-Euclidean cost, matched by entropic OT (log-domain Sinkhorn) and
//! rounded to a hard permutation by exact assignment. The permutation is
//! then applied to the original kernels and propagated to whichever layer
//! consumes those channels next, so the aligned network computes exactly
//! the same function as before.

use serde::{Deserialize, Serialize};

use crate::assignment::{assignment_cost, min_cost_assignment};
use crate::client::GramStat;
use crate::math::{Matrix, Tensor4};
use crate::model::{Layer, LayerParams, ModelWeights};
use crate::{Error, Result};

/// Unit-norm flattened kernels of one bank.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedFilters {
    pub vectors: Vec<Vec<f64>>,
    /// Kernels with zero norm, replaced by the canonical `e₁`.
    pub degenerate: Vec<usize>,
}

impl NormalizedFilters {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

pub fn normalize_filters(bank: &Tensor4) -> Result<NormalizedFilters> {
    if bank.filters() == 0 || bank.kernel_len() == 0 {
        return Err(Error::InvalidArgument("cannot normalise an empty filter bank".into()));
    }
    let mut degenerate = Vec::new();
    let vectors = (0..bank.filters())
        .map(|a| {
            let k = bank.kernel(a);
            let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                k.iter().map(|v| v / norm).collect()
            } else {
                degenerate.push(a);
                let mut e1 = vec![0.0; k.len()];
                e1[0] = 1.0;
                e1
            }
        })
        .collect();
    Ok(NormalizedFilters { vectors, degenerate })
}

/// `cost[a][b] = ‖ref[a] − tgt[b]‖²`, in `[0, 4]` for unit vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix(pub Matrix);

pub fn cost_matrix(reference: &NormalizedFilters, target: &NormalizedFilters) -> Result<CostMatrix> {
    let k = reference.len();
    if target.len() != k {
        return Err(Error::InvalidArgument(format!(
            "filter counts differ ({k} vs {}); alignment across different widths is unsupported",
            target.len()
        )));
    }
    let len = reference.vectors.first().map_or(0, Vec::len);
    if target.vectors.iter().chain(&reference.vectors).any(|v| v.len() != len) {
        return Err(Error::Dimension("flattened filter lengths differ; resize first".into()));
    }
    let mut c = Matrix::zeros(k, k);
    for (a, ra) in reference.vectors.iter().enumerate() {
        for (b, tb) in target.vectors.iter().enumerate() {
            let d: f64 = ra.iter().zip(tb).map(|(x, y)| (x - y) * (x - y)).sum();
            c.set(a, b, d);
        }
    }
    Ok(CostMatrix(c))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Entropic regulariser `λ_OT`.
    pub lambda: f64,
    pub max_iter: usize,
    /// Stop once every row/column sum is within `tol` of 1.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            max_iter: 25,
            tol: 1e-9,
        }
    }
}

/// Doubly-stochastic plan with unit row and column sums.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub lambda: f64,
    pub iterations: usize,
    /// Largest marginal violation of the Sinkhorn iterate when it stopped.
    pub sinkhorn_residual: f64,
    /// Largest marginal violation of `plan` itself.
    pub marginal_residual: f64,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn marginal_residual(plan: &Matrix, target: f64) -> f64 {
    let k = plan.rows();
    let mut worst: f64 = 0.0;
    for i in 0..k {
        worst = worst.max((plan.row(i).iter().sum::<f64>() - target).abs());
    }
    for j in 0..plan.cols() {
        worst = worst.max(((0..k).map(|i| plan.get(i, j)).sum::<f64>() - target).abs());
    }
    worst
}

/// Entropic OT between uniform marginals, solved by log-domain Sinkhorn on
/// `exp(−D/λ)`.
///
/// Internally the marginals are probability vectors (`1/k`); the returned
/// plan is rescaled by `k` so that `Π1 = 1` and `Πᵀ1 = 1`. Whatever marginal
/// error is left after `max_iter` scaling rounds is removed by the rounding
/// projection of Altschuler, Weed & Rigollet (2017), which moves the iterate
/// onto the transport polytope with an `O(residual)` change.
pub fn sinkhorn(cost: &CostMatrix, config: &SinkhornConfig) -> Result<TransportPlan> {
    let d = &cost.0;
    if !d.is_square() || d.rows() == 0 {
        return Err(Error::Dimension(format!("cost must be square and non-empty, got {:?}", d.shape())));
    }
    if !(config.lambda > 0.0) || !config.lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("λ_OT must be positive, got {}", config.lambda)));
    }
    let eps = config.lambda;
    if d.as_slice().iter().any(|v| !(v / eps).is_finite()) {
        return Err(Error::Sinkhorn(format!(
            "cost/λ is not finite (λ_OT = {eps} too small for this cost range)"
        )));
    }
    let k = d.rows();
    let log_marginal = -(k as f64).ln();
    let mut f = vec![0.0; k];
    let mut g = vec![0.0; k];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;

    let row_sum = |f: &[f64], g: &[f64], i: usize| -> f64 {
        (0..k).map(|j| ((f[i] + g[j] - d.get(i, j)) / eps).exp()).sum::<f64>()
    };

    while iterations < config.max_iter.max(1) {
        iterations += 1;
        for i in 0..k {
            let lse = log_sum_exp((0..k).map(|j| (g[j] - d.get(i, j)) / eps));
            f[i] = eps * (log_marginal - lse);
        }
        for j in 0..k {
            let lse = log_sum_exp((0..k).map(|i| (f[i] - d.get(i, j)) / eps));
            g[j] = eps * (log_marginal - lse);
        }
        if f.iter().chain(&g).any(|v| !v.is_finite()) {
            return Err(Error::Sinkhorn("potentials became non-finite".into()));
        }
        // columns are exact after the g-update; rows carry the error
        residual = (0..k)
            .map(|i| (k as f64 * row_sum(&f, &g, i) - 1.0).abs())
            .fold(0.0, f64::max);
        if residual <= config.tol {
            break;
        }
    }

    let mut p = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            p.set(i, j, ((f[i] + g[j] - d.get(i, j)) / eps).exp());
        }
    }
    round_to_polytope(&mut p, 1.0 / k as f64);
    p.scale_in_place(k as f64);
    let marginal = marginal_residual(&p, 1.0);
    Ok(TransportPlan {
        plan: p,
        lambda: eps,
        iterations,
        sinkhorn_residual: residual,
        marginal_residual: marginal,
    })
}

/// Projects a non-negative matrix onto the transport polytope with uniform
/// marginals `m`: shrink over-full rows, then over-full columns, then add a
/// rank-one correction of the remaining deficits.
fn round_to_polytope(p: &mut Matrix, m: f64) {
    let k = p.rows();
    for i in 0..k {
        let s: f64 = p.row(i).iter().sum();
        if s > m {
            let scale = m / s;
            p.row_mut(i).iter_mut().for_each(|v| *v *= scale);
        }
    }
    for j in 0..k {
        let s: f64 = (0..k).map(|i| p.get(i, j)).sum();
        if s > m {
            let scale = m / s;
            for i in 0..k {
                p.set(i, j, p.get(i, j) * scale);
            }
        }
    }
    let row_def: Vec<f64> = (0..k).map(|i| (m - p.row(i).iter().sum::<f64>()).max(0.0)).collect();
    let col_def: Vec<f64> = (0..k)
        .map(|j| (m - (0..k).map(|i| p.get(i, j)).sum::<f64>()).max(0.0))
        .collect();
    let total: f64 = row_def.iter().sum();
    if total > 0.0 {
        for i in 0..k {
            for j in 0..k {
                p.set(i, j, p.get(i, j) + row_def[i] * col_def[j] / total);
            }
        }
    }
}

/// Hard matching extracted from a plan. `perm[a]` is the target filter that
/// lands at reference position `a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationMap {
    pub perm: Vec<usize>,
    /// `1 − mean_a Π[a, perm[a]]`: zero when the plan already was this
    /// permutation.
    pub plan_residual: f64,
}

impl PermutationMap {
    pub fn identity(k: usize) -> Self {
        Self {
            perm: (0..k).collect(),
            plan_residual: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }
}

/// Exact assignment maximising `Σ_a Π[a, σ(a)]`, ties to lower indices.
pub fn round_to_permutation(plan: &TransportPlan) -> Result<PermutationMap> {
    let k = plan.plan.rows();
    let perm = min_cost_assignment(&plan.plan.scale(-1.0))?;
    let mass: f64 = perm.iter().enumerate().map(|(a, &b)| plan.plan.get(a, b)).sum();
    Ok(PermutationMap {
        perm,
        plan_residual: 1.0 - mass / k as f64,
    })
}

/// Per-layer record of one station's alignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAlignment {
    pub layer: usize,
    pub permutation: PermutationMap,
    /// Mean cost of identity matching, after upstream re-indexing.
    pub pre_cost: f64,
    /// Mean cost of the chosen matching.
    pub post_cost: f64,
    pub sinkhorn_residual: f64,
    pub iterations: usize,
    /// Original kernel size when the bank was resized to the reference's.
    pub resized_from: Option<usize>,
    pub degenerate_filters: usize,
    /// The rounded plan did worse than identity on the cost and was dropped.
    pub identity_fallback: bool,
}

#[derive(Clone, Debug)]
pub struct Alignment {
    /// Target weights re-expressed in the reference's filter order (and
    /// spatial size), under the reference's spec.
    pub weights: ModelWeights,
    pub layers: Vec<LayerAlignment>,
    /// Input-feature permutations applied to linear layers:
    /// `(layer, perm)` with `new[i] = old[perm[i]]`.
    pub feature_permutations: Vec<(usize, Vec<usize>)>,
}

impl Alignment {
    /// Identity alignment of the reference with itself.
    pub fn identity(reference: &ModelWeights) -> Self {
        Self {
            weights: reference.clone(),
            layers: Vec::new(),
            feature_permutations: Vec::new(),
        }
    }

    /// Re-indexes a Gram so it describes the aligned model's inputs.
    pub fn reindex_gram(&self, g: &GramStat) -> Result<GramStat> {
        match self.feature_permutations.iter().find(|(l, _)| *l == g.layer) {
            Some((_, perm)) => Ok(GramStat {
                gram: g.gram.permute_symmetric(perm)?,
                ..g.clone()
            }),
            None => Ok(g.clone()),
        }
    }
}

/// Aligns every conv layer of `target` to `reference`.
///
/// Kernels of a different spatial size are first bilinearly resized to the
/// reference size so the cost is defined. Layers are processed front to
/// back; each conv layer's input channels are re-indexed by the upstream
/// permutation before its own matching is solved. Linear layers are only
/// re-indexed along their input axis.
pub fn align_station(reference: &ModelWeights, target: &ModelWeights, config: &SinkhornConfig) -> Result<Alignment> {
    let ref_spec = reference.spec();
    if ref_spec.structure_fingerprint() != target.spec().structure_fingerprint() {
        return Err(Error::ArchitectureMismatch {
            expected: ref_spec.structure_fingerprint(),
            found: target.spec().structure_fingerprint(),
        });
    }
    let shapes = ref_spec.shapes()?;
    let mut layers = target.layers().to_vec();
    let mut records = Vec::new();
    let mut feature_permutations = Vec::new();
    // permutation of the current activation's channel axis, new[i] = old[p[i]]
    let mut pending: Option<Vec<usize>> = None;

    for (i, layer) in ref_spec.layers.iter().enumerate() {
        match layer {
            Layer::Conv { kernel, .. } => {
                let ref_bank = reference.conv(i).expect("spec says conv");
                let LayerParams::Conv(bank) = &layers[i] else {
                    unreachable!("structure fingerprints match")
                };
                let mut bank = match &pending {
                    Some(p) => bank.permute_channels(p)?,
                    None => bank.clone(),
                };
                let resized_from = (bank.kernel_size() != *kernel).then_some(bank.kernel_size());
                if resized_from.is_some() {
                    bank = bank.resize_kernels(*kernel)?;
                }
                let ref_norm = normalize_filters(ref_bank)?;
                let tgt_norm = normalize_filters(&bank)?;
                let cost = cost_matrix(&ref_norm, &tgt_norm)?;
                let plan = sinkhorn(&cost, config)?;
                let mut permutation = round_to_permutation(&plan)?;
                let k = bank.filters();
                let identity_cost = cost.0.trace();
                let mut identity_fallback = false;
                if assignment_cost(&cost.0, &permutation.perm) > identity_cost {
                    permutation = PermutationMap {
                        plan_residual: 1.0 - plan.plan.trace() / k as f64,
                        ..PermutationMap::identity(k)
                    };
                    identity_fallback = true;
                }
                let post = assignment_cost(&cost.0, &permutation.perm);
                records.push(LayerAlignment {
                    layer: i,
                    pre_cost: identity_cost / k as f64,
                    post_cost: post / k as f64,
                    sinkhorn_residual: plan.sinkhorn_residual,
                    iterations: plan.iterations,
                    resized_from,
                    degenerate_filters: tgt_norm.degenerate.len(),
                    identity_fallback,
                    permutation: permutation.clone(),
                });
                layers[i] = LayerParams::Conv(bank.permute_filters(&permutation.perm)?);
                pending = Some(permutation.perm);
            }
            Layer::Relu | Layer::AvgPool2 => {}
            Layer::Flatten => {
                if let Some(p) = pending.take() {
                    let [_, h, w] = shapes[i];
                    let plane = h * w;
                    let features = p
                        .iter()
                        .flat_map(|&old| (0..plane).map(move |pos| old * plane + pos))
                        .collect();
                    pending = Some(features);
                }
            }
            Layer::Linear { .. } => {
                if let Some(p) = pending.take() {
                    let LayerParams::Linear { weight, bias } = &layers[i] else {
                        unreachable!("structure fingerprints match")
                    };
                    layers[i] = LayerParams::Linear {
                        weight: weight.permute_rows(&p)?,
                        bias: bias.clone(),
                    };
                    feature_permutations.push((i, p));
                }
            }
        }
    }
    let weights = ModelWeights::from_layers(ref_spec, layers)?;
    Ok(Alignment {
        weights,
        layers: records,
        feature_permutations,
    })
}

/// Index-wise mean squared distance between normalised filters, maximised
/// over every pair of banks. A weight-space stand-in for how far apart the
/// stations' filters are.
pub fn breadth_proxy(banks: &[&Tensor4]) -> Result<f64> {
    if banks.len() < 2 {
        return Err(Error::InvalidArgument("breadth needs at least two banks".into()));
    }
    let normed = banks.iter().map(|b| normalize_filters(b)).collect::<Result<Vec<_>>>()?;
    let mut worst: f64 = 0.0;
    for a in 0..normed.len() {
        for b in (a + 1)..normed.len() {
            let cost = cost_matrix(&normed[a], &normed[b])?;
            worst = worst.max(cost.0.trace() / normed[a].len() as f64);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{gaussian_sample, SeededRng};
    use crate::model::ModelSpec;
    use proptest::prelude::*;

    fn bank(rng: &mut SeededRng, dims: [usize; 4]) -> Tensor4 {
        let n: usize = dims.iter().product();
        Tensor4::from_vec(dims, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn cfg() -> SinkhornConfig {
        SinkhornConfig::default()
    }

    #[test]
    fn normalisation_is_scale_invariant() {
        let t = Tensor4::from_vec([2, 1, 1, 3], vec![7.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap();
        let n = normalize_filters(&t).unwrap();
        assert_eq!(n.vectors[0], vec![1.0, 0.0, 0.0]);
        let u = &n.vectors[1];
        assert!((u.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);

        let p = Tensor4::from_vec([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let n = normalize_filters(&p).unwrap();
        assert!(n.vectors[0].iter().zip(&n.vectors[1]).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn zero_kernel_maps_to_e1() {
        let t = Tensor4::from_vec([2, 1, 1, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let n = normalize_filters(&t).unwrap();
        assert_eq!(n.vectors[0], vec![1.0, 0.0]);
        assert_eq!(n.degenerate, vec![0]);
    }

    #[test]
    fn cost_entries() {
        let t = Tensor4::from_vec([3, 1, 1, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        let n = normalize_filters(&t).unwrap();
        let c = cost_matrix(&n, &n).unwrap().0;
        assert_eq!(c.diag(), vec![0.0; 3]);
        assert!((c.get(0, 1) - 2.0).abs() < 1e-15);
        assert!((c.get(0, 2) - 4.0).abs() < 1e-15);
        let other = normalize_filters(&Tensor4::zeros([2, 1, 1, 2])).unwrap();
        assert!(cost_matrix(&n, &other).is_err());
    }

    #[test]
    fn zero_cost_gives_uniform_plan() {
        let plan = sinkhorn(&CostMatrix(Matrix::zeros(2, 2)), &cfg()).unwrap();
        for v in plan.plan.as_slice() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        let p = round_to_permutation(&plan).unwrap();
        assert_eq!(p.perm, vec![0, 1]);
    }

    #[test]
    fn separated_cost_gives_identity_plan() {
        let d = CostMatrix(Matrix::from_rows(&[[0.0, 10.0], [10.0, 0.0]]));
        let plan = sinkhorn(&d, &cfg()).unwrap();
        assert!(plan.plan.get(0, 1) < 1e-8 && plan.plan.get(1, 0) < 1e-8);
        // brute force over both permutations: identity costs 0, swap costs 20
        assert_eq!(round_to_permutation(&plan).unwrap().perm, vec![0, 1]);
    }

    #[test]
    fn permutation_plan_is_recovered() {
        let perm = [2usize, 0, 3, 1];
        let mut m = Matrix::zeros(4, 4);
        for (a, &b) in perm.iter().enumerate() {
            m.set(a, b, 1.0);
        }
        let plan = TransportPlan {
            plan: m,
            lambda: 0.05,
            iterations: 0,
            sinkhorn_residual: 0.0,
            marginal_residual: 0.0,
        };
        let p = round_to_permutation(&plan).unwrap();
        assert_eq!(p.perm, perm.to_vec());
        assert_eq!(p.plan_residual, 0.0);
    }

    #[test]
    fn sinkhorn_errors() {
        assert!(sinkhorn(&CostMatrix(Matrix::zeros(2, 2)), &SinkhornConfig { lambda: 0.0, ..cfg() }).is_err());
        let huge = CostMatrix(Matrix::from_rows(&[[0.0, 1e308], [1e308, 0.0]]));
        assert!(matches!(
            sinkhorn(&huge, &SinkhornConfig { lambda: 1e-10, ..cfg() }),
            Err(Error::Sinkhorn(_))
        ));
    }

    fn spec() -> ModelSpec {
        ModelSpec::reduced_lenet([3, 16, 16], 4).unwrap()
    }

    /// Shuffles conv filters with `perms[layer]` and re-indexes consumers,
    /// producing a functionally identical network.
    pub(crate) fn shuffled_clone(w: &ModelWeights, perms: &[(usize, Vec<usize>)]) -> ModelWeights {
        let spec = w.spec().clone();
        let shapes = spec.shapes().unwrap();
        let mut layers = w.layers().to_vec();
        for (layer, perm) in perms {
            let LayerParams::Conv(t) = &layers[*layer] else { panic!() };
            layers[*layer] = LayerParams::Conv(t.permute_filters(perm).unwrap());
            // next parameterised consumer
            let mut j = layer + 1;
            let mut expanded = perm.clone();
            loop {
                match &spec.layers[j] {
                    Layer::Conv { .. } => {
                        let LayerParams::Conv(t) = &layers[j] else { panic!() };
                        layers[j] = LayerParams::Conv(t.permute_channels(&expanded).unwrap());
                        break;
                    }
                    Layer::Flatten => {
                        let plane = shapes[j][1] * shapes[j][2];
                        expanded = expanded.iter().flat_map(|&o| (0..plane).map(move |p| o * plane + p)).collect();
                    }
                    Layer::Linear { .. } => {
                        let LayerParams::Linear { weight, bias } = &layers[j] else { panic!() };
                        layers[j] = LayerParams::Linear {
                            weight: weight.permute_rows(&expanded).unwrap(),
                            bias: bias.clone(),
                        };
                        break;
                    }
                    _ => {}
                }
                j += 1;
            }
        }
        ModelWeights::from_layers(&spec, layers).unwrap()
    }

    #[test]
    fn self_alignment_is_noop() {
        let w = ModelWeights::init(&spec(), &mut SeededRng::new(1)).unwrap();
        let a = align_station(&w, &w, &cfg()).unwrap();
        assert_eq!(a.weights, w);
        assert!(a.layers.iter().all(|l| l.permutation.is_identity()));
    }

    #[test]
    fn shuffled_clone_is_recovered() {
        let mut rng = SeededRng::new(2);
        let w = ModelWeights::init(&spec(), &mut rng).unwrap();
        let mut p0: Vec<usize> = (0..8).collect();
        let mut p1: Vec<usize> = (0..16).collect();
        rng.shuffle(&mut p0);
        rng.shuffle(&mut p1);
        let target = shuffled_clone(&w, &[(0, p0.clone()), (3, p1.clone())]);
        let batch = gaussian_sample(&mut rng, 3, 768, 1.0).unwrap();
        let before = crate::model::forward(&w, &batch, &[]).unwrap().logits;
        let after = crate::model::forward(&target, &batch, &[]).unwrap().logits;
        assert!(before.sub(&after).unwrap().max_abs() < 1e-10, "shuffle must preserve function");

        let a = align_station(&w, &target, &cfg()).unwrap();
        // target[i] = ref[p0[i]], so position a must read target[p0⁻¹[a]]
        let inv0 = PermutationMap { perm: p0, plan_residual: 0.0 }.inverse();
        assert_eq!(a.layers[0].permutation.perm, inv0);
        for (x, y) in a.weights.to_flat().iter().zip(w.to_flat()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn larger_kernels_are_resized() {
        let mut rng = SeededRng::new(3);
        let reference = ModelWeights::init(&spec(), &mut rng).unwrap();
        let five = ModelSpec::lenet_with_kernel([3, 16, 16], 4, 5).unwrap();
        let target = ModelWeights::init(&five, &mut rng).unwrap();
        let a = align_station(&reference, &target, &cfg()).unwrap();
        assert_eq!(a.weights.conv(0).unwrap().kernel_size(), 3);
        assert_eq!(a.layers[0].resized_from, Some(5));
        assert_eq!(a.weights.fingerprint(), reference.fingerprint());
    }

    #[test]
    fn differing_filter_counts_rejected() {
        let mut rng = SeededRng::new(4);
        let reference = ModelWeights::init(&spec(), &mut rng).unwrap();
        let mut wide = spec();
        wide.layers[0] = Layer::Conv {
            filters: 6,
            channels: 3,
            kernel: 3,
        };
        wide.layers[3] = Layer::Conv {
            filters: 16,
            channels: 6,
            kernel: 3,
        };
        let target = ModelWeights::init(&wide, &mut rng).unwrap();
        assert!(align_station(&reference, &target, &cfg()).is_err());
    }

    #[test]
    fn gram_follows_feature_permutation() {
        let mut rng = SeededRng::new(5);
        let w = ModelWeights::init(&spec(), &mut rng).unwrap();
        let mut p1: Vec<usize> = (0..16).collect();
        rng.shuffle(&mut p1);
        let target = shuffled_clone(&w, &[(3, p1)]);
        let batch = gaussian_sample(&mut rng, 6, 768, 1.0).unwrap();
        let g_ref = GramStat::from_activations(7, &crate::model::forward(&w, &batch, &[7]).unwrap().taps[0].x);
        let g_tgt = GramStat::from_activations(7, &crate::model::forward(&target, &batch, &[7]).unwrap().taps[0].x);
        let a = align_station(&w, &target, &cfg()).unwrap();
        let re = a.reindex_gram(&g_tgt).unwrap();
        assert!(re.gram.sub(&g_ref.gram).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn breadth_cases() {
        let mut rng = SeededRng::new(6);
        let b = bank(&mut rng, [5, 2, 3, 3]);
        assert_eq!(breadth_proxy(&[&b, &b]).unwrap(), 0.0);
        assert!(breadth_proxy(&[&b]).is_err());
        let shuffled = b.permute_filters(&[3, 1, 4, 0, 2]).unwrap();
        let pre = breadth_proxy(&[&b, &shuffled]).unwrap();
        let norm_b = normalize_filters(&b).unwrap();
        let norm_s = normalize_filters(&shuffled).unwrap();
        let plan = sinkhorn(&cost_matrix(&norm_b, &norm_s).unwrap(), &cfg()).unwrap();
        let perm = round_to_permutation(&plan).unwrap();
        let aligned = shuffled.permute_filters(&perm.perm).unwrap();
        let post = breadth_proxy(&[&b, &aligned]).unwrap();
        assert!(pre > 0.0);
        assert!(post < 1e-10);
    }

    proptest! {
        #[test]
        fn plans_are_doubly_stochastic(seed in 0u64..500, k in 1usize..=16) {
            let mut rng = SeededRng::new(seed);
            let b1 = bank(&mut rng, [k, 2, 2, 2]);
            let b2 = bank(&mut rng, [k, 2, 2, 2]);
            let c = cost_matrix(&normalize_filters(&b1).unwrap(), &normalize_filters(&b2).unwrap()).unwrap();
            let plan = sinkhorn(&c, &cfg()).unwrap();
            prop_assert!(plan.plan.as_slice().iter().all(|&v| v >= 0.0));
            prop_assert!(marginal_residual(&plan.plan, 1.0) <= 1e-6);
            prop_assert!(plan.marginal_residual <= 1e-6);
        }

        #[test]
        fn alignment_never_beats_identity_backwards(seed in 0u64..200) {
            let mut rng = SeededRng::new(seed);
            let reference = ModelWeights::init(&spec(), &mut rng).unwrap();
            let target = ModelWeights::init(&spec(), &mut rng).unwrap();
            let a = align_station(&reference, &target, &cfg()).unwrap();
            for l in &a.layers {
                prop_assert!(l.post_cost <= l.pre_cost + 1e-12);
            }
        }

        #[test]
        fn rounded_cost_is_invariant_under_shared_permutation(seed in 0u64..300, k in 2usize..=8) {
            let mut rng = SeededRng::new(seed);
            let b1 = bank(&mut rng, [k, 1, 2, 2]);
            let b2 = bank(&mut rng, [k, 1, 2, 2]);
            let mut p: Vec<usize> = (0..k).collect();
            rng.shuffle(&mut p);
            let opt = |x: &Tensor4, y: &Tensor4| {
                let c = cost_matrix(&normalize_filters(x).unwrap(), &normalize_filters(y).unwrap()).unwrap();
                assignment_cost(&c.0, &min_cost_assignment(&c.0).unwrap())
            };
            let base = opt(&b1, &b2);
            let permuted = opt(&b1.permute_filters(&p).unwrap(), &b2.permute_filters(&p).unwrap());
            prop_assert!((base - permuted).abs() <= 1e-9);
        }
    }
}
