//! Python bindings: the main value types plus the operations needed to run
//! and inspect a federation from a notebook.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use hfedatm_core::experiment::{build_federation, desk_run_config, FederationSpec};
use hfedatm_core::fot::{self, CostMatrix, SinkhornConfig};
use hfedatm_core::math::{Matrix, SeededRng};
use hfedatm_core::merge::{self, ServerConfig, StationPackage};
use hfedatm_core::model::{self, ModelSpec};
use hfedatm_core::orchestrator::{self, Mode, RoundRecord};
use hfedatm_core::{client, data};

fn to_py(e: hfedatm_core::Error) -> PyErr {
    use hfedatm_core::Error as E;
    match e {
        E::Io(e) => PyIOError::new_err(e.to_string()),
        E::InvalidArgument(_) | E::Dimension(_) | E::InvalidSpec(_) | E::ArchitectureMismatch { .. } | E::Format(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Matrix::from_vec(r, c, rows.into_iter().flatten().collect()).map_err(to_py)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    mode.parse().map_err(to_py)
}

/// Weights of the reduced LeNet.
#[pyclass(name = "ModelWeights", module = "hfedatm", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModelWeights {
    inner: model::ModelWeights,
}

#[pymethods]
impl PyModelWeights {
    /// Seeded initialisation for `image = (channels, height, width)`.
    #[staticmethod]
    #[pyo3(signature = (image, classes, seed=0))]
    fn init(image: (usize, usize, usize), classes: usize, seed: u64) -> PyResult<Self> {
        let spec = ModelSpec::reduced_lenet([image.0, image.1, image.2], classes).map_err(to_py)?;
        let inner = model::ModelWeights::init(&spec, &mut SeededRng::new(seed)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: model::load_checkpoint(path.as_ref()).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save_checkpoint(&self.inner, path.as_ref()).map_err(to_py)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn input_len(&self) -> usize {
        self.inner.spec().input_len()
    }

    #[getter]
    fn fingerprint(&self) -> u64 {
        self.inner.fingerprint()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.inner.to_flat()
    }

    /// Class predictions for a batch with one flattened image per row.
    fn predict(&self, batch: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        model::predict(&self.inner, &matrix(batch)?).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("ModelWeights(params={}, fingerprint={:016x})", self.inner.num_params(), self.inner.fingerprint())
    }
}

/// Entropic transport plan between two filter banks.
#[pyclass(name = "TransportPlan", module = "hfedatm", get_all, skip_from_py_object)]
#[derive(Clone)]
pub struct PyTransportPlan {
    plan: Vec<Vec<f64>>,
    iterations: usize,
    sinkhorn_residual: f64,
    marginal_residual: f64,
    /// Hard permutation read off the plan.
    permutation: Vec<usize>,
}

#[pymethods]
impl PyTransportPlan {
    fn __repr__(&self) -> String {
        format!(
            "TransportPlan(k={}, iterations={}, marginal_residual={:.1e}, permutation={:?})",
            self.plan.len(),
            self.iterations,
            self.marginal_residual,
            self.permutation
        )
    }
}

/// Log-domain Sinkhorn on a square cost matrix, rounded to a permutation.
#[pyfunction]
#[pyo3(signature = (cost, lambda_ot=0.05, max_iter=25, tol=1e-9))]
fn sinkhorn(cost: Vec<Vec<f64>>, lambda_ot: f64, max_iter: usize, tol: f64) -> PyResult<PyTransportPlan> {
    let config = SinkhornConfig {
        lambda: lambda_ot,
        max_iter,
        tol,
    };
    let plan = fot::sinkhorn(&CostMatrix(matrix(cost)?), &config).map_err(to_py)?;
    let perm = fot::round_to_permutation(&plan).map_err(to_py)?;
    Ok(PyTransportPlan {
        plan: rows(&plan.plan),
        iterations: plan.iterations,
        sinkhorn_residual: plan.sinkhorn_residual,
        marginal_residual: plan.marginal_residual,
        permutation: perm.perm,
    })
}

/// Closed-form merge of `(gram, weight)` pairs; returns `(weight, jitter)`.
#[pyfunction]
fn regmean(grams: Vec<Vec<Vec<f64>>>, weights: Vec<Vec<Vec<f64>>>) -> PyResult<(Vec<Vec<f64>>, f64)> {
    if grams.len() != weights.len() {
        return Err(PyValueError::new_err("need one weight matrix per Gram"));
    }
    let g = grams.into_iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
    let w = weights.into_iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
    let pairs: Vec<(&Matrix, &Matrix)> = g.iter().zip(&w).collect();
    let sol = merge::regmean_solve(&pairs).map_err(to_py)?;
    Ok((rows(&sol.weight), sol.jitter))
}

/// `counts[d][c]` of the heterogeneous split.
#[pyfunction]
fn partition(lambda_: f64, ownership: Vec<Vec<usize>>, domain_sizes: Vec<usize>) -> PyResult<Vec<Vec<usize>>> {
    Ok(data::partition(lambda_, &ownership, &domain_sizes).map_err(to_py)?.counts)
}

/// Offline server merge of station checkpoints with their Gram sidecars,
/// used as stored. Returns the merged weights and the merge report as JSON.
#[pyfunction]
#[pyo3(signature = (checkpoints, grams, lambda_ot=0.05, max_iter=25))]
fn merge_checkpoints(checkpoints: Vec<String>, grams: Vec<String>, lambda_ot: f64, max_iter: usize) -> PyResult<(PyModelWeights, String)> {
    if checkpoints.len() != grams.len() {
        return Err(PyValueError::new_err("need one Gram sidecar per checkpoint"));
    }
    let mut packages = Vec::new();
    for (i, (c, g)) in checkpoints.iter().zip(&grams).enumerate() {
        packages.push(StationPackage {
            station: i,
            model: model::load_checkpoint(c.as_ref()).map_err(to_py)?,
            grams: client::load_grams(g.as_ref()).map_err(to_py)?,
            active_clients: 1,
            mean_loss: 0.0,
        });
    }
    let config = ServerConfig {
        sinkhorn: SinkhornConfig {
            lambda: lambda_ot,
            max_iter,
            ..SinkhornConfig::default()
        },
        reference: 0,
    };
    let (weights, report) = merge::hfedatm_merge(&packages, &config).map_err(to_py)?;
    let json = serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((PyModelWeights { inner: weights }, json))
}

/// One global round of a run.
#[pyclass(name = "RoundRecord", module = "hfedatm", get_all, skip_from_py_object)]
#[derive(Clone)]
pub struct PyRoundRecord {
    round: usize,
    mode: String,
    target_acc: f64,
    mean_station_loss: f64,
    breadth_pre: f64,
    breadth_post: f64,
    jitter_count: usize,
    seconds: f64,
}

impl From<&RoundRecord> for PyRoundRecord {
    fn from(r: &RoundRecord) -> Self {
        Self {
            round: r.round,
            mode: r.mode.as_str().to_string(),
            target_acc: r.target_acc,
            mean_station_loss: r.mean_station_loss(),
            breadth_pre: r.breadth_pre,
            breadth_post: r.breadth_post,
            jitter_count: r.jitter_count,
            seconds: r.seconds(),
        }
    }
}

#[pymethods]
impl PyRoundRecord {
    fn __repr__(&self) -> String {
        format!("RoundRecord(round={}, mode={}, target_acc={:.4})", self.round, self.mode, self.target_acc)
    }
}

/// Runs the desk-scale synthetic federation and returns the per-round
/// records and the final global weights.
#[pyfunction]
#[pyo3(signature = (mode="hfedatm", seed=0, lambda_=1.0, rounds=None, per_domain=None))]
fn run_desk(
    py: Python<'_>,
    mode: &str,
    seed: u64,
    lambda_: f64,
    rounds: Option<usize>,
    per_domain: Option<usize>,
) -> PyResult<(Vec<PyRoundRecord>, PyModelWeights)> {
    let mode = parse_mode(mode)?;
    let mut spec = FederationSpec {
        lambda: lambda_,
        ..FederationSpec::desk()
    };
    if let Some(n) = per_domain {
        spec.generator.per_domain = n;
    }
    let mut config = desk_run_config(mode, seed);
    if let Some(r) = rounds {
        config.rounds = r;
    }
    let out = py
        .detach(|| {
            let fed = build_federation(&spec, seed)?;
            orchestrator::run(&config, &fed.topology, &fed.client_data, &fed.target, &fed.init)
        })
        .map_err(to_py)?;
    Ok((out.records.iter().map(PyRoundRecord::from).collect(), PyModelWeights { inner: out.weights }))
}

#[pymodule]
fn hfedatm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelWeights>()?;
    m.add_class::<PyTransportPlan>()?;
    m.add_class::<PyRoundRecord>()?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(regmean, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(merge_checkpoints, m)?)?;
    m.add_function(wrap_pyfunction!(run_desk, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
