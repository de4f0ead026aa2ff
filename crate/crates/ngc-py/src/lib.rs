//! Python bindings: the main types and operations behind `import ngc_py`.
//!
//! Matrices cross the boundary as nested lists; larger structured results
//! (reports) cross as JSON strings so the Python side can `json.loads` them.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use ngc_core::dynamics::{external_potential_test, iss_bound_check, IssSpec};
use ngc_core::groups::{self, Activation, IntraMetric};
use ngc_core::netmodel::{self, TaskSpec, ToyConfig};
use ngc_core::pipeline::{run_pipeline, RunConfig};
use ngc_core::policy::{
    self, compile_delayed_link, enumerate_policies, ngc_param_count, rank_for_budget,
    render_policy, AugmentedSharing, InterLink, MetricBudget, ModelShape, PolicyFamily,
};
use ngc_core::verify::{verify_suite, VerifyLevel};

fn py_err(e: ngc_core::NgcError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Dense real matrix, constructed from a list of equal-length rows.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Matrix {
    inner: ngc_core::Matrix,
}

#[pymethods]
impl Matrix {
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Matrix {
            inner: ngc_core::Matrix::from_rows(&rows).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn eye(n: usize) -> Matrix {
        Matrix {
            inner: ngc_core::Matrix::eye(n),
        }
    }

    #[staticmethod]
    fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            inner: ngc_core::Matrix::zeros(rows, cols),
        }
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    fn tolist(&self) -> Vec<Vec<f64>> {
        (0..self.inner.rows())
            .map(|i| self.inner.row(i).to_vec())
            .collect()
    }

    fn matmul(&self, other: &Matrix) -> PyResult<Matrix> {
        if self.inner.cols() != other.inner.rows() {
            return Err(PyValueError::new_err("inner dimensions do not match"));
        }
        Ok(Matrix {
            inner: self.inner.matmul(&other.inner),
        })
    }

    fn transpose(&self) -> Matrix {
        Matrix {
            inner: self.inner.transpose(),
        }
    }

    fn frob_norm(&self) -> f64 {
        self.inner.frob_norm()
    }

    fn sub(&self, other: &Matrix) -> PyResult<Matrix> {
        if self.inner.shape() != other.inner.shape() {
            return Err(PyValueError::new_err("shapes do not match"));
        }
        Ok(Matrix {
            inner: self.inner.sub(&other.inner),
        })
    }

    fn __repr__(&self) -> String {
        format!("Matrix({}x{})", self.inner.rows(), self.inner.cols())
    }
}

/// Thin SVD: returns (u, s, vt).
#[pyfunction]
fn svd(m: &Matrix) -> PyResult<(Matrix, Vec<f64>, Matrix)> {
    let r = ngc_core::linalg::svd(&m.inner).map_err(py_err)?;
    Ok((Matrix { inner: r.u }, r.s, Matrix { inner: r.vt }))
}

#[pyfunction]
fn pinv(m: &Matrix) -> PyResult<Matrix> {
    Ok(Matrix {
        inner: ngc_core::linalg::pinv(&m.inner).map_err(py_err)?,
    })
}

#[pyfunction]
fn sigma_max(m: &Matrix) -> PyResult<f64> {
    ngc_core::linalg::sigma_max(&m.inner).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (x, y, ridge = 0.0))]
fn least_squares(x: &Matrix, y: &Matrix, ridge: f64) -> PyResult<Matrix> {
    Ok(Matrix {
        inner: ngc_core::linalg::least_squares(&x.inner, &y.inner, ridge).map_err(py_err)?,
    })
}

/// A factorized weight block: per-neuron states plus the similarity metric.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct StateBlock {
    inner: groups::StateBlock,
}

#[pymethods]
impl StateBlock {
    #[getter]
    fn n_out(&self) -> usize {
        self.inner.n_out()
    }

    #[getter]
    fn n_in(&self) -> usize {
        self.inner.n_in()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    fn reconstruct(&self) -> Matrix {
        Matrix {
            inner: self.inner.reconstruct(),
        }
    }

    fn apply(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.apply(&x).map_err(py_err)
    }

    /// Swap in a seeded tanh bilinear metric of width `r_tilde`.
    #[pyo3(signature = (r_tilde, seed = 0, shared = false))]
    fn with_tanh_metric(&self, r_tilde: usize, seed: u64, shared: bool) -> StateBlock {
        let r = self.inner.rank();
        let metric = if shared {
            IntraMetric::shared_seeded(r, r_tilde, Activation::Tanh, seed)
        } else {
            IntraMetric::bilinear_seeded(r, r_tilde, Activation::Tanh, seed)
        };
        StateBlock {
            inner: self.inner.clone().with_metric(metric),
        }
    }

    /// Gradient-descend the metric toward `target`; returns the calibrated
    /// block and the loss trajectory.
    fn calibrate(
        &self,
        target: &Matrix,
        epochs: usize,
        lr: f64,
    ) -> PyResult<(StateBlock, Vec<f64>)> {
        let (block, losses) =
            groups::calibrate_metric(&self.inner, &target.inner, epochs, lr).map_err(py_err)?;
        Ok((StateBlock { inner: block }, losses))
    }
}

/// Best rank-`r` factorization of a dense block into neuronal states.
#[pyfunction]
fn factorize_block(w: &Matrix, r: usize) -> PyResult<StateBlock> {
    Ok(StateBlock {
        inner: groups::factorize_block(&w.inner, r).map_err(py_err)?,
    })
}

#[pyfunction]
fn metric_reparameterize(m: &Matrix) -> PyResult<(Matrix, Matrix)> {
    let (l, r) = groups::metric_reparameterize(&m.inner).map_err(py_err)?;
    Ok((Matrix { inner: l }, Matrix { inner: r }))
}

#[pyfunction]
fn spd_reduce(g: &Matrix) -> PyResult<Matrix> {
    Ok(Matrix {
        inner: groups::spd_reduce(&g.inner).map_err(py_err)?,
    })
}

/// Returns (lossless, isometry_or_None, feature_residual, output_deviation).
#[pyfunction]
fn sharing_lossless_check(
    b1: &StateBlock,
    b2: &StateBlock,
    inputs: &Matrix,
) -> PyResult<(bool, Option<Matrix>, f64, f64)> {
    let check =
        groups::sharing_lossless_check(&b1.inner, &b2.inner, &inputs.inner).map_err(py_err)?;
    Ok((
        check.lossless,
        check.isometry.map(|m| Matrix { inner: m }),
        check.feature_residual,
        check.output_deviation,
    ))
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct Policy {
    inner: policy::Policy,
    shape: ModelShape,
}

#[pymethods]
impl Policy {
    #[getter]
    fn ratio(&self) -> f64 {
        self.inner.ratio
    }

    #[getter]
    fn merge_set_count(&self) -> usize {
        self.inner.merge_sets.len()
    }

    #[getter]
    fn selection(&self) -> Vec<String> {
        self.inner.selection.iter().map(|id| id.to_string()).collect()
    }

    fn render(&self) -> String {
        render_policy(&self.inner, &self.shape)
    }

    /// (standalone ranks by block, merged ranks) under the budget rule.
    fn rank_allocation(&self) -> PyResult<(Vec<(String, usize)>, Vec<usize>)> {
        let alloc = rank_for_budget(&self.inner, &self.shape).map_err(py_err)?;
        let standalone = alloc
            .standalone
            .iter()
            .map(|(id, r)| (id.to_string(), *r))
            .collect();
        Ok((standalone, alloc.merged.clone()))
    }

    fn ngc_param_count(&self) -> PyResult<usize> {
        let alloc = rank_for_budget(&self.inner, &self.shape).map_err(py_err)?;
        Ok(ngc_param_count(&self.inner, &self.shape, &alloc, MetricBudget::None))
    }

    fn __repr__(&self) -> String {
        format!("Policy('{}')", self.render())
    }
}

#[pyfunction]
#[pyo3(signature = (spec, layers = 2, d_model = 32, d_ff = 64))]
fn parse_policy(spec: &str, layers: usize, d_model: usize, d_ff: usize) -> PyResult<Policy> {
    let shape = ModelShape {
        layers,
        d_model,
        d_ff,
    };
    Ok(Policy {
        inner: policy::parse_policy(spec, &shape).map_err(py_err)?,
        shape,
    })
}

#[pyfunction]
#[pyo3(signature = (family, ratio = 0.5, layers = 2, d_model = 32, d_ff = 64))]
fn enumerate_policy_family(
    family: &str,
    ratio: f64,
    layers: usize,
    d_model: usize,
    d_ff: usize,
) -> PyResult<Vec<String>> {
    let fam = match family {
        "none" => PolicyFamily::None,
        "adjacent-same-kind" => PolicyFamily::AdjacentSameKind,
        "adjacent-cross-kind" => PolicyFamily::AdjacentCrossKind,
        "hybrid-bank" => PolicyFamily::HybridBank,
        other => return Err(PyValueError::new_err(format!("unknown family '{other}'"))),
    };
    let shape = ModelShape {
        layers,
        d_model,
        d_ff,
    };
    Ok(enumerate_policies(&shape, fam, ratio)
        .iter()
        .map(|p| render_policy(p, &shape))
        .collect())
}

/// A compiled delayed/zero-order-hold link over an augmented state.
#[pyclass]
struct DelayLine {
    inner: AugmentedSharing,
}

#[pymethods]
impl DelayLine {
    fn step(&mut self, z: Vec<f64>) -> Vec<f64> {
        self.inner.step(&z)
    }

    fn extra_state_dim(&self) -> usize {
        self.inner.extra_state_dim()
    }
}

#[pyfunction]
#[pyo3(signature = (delay, hold_period, signal_dim))]
fn compile_delay_link(delay: usize, hold_period: usize, signal_dim: usize) -> DelayLine {
    let link = InterLink {
        src: 0,
        dst: 1,
        delay,
        hold_period,
    };
    DelayLine {
        inner: compile_delayed_link(&link, signal_dim),
    }
}

/// Monte-Carlo audit of the deviation bound; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (dim = 4, rho_max = 0.9, horizon = 200, trials = 100, seed = 0))]
fn iss_check(dim: usize, rho_max: f64, horizon: usize, trials: usize, seed: u64) -> PyResult<String> {
    let spec = IssSpec {
        dim,
        rho_max,
        ..IssSpec::default()
    };
    let report = iss_bound_check(&spec, horizon, trials, seed).map_err(py_err)?;
    serde_json::to_string(&report).map_err(json_err)
}

/// External-potential sweep report as JSON.
#[pyfunction]
#[pyo3(signature = (scales, horizon = 80, trials = 20, seed = 0))]
fn potential_sweep(scales: Vec<f64>, horizon: usize, trials: usize, seed: u64) -> PyResult<String> {
    let report = external_potential_test(&IssSpec::default(), &scales, horizon, trials, seed)
        .map_err(py_err)?;
    serde_json::to_string(&report).map_err(json_err)
}

/// Train the toy root model; returns (model, accuracy).
#[pyclass]
struct ToyModel {
    root: netmodel::RootModel,
}

#[pymethods]
impl ToyModel {
    fn eval(&self, task_json: &str, n_samples: usize, seed: u64) -> PyResult<f64> {
        let task: TaskSpec = serde_json::from_str(task_json).map_err(json_err)?;
        netmodel::eval_task(&self.root, &task, n_samples, seed).map_err(py_err)
    }

    fn block_weight(&self, layer: usize, kind: &str) -> PyResult<Matrix> {
        let kind = match kind {
            "Q" => policy::BlockKind::Q,
            "K" => policy::BlockKind::K,
            "V" => policy::BlockKind::V,
            "O" => policy::BlockKind::O,
            "UP" => policy::BlockKind::Up,
            "DOWN" => policy::BlockKind::Down,
            other => return Err(PyValueError::new_err(format!("unknown kind '{other}'"))),
        };
        self.root
            .core
            .dense(policy::BlockId::new(layer, kind))
            .map(|w| Matrix { inner: w.clone() })
            .ok_or_else(|| PyValueError::new_err("block is not dense"))
    }
}

#[pyfunction]
#[pyo3(signature = (task_json, steps = 500, seed = 0, layers = 2, d_model = 32, d_ff = 64, vocab = 64, context = 32))]
#[allow(clippy::too_many_arguments)]
fn train_root(
    task_json: &str,
    steps: usize,
    seed: u64,
    layers: usize,
    d_model: usize,
    d_ff: usize,
    vocab: usize,
    context: usize,
) -> PyResult<(ToyModel, f64)> {
    let task: TaskSpec = serde_json::from_str(task_json).map_err(json_err)?;
    let cfg = ToyConfig {
        layers,
        d_model,
        d_ff,
        vocab,
        context,
        seed,
    };
    let trained = netmodel::train_root(&cfg, &task, steps).map_err(py_err)?;
    Ok((
        ToyModel {
            root: trained.model,
        },
        trained.final_accuracy,
    ))
}

/// Run the full pipeline from a JSON run config; returns the report JSON.
#[pyfunction]
fn run_pipeline_json(config_json: &str) -> PyResult<String> {
    let cfg: RunConfig = serde_json::from_str(config_json).map_err(json_err)?;
    let report = run_pipeline(&cfg).map_err(py_err)?;
    serde_json::to_string(&report).map_err(json_err)
}

/// Run the verification suite ("fast" or "full"); returns the report JSON.
#[pyfunction]
#[pyo3(signature = (level = "fast"))]
fn verify(level: &str) -> PyResult<String> {
    let level = match level {
        "fast" => VerifyLevel::Fast,
        "full" => VerifyLevel::Full,
        other => return Err(PyValueError::new_err(format!("unknown level '{other}'"))),
    };
    let report = verify_suite(level);
    serde_json::to_string(&report).map_err(json_err)
}

#[pymodule]
fn ngc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Matrix>()?;
    m.add_class::<StateBlock>()?;
    m.add_class::<Policy>()?;
    m.add_class::<DelayLine>()?;
    m.add_class::<ToyModel>()?;
    m.add_function(wrap_pyfunction!(svd, m)?)?;
    m.add_function(wrap_pyfunction!(pinv, m)?)?;
    m.add_function(wrap_pyfunction!(sigma_max, m)?)?;
    m.add_function(wrap_pyfunction!(least_squares, m)?)?;
    m.add_function(wrap_pyfunction!(factorize_block, m)?)?;
    m.add_function(wrap_pyfunction!(metric_reparameterize, m)?)?;
    m.add_function(wrap_pyfunction!(spd_reduce, m)?)?;
    m.add_function(wrap_pyfunction!(sharing_lossless_check, m)?)?;
    m.add_function(wrap_pyfunction!(parse_policy, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_policy_family, m)?)?;
    m.add_function(wrap_pyfunction!(compile_delay_link, m)?)?;
    m.add_function(wrap_pyfunction!(iss_check, m)?)?;
    m.add_function(wrap_pyfunction!(potential_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(train_root, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline_json, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
