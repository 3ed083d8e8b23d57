//! Python bindings. Matrices cross the boundary as lists of rows; joint
//! parameter matrices as lists of per-bag columns.

use maxentmil::experiments;
use maxentmil::lowrank;
use maxentmil::maxent;
use maxentmil::mil::{
    self, CitationKnnConfig, DistanceKind, LabeledBag, LabeledBagDataset, PipelineConfig,
};
use maxentmil::solvers;
use maxentmil::{
    BasisSpec, CmenaConfig, Domain, FeatureGrid, IntegrationGrid, MEDensity, NewtonConfig,
    RmdeConfig, SufficientStats,
};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: maxentmil::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter()
        .map(|c| c.iter().copied().collect())
        .collect()
}

/// Random trigonometric feature map on a box domain with a tensor grid.
#[pyclass(name = "Basis", module = "pymaxentmil", frozen)]
struct PyBasis {
    basis: BasisSpec,
    fg: FeatureGrid,
}

#[pymethods]
impl PyBasis {
    #[new]
    #[pyo3(signature = (d, m, seed, lo, hi, points_per_axis = 64))]
    fn new(
        d: usize,
        m: usize,
        seed: u64,
        lo: Vec<f64>,
        hi: Vec<f64>,
        points_per_axis: usize,
    ) -> PyResult<Self> {
        let basis = BasisSpec::new(d, m, seed).map_err(err)?;
        let domain = Domain::new(lo, hi).map_err(err)?;
        let grid = IntegrationGrid::tensor(&domain, points_per_axis).map_err(err)?;
        let fg = FeatureGrid::new(&basis, &grid).map_err(err)?;
        Ok(PyBasis { basis, fg })
    }

    #[getter]
    fn d(&self) -> usize {
        self.basis.d()
    }

    #[getter]
    fn m(&self) -> usize {
        self.basis.m()
    }

    fn eval(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.basis.eval(&x).map_err(err)?.iter().copied().collect())
    }

    /// Fits one bag by Newton's method.
    #[pyo3(signature = (instances, bag_id = "bag"))]
    fn fit_density(&self, instances: Vec<Vec<f64>>, bag_id: &str) -> PyResult<PyDensity> {
        let stats = self.stats(&instances, bag_id)?;
        let inner = maxent::fit_sde(&stats, &self.fg, &NewtonConfig::default()).map_err(err)?;
        Ok(PyDensity { inner })
    }

    /// Density with the given parameters.
    #[pyo3(signature = (lam, bag_id = "bag"))]
    fn density(&self, lam: Vec<f64>, bag_id: &str) -> PyResult<PyDensity> {
        let inner =
            MEDensity::from_lambda(bag_id, DVector::from_vec(lam), &self.fg).map_err(err)?;
        Ok(PyDensity { inner })
    }

    /// Joint fit of several bags. `solver` is `mde`, `cmen` or
    /// `rmde-continuation`.
    #[pyo3(signature = (bags, solver = "cmen", a = 1.0))]
    fn fit_joint(&self, bags: Vec<Vec<Vec<f64>>>, solver: &str, a: f64) -> PyResult<PyJointFit> {
        let stats: Vec<SufficientStats> = bags
            .iter()
            .enumerate()
            .map(|(i, b)| self.stats(b, &format!("bag{i:04}")))
            .collect::<PyResult<_>>()?;
        let newton = NewtonConfig::default();
        let (lambda, report) = match solver {
            "mde" => {
                let l = solvers::fit_mde(&stats, &self.fg, &newton).map_err(err)?;
                (l, None)
            }
            "cmen" => {
                let cfg = CmenaConfig {
                    a,
                    ..CmenaConfig::default()
                };
                let (l, r) = solvers::fit_cmen(&stats, &self.fg, &newton, &cfg).map_err(err)?;
                (l, Some(r))
            }
            "rmde-continuation" => {
                let (l, r) =
                    solvers::rmde_continuation(&stats, &self.fg, &newton, &RmdeConfig::default())
                        .map_err(err)?;
                (l, Some(r))
            }
            other => return Err(PyValueError::new_err(format!("unknown solver {other:?}"))),
        };
        let densities = lambda.densities(&self.fg).map_err(err)?;
        Ok(PyJointFit {
            lam: columns(&lambda.data),
            densities: densities
                .into_iter()
                .map(|inner| PyDensity { inner })
                .collect(),
            report: report
                .map(|r| serde_json::to_string(&r).expect("report serializes"))
                .unwrap_or_default(),
        })
    }
}

impl PyBasis {
    fn stats(&self, instances: &[Vec<f64>], bag_id: &str) -> PyResult<SufficientStats> {
        SufficientStats::from_instances(&matrix(instances)?, &self.basis, bag_id).map_err(err)
    }
}

/// A fitted exponential-family density.
#[pyclass(name = "Density", module = "pymaxentmil", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDensity {
    inner: MEDensity,
}

#[pymethods]
impl PyDensity {
    #[getter]
    fn bag_id(&self) -> String {
        self.inner.bag_id.clone()
    }

    #[getter]
    fn lam(&self) -> Vec<f64> {
        self.inner.lambda.iter().copied().collect()
    }

    #[getter]
    fn log_z(&self) -> f64 {
        self.inner.log_z
    }

    #[getter]
    fn mean_phi(&self) -> Vec<f64> {
        self.inner.mean_phi.iter().copied().collect()
    }

    fn kl(&self, other: &PyDensity) -> PyResult<f64> {
        maxent::kl(&self.inner, &other.inner).map_err(err)
    }

    fn sym_kl(&self, other: &PyDensity) -> PyResult<f64> {
        maxent::sym_kl(&self.inner, &other.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Density(bag_id={:?}, m={})",
            self.inner.bag_id,
            self.inner.m()
        )
    }
}

/// Result of `Basis.fit_joint`.
#[pyclass(name = "JointFit", module = "pymaxentmil", frozen)]
struct PyJointFit {
    /// One parameter vector per bag.
    #[pyo3(get)]
    lam: Vec<Vec<f64>>,
    #[pyo3(get)]
    densities: Vec<PyDensity>,
    /// Solver report as JSON; empty for `mde`.
    #[pyo3(get)]
    report: String,
}

/// Singular-value soft-thresholding.
#[pyfunction]
fn soft_threshold(x: Vec<Vec<f64>>, alpha: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(
        &lowrank::soft_threshold(&matrix(&x)?, alpha).map_err(err)?,
    ))
}

#[pyfunction]
fn nuclear_norm(x: Vec<Vec<f64>>) -> PyResult<f64> {
    lowrank::nuclear_norm(&matrix(&x)?).map_err(err)
}

/// `a N m / 2`.
#[pyfunction]
fn epsilon_bound(n_bags: usize, m: usize, a: f64) -> PyResult<f64> {
    solvers::epsilon_bound(n_bags, m, a).map_err(err)
}

#[pyfunction]
fn avg_hausdorff(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    mil::avg_hausdorff(&matrix(&a)?, &matrix(&b)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (train_labels, train_dist, query_dist, k = 5, k_prime = 5))]
fn citation_knn(
    train_labels: Vec<String>,
    train_dist: Vec<Vec<f64>>,
    query_dist: Vec<f64>,
    k: usize,
    k_prime: usize,
) -> PyResult<String> {
    let cfg = CitationKnnConfig { k, k_prime };
    mil::citation_knn(&train_labels, &matrix(&train_dist)?, &query_dist, &cfg).map_err(err)
}

/// Rank-`t` parameter matrix as columns.
#[pyfunction]
#[pyo3(signature = (m, n_bags, t, seed, scale = None))]
fn synth_lowrank_lambda(
    m: usize,
    n_bags: usize,
    t: usize,
    seed: u64,
    scale: Option<f64>,
) -> PyResult<Vec<Vec<f64>>> {
    let l = experiments::synth_lowrank_lambda(m, n_bags, t, seed, scale).map_err(err)?;
    Ok(columns(&l.data))
}

/// Stratified k-fold citation-kNN accuracy `(mean, std)`.
#[pyfunction]
#[pyo3(signature = (bags, labels, distance = "kl-mde", folds = 10, seed = 0, m = 20))]
fn kfold_accuracy(
    bags: Vec<Vec<Vec<f64>>>,
    labels: Vec<String>,
    distance: &str,
    folds: usize,
    seed: u64,
    m: usize,
) -> PyResult<(f64, f64)> {
    if bags.len() != labels.len() {
        return Err(PyValueError::new_err("one label per bag is needed"));
    }
    let distance: DistanceKind = serde_json::from_value(serde_json::Value::String(distance.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown distance {distance:?}")))?;
    let data = LabeledBagDataset::new(
        bags.iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (b, l))| {
                Ok(LabeledBag {
                    bag_id: format!("bag{i:04}"),
                    label: Some(l),
                    instances: matrix(b)?,
                })
            })
            .collect::<PyResult<_>>()?,
    )
    .map_err(err)?;
    let cfg = PipelineConfig {
        distance,
        m,
        ..PipelineConfig::default()
    };
    let res = mil::kfold_evaluate(&data, folds, &cfg, seed).map_err(err)?;
    Ok((res.mean_accuracy, res.std_accuracy))
}

#[pymodule]
fn pymaxentmil(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", maxentmil::VERSION)?;
    m.add_class::<PyBasis>()?;
    m.add_class::<PyDensity>()?;
    m.add_class::<PyJointFit>()?;
    m.add_function(wrap_pyfunction!(soft_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(nuclear_norm, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon_bound, m)?)?;
    m.add_function(wrap_pyfunction!(avg_hausdorff, m)?)?;
    m.add_function(wrap_pyfunction!(citation_knn, m)?)?;
    m.add_function(wrap_pyfunction!(synth_lowrank_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(kfold_accuracy, m)?)?;
    Ok(())
}
