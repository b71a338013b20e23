//! Python bindings for `hetero_gnn`.
//!
//! Matrices cross the boundary as lists of rows. Hyperparameters are
//! keyword arguments named after the fields of `HyperParams`; `combine` and
//! `spectral` take strings, and `adjacency` / `reconnected` toggle the two
//! aggregation branches.

use std::path::PathBuf;

use hetero_gnn::datasets::{self, DatasetDescriptor};
use hetero_gnn::graph;
use hetero_gnn::spectral::{self, AnchorSet, SpectralFeatures};
use hetero_gnn::train::{self, HyperParams, TrainReport};
use ndarray::Array2;
use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: hetero_gnn::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if let Some(i) = rows.iter().position(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!("row {i} has {} entries, expected {d}", rows[i].len())));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Node-classification graph: features, labels and an undirected edge set.
#[pyclass(name = "Graph", frozen)]
pub struct PyGraph {
    inner: graph::Graph,
}

#[pymethods]
impl PyGraph {
    #[new]
    #[pyo3(signature = (features, labels, edges, class_count=None))]
    fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        edges: Vec<(usize, usize)>,
        class_count: Option<usize>,
    ) -> PyResult<Self> {
        let classes = class_count.unwrap_or_else(|| labels.iter().max().map_or(0, |&y| y + 1));
        let inner = graph::Graph::from_edges(to_array(features)?, labels, classes, &edges).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Reads a tab-separated node file and edge file.
    #[staticmethod]
    fn load(node_file: PathBuf, edge_file: PathBuf) -> PyResult<Self> {
        let desc = DatasetDescriptor::new("custom", node_file, edge_file);
        Ok(Self {
            inner: datasets::load_graph(&desc).map_err(py_err)?,
        })
    }

    /// Graph with Gaussian class features and a target edge homophily.
    #[staticmethod]
    #[pyo3(signature = (n, classes, d, h, seed, noise=datasets::SYNTH_NOISE_STD))]
    fn synthetic(n: usize, classes: usize, d: usize, h: f64, seed: u64, noise: f64) -> PyResult<Self> {
        Ok(Self {
            inner: datasets::synth_graph_with_noise(n, classes, d, h, noise, seed).map_err(py_err)?,
        })
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.n_nodes()
    }

    #[getter]
    fn n_edges(&self) -> usize {
        self.inner.n_edges()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.features())
    }

    /// Undirected edges `(u, v)` with `u < v`.
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges().collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(n_nodes={}, n_edges={}, n_features={}, class_count={})",
            self.inner.n_nodes(),
            self.inner.n_edges(),
            self.inner.n_features(),
            self.inner.class_count()
        )
    }
}

#[pyfunction]
fn homophily_ratio(g: &PyGraph) -> PyResult<f64> {
    graph::homophily_ratio(&g.inner).map_err(py_err)
}

/// Dense symmetric normalisation of the adjacency with self-loops.
#[pyfunction]
fn normalize_sym(g: &PyGraph) -> Vec<Vec<f64>> {
    to_rows(&graph::normalize_sym(&g.inner).matrix.to_dense())
}

/// Per-class 48/32/20 split as a dict of boolean masks.
#[pyfunction]
fn stratified_split<'py>(py: Python<'py>, g: &PyGraph, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let split = graph::stratified_split(&g.inner, seed).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("train", split.train)?;
    out.set_item("val", split.val)?;
    out.set_item("test", split.test)?;
    Ok(out)
}

fn features_dict<'py>(py: Python<'py>, f: SpectralFeatures) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("f", to_rows(&f.f))?;
    out.set_item("eigenvalues", f.eigenvalues)?;
    out.set_item("method", f.method.as_str())?;
    Ok(out)
}

/// Dense spectral features with a Gaussian affinity. `sigma` defaults to
/// the median pairwise distance.
#[pyfunction]
#[pyo3(signature = (x, c, sigma=None))]
fn sc_dense<'py>(py: Python<'py>, x: Vec<Vec<f64>>, c: usize, sigma: Option<f64>) -> PyResult<Bound<'py, PyDict>> {
    let x = to_array(x)?;
    let f = py
        .detach(|| {
            let sigma = sigma.unwrap_or_else(|| spectral::median_pairwise_distance(x.view()));
            spectral::sc_dense(x.view(), c, sigma)
        })
        .map_err(py_err)?;
    features_dict(py, f)
}

/// Spectral features of the inner-product affinity.
#[pyfunction]
fn esc<'py>(py: Python<'py>, x: Vec<Vec<f64>>, c: usize) -> PyResult<Bound<'py, PyDict>> {
    let x = to_array(x)?;
    let f = py.detach(|| spectral::esc(x.view(), c)).map_err(py_err)?;
    features_dict(py, f)
}

/// Anchor-based spectral features. `anchors` overrides the `m` sampled
/// from `seed`.
#[pyfunction]
#[pyo3(signature = (x, c, m=None, seed=42, anchors=None))]
fn esc_anch<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    c: usize,
    m: Option<usize>,
    seed: u64,
    anchors: Option<Vec<usize>>,
) -> PyResult<Bound<'py, PyDict>> {
    let x = to_array(x)?;
    let n = x.nrows();
    let anchors = match (anchors, m) {
        (Some(idx), _) => AnchorSet::new(idx, n),
        (None, Some(m)) => AnchorSet::sample(n, m, seed),
        (None, None) => Ok(AnchorSet::all(n)),
    }
    .map_err(py_err)?;
    let f = py.detach(|| spectral::esc_anch(x.view(), &anchors, c)).map_err(py_err)?;
    features_dict(py, f)
}

fn hyper_from_kwargs(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<HyperParams> {
    let mut h = HyperParams::default();
    let Some(kwargs) = kwargs else {
        return Ok(h);
    };
    for (key, value) in kwargs.iter() {
        let key: String = key.extract()?;
        match key.as_str() {
            "lr" => h.lr = value.extract()?,
            "weight_decay" => h.weight_decay = value.extract()?,
            "dropout" => h.dropout = value.extract()?,
            "p" => h.p = value.extract()?,
            "q" => h.q = value.extract()?,
            "eps" => h.eps = value.extract()?,
            "m" => h.m = value.extract()?,
            "c" => h.c = value.extract()?,
            "k" => h.k = value.extract()?,
            "seed" => h.seed = value.extract()?,
            "epochs" => h.epochs = value.extract()?,
            "patience" => h.patience = value.extract()?,
            "decay_gate" => h.decay_gate = value.extract()?,
            "adjacency" => h.branches.adjacency = value.extract()?,
            "reconnected" => h.branches.reconnected = value.extract()?,
            "combine" => h.combine = value.extract::<String>()?.parse().map_err(py_err)?,
            "spectral" => h.spectral = value.extract::<String>()?.parse().map_err(py_err)?,
            other => return Err(PyKeyError::new_err(format!("unknown hyperparameter '{other}'"))),
        }
    }
    h.validate().map_err(py_err)?;
    Ok(h)
}

fn report_dict<'py>(py: Python<'py>, r: &TrainReport) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("run_seed", r.run_seed)?;
    out.set_item("test_acc", r.test_acc)?;
    out.set_item("best_epoch", r.best_epoch)?;
    out.set_item("best_val_loss", r.best_val_loss)?;
    out.set_item("epochs_run", r.epochs_run())?;
    out.set_item("train_loss", r.train_loss.clone())?;
    out.set_item("train_acc", r.train_acc.clone())?;
    out.set_item("val_loss", r.val_loss.clone())?;
    out.set_item("val_acc", r.val_acc.clone())?;
    Ok(out)
}

/// Trains one model on the experiment seed and returns its report.
#[pyfunction]
#[pyo3(signature = (g, **kwargs))]
fn fit<'py>(py: Python<'py>, g: &PyGraph, kwargs: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
    let hyper = hyper_from_kwargs(kwargs)?;
    let report = py.detach(|| train::fit(&g.inner, &hyper)).map_err(py_err)?;
    report_dict(py, &report)
}

/// Trains `runs` models on seeds `seed, seed + 1, ...`.
#[pyfunction]
#[pyo3(signature = (g, runs=10, **kwargs))]
fn run_experiment<'py>(
    py: Python<'py>,
    g: &PyGraph,
    runs: usize,
    kwargs: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let hyper = hyper_from_kwargs(kwargs)?;
    let outcome = py.detach(|| train::run_experiment_on(&g.inner, &hyper, runs)).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("acc_mean", outcome.summary.acc_mean)?;
    out.set_item("acc_std", outcome.summary.acc_std)?;
    let reports = outcome
        .summary
        .runs
        .iter()
        .map(|r| report_dict(py, r))
        .collect::<PyResult<Vec<_>>>()?;
    out.set_item("runs", reports)?;
    let support_h = outcome
        .models
        .iter()
        .map(|m| {
            let pairs = m.support.iter().filter(|&(i, j, _)| i < j).map(|(i, j, _)| (i, j));
            graph::edge_homophily(pairs, g.inner.labels()).ok()
        })
        .collect::<Vec<_>>();
    out.set_item("support_homophily", support_h)?;
    Ok(out)
}

#[pymodule]
fn hetero_gnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_function(wrap_pyfunction!(homophily_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_sym, m)?)?;
    m.add_function(wrap_pyfunction!(stratified_split, m)?)?;
    m.add_function(wrap_pyfunction!(sc_dense, m)?)?;
    m.add_function(wrap_pyfunction!(esc, m)?)?;
    m.add_function(wrap_pyfunction!(esc_anch, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
