//! Python bindings: `import ratctr`.
//!
//! Configs go in as keyword arguments and reports come back as plain dicts;
//! both cross the boundary as JSON, so every `TrainConfig` key is accepted.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rat_core::data::{self, Record, SchemaSpec, SplitRatios};
use rat_core::model;
use rat_core::retrieval::{self, Eligibility, RetrievalResult};
use rat_core::synthetic::{self, SyntheticConfig};
use rat_core::training::{self, Neighbors, Split, TrainConfig};

fn err(e: rat_core::Error) -> PyErr {
    match e {
        rat_core::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn train_config(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<TrainConfig> {
    let cfg: TrainConfig = match kwargs {
        Some(kw) => {
            let text: String = py.import("json")?.call_method1("dumps", (kw,))?.extract()?;
            serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?
        }
        None => TrainConfig::default(),
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn parse_split(split: &str) -> PyResult<Split> {
    split.parse().map_err(err)
}

/// Chronologically sorted, split and encoded records.
#[pyclass(frozen)]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (path, label, features, timestamp=None, split=(0.7, 0.2, 0.1), delimiter=','))]
    fn from_csv(
        path: &str,
        label: &str,
        features: Vec<String>,
        timestamp: Option<&str>,
        split: (f64, f64, f64),
        delimiter: char,
    ) -> PyResult<Self> {
        let names: Vec<&str> = features.iter().map(String::as_str).collect();
        let mut spec = SchemaSpec::new(label, timestamp, &names);
        spec.split = SplitRatios::new(split.0, split.1, split.2);
        spec.delimiter = delimiter;
        Ok(Dataset { inner: data::load_csv(path, &spec).map_err(err)? })
    }

    /// The generated neighbor-dependent task.
    #[staticmethod]
    #[pyo3(signature = (num_users=100, num_distractors=15, seed=42))]
    fn synthetic(num_users: usize, num_distractors: usize, seed: u64) -> PyResult<Self> {
        let cfg = SyntheticConfig { num_users, num_distractors, seed, ..Default::default() };
        Ok(Dataset { inner: synthetic::dataset(&cfg).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Dataset { inner: data::Dataset::load(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn field_names(&self) -> Vec<String> {
        self.inner.schema.iter().map(|f| f.name.clone()).collect()
    }

    /// `(train, valid, test)` record counts.
    #[getter]
    fn split_sizes(&self) -> (usize, usize, usize) {
        (self.inner.train().len(), self.inner.valid().len(), self.inner.test().len())
    }

    #[getter]
    fn missing_ratio(&self) -> f64 {
        self.inner.missing_ratio()
    }

    /// Records of one split as `(field_ids, label, timestamp, index)` tuples.
    fn records(&self, split: &str) -> PyResult<Vec<(Vec<u32>, u8, i64, usize)>> {
        let recs = match parse_split(split)? {
            Split::Train => self.inner.train(),
            Split::Valid => self.inner.valid(),
            Split::Test => self.inner.test(),
        };
        Ok(recs.iter().map(|r| (r.field_ids.clone(), r.label, r.timestamp, r.index)).collect())
    }

    /// Encodes raw values against the training vocabularies; unseen values map to 0.
    fn encode(&self, values: Vec<String>) -> PyResult<Vec<u32>> {
        self.inner.encode(&values).map_err(err)
    }
}

/// Inverted index over a dataset's training split.
#[pyclass(frozen)]
struct RetrievalIndex {
    inner: retrieval::RetrievalIndex,
}

fn result_dict<'py>(py: Python<'py>, r: &RetrievalResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let idx: Vec<Option<usize>> = r.neighbor_indices.iter().zip(&r.mask).map(|(&i, &m)| m.then_some(i)).collect();
    let scores: Vec<Option<f64>> = r.scores.iter().zip(&r.mask).map(|(&s, &m)| m.then_some(s)).collect();
    d.set_item("neighbor_indices", idx)?;
    d.set_item("scores", scores)?;
    d.set_item("mask", r.mask.clone())?;
    Ok(d)
}

#[pymethods]
impl RetrievalIndex {
    #[new]
    fn new(dataset: &Dataset) -> PyResult<Self> {
        Ok(RetrievalIndex { inner: retrieval::RetrievalIndex::build(dataset.inner.train()).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(RetrievalIndex { inner: retrieval::RetrievalIndex::load(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn pool_size(&self) -> usize {
        self.inner.pool_size()
    }

    #[getter]
    fn num_terms(&self) -> usize {
        self.inner.num_terms()
    }

    fn doc_freq(&self, field: usize, value: u32) -> usize {
        self.inner.doc_freq(field, value)
    }

    fn score(&self, query: Vec<u32>, candidate: Vec<u32>) -> f64 {
        let rec = |ids| Record { field_ids: ids, label: 0, timestamp: 0, index: 0 };
        self.inner.bm25_score(&rec(query), &rec(candidate))
    }

    /// Top-k neighbors of encoded queries. With `before=(timestamp, index)`
    /// only strictly earlier pool records are eligible.
    #[pyo3(signature = (queries, k=5, before=None))]
    fn retrieve<'py>(
        &self,
        py: Python<'py>,
        queries: Vec<Vec<u32>>,
        k: usize,
        before: Option<(i64, usize)>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let (eligibility, (timestamp, index)) = match before {
            Some(key) => (Eligibility::StrictlyEarlier, key),
            None => (Eligibility::WholePool, (0, 0)),
        };
        let recs: Vec<Record> =
            queries.into_iter().map(|field_ids| Record { field_ids, label: 0, timestamp, index }).collect();
        let results = self.inner.retrieve_batch(&recs, k, eligibility).map_err(err)?;
        results.iter().map(|r| result_dict(py, r)).collect()
    }
}

/// A trained (or freshly initialized) model.
#[pyclass(frozen)]
struct Model {
    inner: model::RatModel,
    config: TrainConfig,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (inner, echo) = model::RatModel::load(path).map_err(err)?;
        let config = serde_json::from_str(&echo).unwrap_or_default();
        Ok(Model { inner, config })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let echo = serde_json::to_string(&self.config).map_err(|e| PyValueError::new_err(e.to_string()))?;
        self.inner.save(path, &echo).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.config().variant.to_string()
    }

    /// Click probabilities for every record of a split.
    #[pyo3(signature = (dataset, split="test"))]
    fn predict(&self, dataset: &Dataset, split: &str) -> PyResult<Vec<f64>> {
        let ds = &dataset.inner;
        let split = parse_split(split)?;
        let index = retrieval::RetrievalIndex::build(ds.train()).map_err(err)?;
        let nb = Neighbors::compute(ds, &index, self.inner.config().k).map_err(err)?;
        let (recs, results) = match split {
            Split::Train => (ds.train(), &nb.train),
            Split::Valid => (ds.valid(), &nb.valid),
            Split::Test => (ds.test(), &nb.test),
        };
        let ex = recs
            .iter()
            .zip(results)
            .map(|(r, n)| model::Example::from_retrieval(r, n, ds.records()))
            .collect::<rat_core::Result<Vec<_>>>()
            .map_err(err)?;
        training::predict_all(&self.inner, &ex).map_err(err)
    }

    /// AUC and logloss on a split; `segments` such as `"tail10,tail20"` need `user_field`.
    #[pyo3(signature = (dataset, split="test", segments=None, user_field=None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        split: &str,
        segments: Option<&str>,
        user_field: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let ds = &dataset.inner;
        let segs = segments.map(training::parse_segments).transpose().map_err(err)?.unwrap_or_default();
        let user = user_field
            .map(|name| ds.field_index(name).ok_or_else(|| PyValueError::new_err(format!("no field {name:?}"))))
            .transpose()?;
        let index = retrieval::RetrievalIndex::build(ds.train()).map_err(err)?;
        let nb = Neighbors::compute(ds, &index, self.inner.config().k).map_err(err)?;
        let report =
            training::evaluate(&self.inner, ds, parse_split(split)?, &nb, &self.config, &segs, user).map_err(err)?;
        to_py(py, &report)
    }
}

/// Trains on `dataset`; keyword arguments are `TrainConfig` keys.
/// Returns the best model and the training log as a list of dicts.
#[pyfunction]
#[pyo3(signature = (dataset, **config))]
fn train<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let cfg = train_config(py, config)?;
    let ds = &dataset.inner;
    let index = retrieval::RetrievalIndex::build(ds.train()).map_err(err)?;
    let out = py.detach(|| training::train(ds, &index, &cfg)).map_err(err)?;
    let log = to_py(py, &out.log)?;
    Ok((Model { inner: out.model, config: cfg }, log))
}

/// Trains JM, CE, PA and CASCADE with the same data and seed.
#[pyfunction]
#[pyo3(signature = (dataset, **config))]
fn ablate<'py>(py: Python<'py>, dataset: &Dataset, config: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = train_config(py, config)?;
    let ds = &dataset.inner;
    let index = retrieval::RetrievalIndex::build(ds.train()).map_err(err)?;
    let rows = py.detach(|| training::ablate(ds, &index, &cfg)).map_err(err)?;
    to_py(py, &rows)
}

#[pyfunction]
fn auc(preds: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    training::auc(&preds, &labels).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (preds, labels, clip_eps=1e-7))]
fn logloss(preds: Vec<f64>, labels: Vec<u8>, clip_eps: f64) -> PyResult<f64> {
    training::logloss(&preds, &labels, clip_eps).map_err(err)
}

#[pymodule]
fn ratctr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<RetrievalIndex>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(logloss, m)?)?;
    Ok(())
}
