//! Python module `webctx_py`: synthesis, datasets, context graphs, training,
//! prediction and evaluation. Structured results come back as plain Python
//! objects (dicts and lists).

use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::Serialize;

use webctx::dom::{DatasetManifest, LabelTable, PruneConfig, Webpage};
use webctx::eval::{cross_domain_accuracy, make_folds, FoldSplit};
use webctx::graph::{build_graph_with, GraphMetric};
use webctx::synth::{write_dataset, SynthSpec};
use webctx::train::{predict_pages, truth_of, TrainConfig};

fn err(e: impl std::error::Error + 'static) -> PyErr {
    let msg = e.to_string();
    match webctx::classify(&e) {
        Some(true) => PyValueError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

/// Serializes through JSON into native Python objects.
fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn metric(s: &str) -> PyResult<GraphMetric> {
    s.parse().map_err(PyValueError::new_err)
}

/// Writes a synthetic dataset to `out` and returns the manifest path.
/// `spec_toml` is SynthSpec TOML text; `seed` overrides its seed.
#[pyfunction]
#[pyo3(signature = (out, spec_toml=None, seed=None))]
fn synth(out: PathBuf, spec_toml: Option<&str>, seed: Option<u64>) -> PyResult<String> {
    let mut spec = match spec_toml {
        Some(t) => SynthSpec::from_toml(t).map_err(err)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = write_dataset(&spec, &out).map_err(err)?;
    Ok(ds.manifest.display().to_string())
}

/// Pages of a dataset manifest with labels attached when available.
#[pyclass(module = "webctx_py")]
struct Dataset {
    manifest: DatasetManifest,
    pages: Vec<Webpage>,
}

#[pymethods]
impl Dataset {
    /// Loads `manifest`; labels default to labels.csv next to it when present.
    #[new]
    #[pyo3(signature = (manifest, labels=None))]
    fn new(manifest: PathBuf, labels: Option<PathBuf>) -> PyResult<Self> {
        let m = DatasetManifest::open(&manifest).map_err(err)?;
        let labels_path =
            labels.or_else(|| Some(m.base_dir.join("labels.csv")).filter(|p| p.exists()));
        let table = match labels_path {
            Some(p) => {
                let f = std::fs::File::open(&p)
                    .map_err(|e| PyValueError::new_err(format!("{}: {e}", p.display())))?;
                Some(LabelTable::read(f).map_err(err)?)
            }
            None => None,
        };
        let pages = m
            .load_all(table.as_ref(), &PruneConfig::default())
            .map_err(err)?;
        Ok(Dataset { manifest: m, pages })
    }

    fn __len__(&self) -> usize {
        self.pages.len()
    }

    fn page_ids(&self) -> Vec<String> {
        self.pages.iter().map(|p| p.page_id.clone()).collect()
    }

    /// Distinct domains with their page counts.
    fn domains(&self) -> Vec<(String, usize)> {
        self.manifest.domain_counts()
    }

    /// Leaf elements of one page as dicts.
    fn elements(&self, py: Python<'_>, page_id: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &self.page(page_id)?.elements)
    }

    /// `[price, title, image]` element ids by page id, fully labeled pages only.
    fn truth(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &truth_of(&self.pages))
    }

    /// Context graph of one page: element id to neighbor ids, nearest first.
    #[pyo3(signature = (page_id, k=24, metric="preorder"))]
    fn graph(&self, py: Python<'_>, page_id: &str, k: usize, metric: &str) -> PyResult<Py<PyAny>> {
        let p = self.page(page_id)?;
        let g = build_graph_with(&p.page_id, &p.elements, k, self::metric(metric)?);
        let map: std::collections::BTreeMap<u32, &[u32]> = p
            .elements
            .iter()
            .filter_map(|e| g.neighbor_ids(e.element_id).map(|n| (e.element_id, n)))
            .collect();
        to_py(py, &map)
    }

    /// Cross-domain folds as dicts of train, val and test domains.
    #[pyo3(signature = (n_folds=5, seed=0))]
    fn folds(&self, py: Python<'_>, n_folds: usize, seed: u64) -> PyResult<Py<PyAny>> {
        to_py(
            py,
            &make_folds(&self.manifest.domain_counts(), n_folds, seed).map_err(err)?,
        )
    }

    fn content_hash(&self) -> PyResult<String> {
        self.manifest.content_hash().map_err(err)
    }
}

impl Dataset {
    fn page(&self, id: &str) -> PyResult<&Webpage> {
        self.pages
            .iter()
            .find(|p| p.page_id == id)
            .ok_or_else(|| PyKeyError::new_err(id.to_string()))
    }

    fn in_domains(&self, domains: &std::collections::BTreeSet<String>) -> Vec<Webpage> {
        self.pages
            .iter()
            .filter(|p| domains.contains(&p.domain))
            .cloned()
            .collect()
    }

    fn select(&self, page_ids: Option<Vec<String>>) -> PyResult<Vec<Webpage>> {
        match page_ids {
            None => Ok(self.pages.clone()),
            Some(ids) => ids.iter().map(|id| self.page(id).cloned()).collect(),
        }
    }
}

/// A trained model with the graph settings it was trained with.
#[pyclass(module = "webctx_py")]
struct Model {
    inner: webctx::model::Model,
    k: usize,
    metric: GraphMetric,
    #[pyo3(get)]
    best_epoch: usize,
    reports: Vec<webctx::train::EpochReport>,
}

#[pymethods]
impl Model {
    /// Trains on one fold of `dataset`. `fold` is a dict as returned by
    /// `Dataset.folds`; `config_toml` is TrainConfig TOML text.
    #[staticmethod]
    #[pyo3(signature = (dataset, fold, config_toml=None))]
    fn train(
        py: Python<'_>,
        dataset: &Dataset,
        fold: Bound<'_, PyAny>,
        config_toml: Option<&str>,
    ) -> PyResult<Self> {
        let text: String = py
            .import("json")?
            .call_method1("dumps", (fold,))?
            .extract()?;
        let fold: FoldSplit =
            serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let cfg = match config_toml {
            Some(t) => TrainConfig::from_toml(t).map_err(err)?,
            None => TrainConfig::default(),
        };
        let train = dataset.in_domains(&fold.train_domains);
        let val = dataset.in_domains(&fold.val_domains);
        let out = py
            .detach(|| webctx::train::train(&train, &val, &cfg, None))
            .map_err(err)?;
        Ok(Model {
            inner: out.model,
            k: cfg.k,
            metric: cfg.graph_metric,
            best_epoch: out.best_epoch,
            reports: out.reports,
        })
    }

    /// Loads a checkpoint; `k` and `metric` set the inference graph.
    #[staticmethod]
    #[pyo3(signature = (path, k=24, metric="preorder"))]
    fn load(path: PathBuf, k: usize, metric: &str) -> PyResult<Self> {
        let inner = webctx::model::checkpoint::load(&path).map_err(err)?;
        Ok(Model {
            inner,
            k,
            metric: self::metric(metric)?,
            best_epoch: 0,
            reports: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        webctx::model::checkpoint::save(&self.inner, &path).map_err(err)
    }

    /// Per-epoch training records.
    fn history(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.reports)
    }

    /// Predictions for the given pages (all pages when `page_ids` is None).
    #[pyo3(signature = (dataset, page_ids=None))]
    fn predict(
        &self,
        py: Python<'_>,
        dataset: &Dataset,
        page_ids: Option<Vec<String>>,
    ) -> PyResult<Py<PyAny>> {
        let pages = dataset.select(page_ids)?;
        let preds = py
            .detach(|| predict_pages(&self.inner, &pages, self.k, self.metric, None))
            .map_err(err)?;
        to_py(py, &preds)
    }

    /// Per-class accuracy on the given pages, which must be fully labeled.
    #[pyo3(signature = (dataset, page_ids=None))]
    fn evaluate(
        &self,
        py: Python<'_>,
        dataset: &Dataset,
        page_ids: Option<Vec<String>>,
    ) -> PyResult<Py<PyAny>> {
        let pages = dataset.select(page_ids)?;
        let preds = py
            .detach(|| predict_pages(&self.inner, &pages, self.k, self.metric, None))
            .map_err(err)?;
        let acc = cross_domain_accuracy(&preds, &truth_of(&pages)).map_err(err)?;
        let mean = acc.mean();
        let dict = to_py(py, &acc)?;
        dict.bind(py).set_item("mean", mean)?;
        Ok(dict)
    }
}

#[pymodule]
fn webctx_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
