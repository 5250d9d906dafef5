//! Python bindings: configs, episodes, models, training, evaluation and
//! gradient checks. Images and masks cross the boundary as flat h-major
//! lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use tbs_core::checkpoint;
use tbs_core::config::RunConfig;
use tbs_core::episodes::{fold_split, generate_episode, generate_episode_with, Difficulty, Episode, GenConfig};
use tbs_core::gradcheck::{run_suite, GradcheckConfig};
use tbs_core::metrics;
use tbs_core::run::{self, ModelPredictor, Predictor};
use tbs_core::seg_head::{AaStats, Model};
use tbs_core::tbs::Ablation;
use tbs_core::TbsError;

fn err(e: TbsError) -> PyErr {
    let msg = e.to_string();
    match e {
        TbsError::Io { .. } => PyOSError::new_err(msg),
        TbsError::Config(_) | TbsError::Generation(_) | TbsError::Fold(_) | TbsError::Checkpoint(_) => {
            PyValueError::new_err(msg)
        }
        _ => PyRuntimeError::new_err(msg),
    }
}

fn ablation(use_qs: bool, use_ts: bool) -> Ablation {
    Ablation { use_qs, use_ts }
}

fn parse_difficulty(name: &str) -> PyResult<Difficulty> {
    Difficulty::parse(name).ok_or_else(|| {
        let names: Vec<&str> = Difficulty::ALL.iter().map(|d| d.name()).collect();
        PyValueError::new_err(format!("unknown difficulty {name:?}, expected one of {names:?}"))
    })
}

fn aa_pairs(aa: &AaStats) -> [(&'static str, Option<f64>); 3] {
    [("aa_sf_qf", aa.sf_qf), ("aa_sb_qb", aa.sb_qb), ("aa_avg", aa.avg)]
}

/// Run configuration; see `Config.to_text()` for every key.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        PyConfig {
            inner: RunConfig::default(),
        }
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        RunConfig::parse(text).map(|inner| PyConfig { inner }).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RunConfig::load(&path).map(|inner| PyConfig { inner }).map_err(err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }
    #[getter]
    fn shots(&self) -> usize {
        self.inner.shots
    }
    #[setter]
    fn set_shots(&mut self, v: usize) {
        self.inner.shots = v;
    }
    #[getter]
    fn fold(&self) -> usize {
        self.inner.fold
    }
    #[setter]
    fn set_fold(&mut self, v: usize) {
        self.inner.fold = v;
    }
    #[getter]
    fn steps(&self) -> u64 {
        self.inner.steps
    }
    #[setter]
    fn set_steps(&mut self, v: u64) {
        self.inner.steps = v;
    }
    #[getter]
    fn lr(&self) -> f32 {
        self.inner.lr
    }
    #[setter]
    fn set_lr(&mut self, v: f32) {
        self.inner.lr = v;
    }
    #[getter]
    fn batch(&self) -> usize {
        self.inner.batch
    }
    #[setter]
    fn set_batch(&mut self, v: usize) {
        self.inner.batch = v;
    }
    #[getter]
    fn eval_episodes(&self) -> u64 {
        self.inner.eval_episodes
    }
    #[setter]
    fn set_eval_episodes(&mut self, v: u64) {
        self.inner.eval_episodes = v;
    }
    #[getter]
    fn use_qs(&self) -> bool {
        self.inner.use_qs
    }
    #[setter]
    fn set_use_qs(&mut self, v: bool) {
        self.inner.use_qs = v;
    }
    #[getter]
    fn use_ts(&self) -> bool {
        self.inner.use_ts
    }
    #[setter]
    fn set_use_ts(&mut self, v: bool) {
        self.inner.use_ts = v;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(seed={}, shots={}, fold={}, steps={}, use_qs={}, use_ts={})",
            self.inner.seed, self.inner.shots, self.inner.fold, self.inner.steps, self.inner.use_qs, self.inner.use_ts
        )
    }
}

/// One query and `K` supports, 64×64 each.
#[pyclass(name = "Episode", frozen)]
struct PyEpisode {
    inner: Episode,
}

#[pymethods]
impl PyEpisode {
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
    #[getter]
    fn category(&self) -> usize {
        self.inner.category
    }
    #[getter]
    fn difficulty(&self) -> &'static str {
        self.inner.difficulty.name()
    }
    #[getter]
    fn shots(&self) -> usize {
        self.inner.supports.len()
    }
    #[getter]
    fn query_image(&self) -> Vec<f32> {
        self.inner.query.image.data().to_vec()
    }
    #[getter]
    fn query_mask(&self) -> Vec<bool> {
        self.inner.query.mask.clone()
    }
    #[getter]
    fn support_images(&self) -> Vec<Vec<f32>> {
        self.inner.supports.iter().map(|s| s.image.data().to_vec()).collect()
    }
    #[getter]
    fn support_masks(&self) -> Vec<Vec<bool>> {
        self.inner.supports.iter().map(|s| s.mask.clone()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Episode(seed={:#x}, category={}, difficulty={}, shots={})",
            self.inner.seed,
            self.inner.category,
            self.inner.difficulty.name(),
            self.inner.supports.len()
        )
    }
}

/// Draws an episode. With `category` and `difficulty` both given the draw is
/// pinned to them; otherwise they are sampled from `classes` and the default
/// difficulty mix.
#[pyfunction]
#[pyo3(signature = (seed, shots=1, classes=None, category=None, difficulty=None))]
fn episode(
    seed: u64,
    shots: usize,
    classes: Option<Vec<usize>>,
    category: Option<usize>,
    difficulty: Option<&str>,
) -> PyResult<PyEpisode> {
    let mut cfg = GenConfig {
        shots,
        ..GenConfig::default()
    };
    if let Some(c) = classes {
        cfg.classes = c;
    }
    let inner = match (category, difficulty) {
        (Some(c), Some(d)) => generate_episode_with(&cfg, c, parse_difficulty(d)?, seed),
        (None, Some(d)) => generate_episode(&cfg.only(parse_difficulty(d)?), seed),
        (Some(_), None) => return Err(PyValueError::new_err("category needs a difficulty")),
        (None, None) => generate_episode(&cfg, seed),
    }
    .map_err(err)?;
    Ok(PyEpisode { inner })
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    /// Fresh initialization from `seed`.
    #[new]
    #[pyo3(signature = (seed=0))]
    fn new(seed: u64) -> Self {
        PyModel {
            inner: Model::init(seed),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let params = checkpoint::load(&path).map_err(err)?;
        Ok(PyModel {
            inner: Model::from_params(params).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.inner.params).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &checkpoint::encode(&self.inner.params))
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.total_len()
    }

    #[pyo3(signature = (ep, use_qs=true, use_ts=true))]
    fn loss(&self, ep: &PyEpisode, use_qs: bool, use_ts: bool) -> PyResult<f64> {
        self.inner.loss(&ep.inner, ablation(use_qs, use_ts)).map_err(err)
    }

    /// `probs` (8×8), `mask` (64×64 after bilinear upsampling and the 0.5
    /// threshold), `loss` and the averaged-attention statistics.
    #[pyo3(signature = (ep, use_qs=true, use_ts=true))]
    fn predict<'py>(&self, py: Python<'py>, ep: &PyEpisode, use_qs: bool, use_ts: bool) -> PyResult<Bound<'py, PyDict>> {
        let ab = ablation(use_qs, use_ts);
        let p = self.inner.predict(&ep.inner, ab).map_err(err)?;
        let (mask, _) = ModelPredictor {
            model: &self.inner,
            ablation: ab,
        }
        .predict(&ep.inner)
        .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("probs", p.probs)?;
        d.set_item("mask", mask)?;
        d.set_item("loss", p.loss)?;
        for (k, v) in aa_pairs(&p.aa) {
            d.set_item(k, v)?;
        }
        Ok(d)
    }
}

/// Trains from `Model(config.seed)`; returns the model and per-step losses.
#[pyfunction]
fn train(py: Python<'_>, config: &PyConfig) -> PyResult<(PyModel, Vec<f64>)> {
    let opts = config.inner.train_options();
    config.inner.validate().map_err(err)?;
    let (state, losses) = py
        .detach(|| {
            let mut losses = Vec::with_capacity(opts.steps as usize);
            run::train(&opts, |_, loss| {
                losses.push(loss);
                Ok(())
            })
            .map(|s| (s, losses))
        })
        .map_err(err)?;
    Ok((PyModel { inner: state.model }, losses))
}

/// Evaluates on the configured fold's test episodes with the configured
/// suppression switches.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, model: &PyModel, config: &PyConfig) -> PyResult<Bound<'py, PyDict>> {
    config.inner.validate().map_err(err)?;
    let opts = config.inner.eval_options();
    let ab = config.inner.ablation();
    let report = py.detach(|| run::evaluate(&model.inner, &opts, ab)).map_err(err)?;
    let fold = &report.per_fold[&opts.fold];
    let d = PyDict::new(py);
    d.set_item("episodes", report.episode_count)?;
    d.set_item("miou", fold.miou)?;
    d.set_item("fb_iou", fold.fb_iou)?;
    d.set_item("per_class_iou", fold.per_class_iou.clone())?;
    for (k, v) in aa_pairs(&fold.aa) {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// Foreground IoU of two equal-length masks; 1.0 when both are empty.
#[pyfunction]
fn iou(pred: Vec<bool>, gt: Vec<bool>) -> PyResult<f64> {
    metrics::iou(&pred, &gt).map_err(err)
}

/// `(train_classes, test_classes)` of a fold.
#[pyfunction]
fn fold_classes(fold: usize) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let s = fold_split(fold).map_err(err)?;
    Ok((s.train_classes, s.test_classes))
}

/// `(name, worst_relative_error, passed)` for every primitive and the
/// composite model.
#[pyfunction]
#[pyo3(signature = (seed=0, probes=100))]
fn gradcheck(py: Python<'_>, seed: u64, probes: usize) -> PyResult<Vec<(String, f64, bool)>> {
    let cfg = GradcheckConfig {
        seed,
        probes,
        ..GradcheckConfig::default()
    };
    let report = py.detach(|| run_suite(&cfg)).map_err(err)?;
    Ok(report
        .results
        .iter()
        .map(|r| (r.name.clone(), r.worst_rel, r.passed()))
        .collect())
}

#[pymodule]
fn tbs_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyEpisode>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(episode, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(fold_classes, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
