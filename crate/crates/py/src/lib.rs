//! Python bindings: margin math, losses, metrics, data generation and
//! training.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};

use marginforge::data::{self, SynthConfig as CoreSynth};
use marginforge::eval::{self, BidirectionalReport, RetrievalReport};
use marginforge::experts::{self, DistanceMatrix, ExpertKind};
use marginforge::margin::{self, MarginMatrix, RescaleConfig};
use marginforge::math::{self, Matrix};
use marginforge::objective::{self, ExpertMargins, LossBreakdown, LossParams, Mining, MiningCriterion, SimilarityMatrix};
use marginforge::trainer::{self, TrainConfig as CoreTrain};

create_exception!(marginforge_py, MarginforgeError, PyValueError);

fn err(e: marginforge::Error) -> PyErr {
    MarginforgeError::new_err(e.to_string())
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(MarginforgeError::new_err("ragged matrix rows"));
    }
    Matrix::new(r, c, rows.concat()).map_err(err)
}

fn square(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    let m = to_matrix(rows)?;
    if !m.is_square() || m.rows() < 2 {
        return Err(MarginforgeError::new_err(format!(
            "expected a square matrix of size >= 2, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(m)
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn parse_mining(s: &str) -> PyResult<Mining> {
    match s {
        "hardest" => Ok(Mining::Hardest),
        "mean" => Ok(Mining::Mean),
        _ => Err(MarginforgeError::new_err(format!("mining must be `hardest` or `mean`, got `{s}`"))),
    }
}

fn margins(rows: Option<Vec<Vec<f64>>>, alpha: f64, beta: f64) -> PyResult<Option<MarginMatrix>> {
    rows.map(|r| {
        Ok(MarginMatrix {
            values: square(&r)?,
            mu: alpha,
            beta,
        })
    })
    .transpose()
}

fn loss_dict<'py>(py: Python<'py>, l: &LossBreakdown) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("total", l.total)?;
    d.set_item("hard", l.hard_term)?;
    d.set_item("dse", l.dse_term)?;
    d.set_item("sse", l.sse_term)?;
    d.set_item("lambda", l.lambda_used)?;
    d.set_item("hardest_video", l.hardest_video.clone())?;
    d.set_item("hardest_text", l.hardest_text.clone())?;
    Ok(d)
}

fn direction_dict<'py>(py: Python<'py>, r: &RetrievalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in &r.r_at {
        d.set_item(format!("R{k}"), *v)?;
    }
    d.set_item("MdR", r.mdr)?;
    d.set_item("ranks", r.ranks.clone())?;
    Ok(d)
}

fn report_dict<'py>(py: Python<'py>, r: &BidirectionalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("t2v", direction_dict(py, &r.t2v)?)?;
    d.set_item("v2t", direction_dict(py, &r.v2t)?)?;
    d.set_item("rsum", r.rsum)?;
    Ok(d)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    math::cosine_similarity(&a, &b).map_err(err)
}

#[pyfunction]
fn normal_cdf(x: f64) -> f64 {
    math::normal_cdf(x)
}

/// Variance of the normal that puts 90% of its mass within ±beta.
#[pyfunction]
fn beta_to_variance(beta: f64) -> PyResult<f64> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(MarginforgeError::new_err(format!("beta must be >= 0, got {beta}")));
    }
    Ok(margin::beta_to_variance(beta))
}

#[pyfunction]
fn pairwise_cosine_distances(reprs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let d = experts::pairwise_cosine_distances(&reprs, ExpertKind::DseText).map_err(err)?;
    Ok(to_rows(&d.values))
}

#[pyfunction]
#[pyo3(signature = (distances, mu, beta))]
fn rescale_margins(distances: Vec<Vec<f64>>, mu: f64, beta: f64) -> PyResult<Vec<Vec<f64>>> {
    let d = DistanceMatrix {
        values: square(&distances)?,
        kind: ExpertKind::SseText,
    };
    let cfg = RescaleConfig::new(mu, beta).map_err(err)?;
    Ok(to_rows(&margin::rescale_margins(&d, &cfg).values))
}

/// `S[i][j]` = cosine of video `i` and text `j`.
#[pyfunction]
fn similarity_matrix(video: Vec<Vec<f64>>, text: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&objective::similarity_matrix(&video, &text).map_err(err)?.values))
}

#[pyfunction]
#[pyo3(signature = (s, alpha, mining = "hardest"))]
fn hard_triplet_loss<'py>(py: Python<'py>, s: Vec<Vec<f64>>, alpha: f64, mining: &str) -> PyResult<Bound<'py, PyDict>> {
    let s = SimilarityMatrix { values: square(&s)? };
    let l = objective::hard_triplet_loss(&s, alpha, parse_mining(mining)?).map_err(err)?;
    loss_dict(py, &l)
}

/// Full objective with optional expert margin matrices; a missing matrix
/// leaves its slot out.
#[pyfunction]
#[pyo3(signature = (
    s, alpha, lam, mining = "hardest", criterion = "combined",
    dse_video = None, dse_text = None, sse_video = None, sse_text = None
))]
#[allow(clippy::too_many_arguments)]
fn full_loss<'py>(
    py: Python<'py>,
    s: Vec<Vec<f64>>,
    alpha: f64,
    lam: f64,
    mining: &str,
    criterion: &str,
    dse_video: Option<Vec<Vec<f64>>>,
    dse_text: Option<Vec<Vec<f64>>>,
    sse_video: Option<Vec<Vec<f64>>>,
    sse_text: Option<Vec<Vec<f64>>>,
) -> PyResult<Bound<'py, PyDict>> {
    let s = SimilarityMatrix { values: square(&s)? };
    let slot = |v: Option<Vec<Vec<f64>>>, t: Option<Vec<Vec<f64>>>| -> PyResult<ExpertMargins> {
        Ok(ExpertMargins {
            video: margins(v, alpha, 0.0)?.into_iter().collect(),
            text: margins(t, alpha, 0.0)?,
        })
    };
    let params = LossParams {
        alpha,
        lambda: lam,
        mining: parse_mining(mining)?,
        criterion: criterion
            .parse::<MiningCriterion>()
            .map_err(|_| MarginforgeError::new_err(format!("unknown criterion `{criterion}`")))?,
    };
    let l = objective::full_loss(&s, &slot(dse_video, dse_text)?, &slot(sse_video, sse_text)?, &params).map_err(err)?;
    loss_dict(py, &l)
}

#[pyfunction]
#[pyo3(signature = (epoch, config = None))]
fn lambda_schedule(epoch: usize, config: Option<PyRef<'_, TrainConfig>>) -> f64 {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    trainer::lambda_schedule(epoch, &cfg)
}

/// Bidirectional retrieval metrics; item `i` is the positive of query `i`.
#[pyfunction]
#[pyo3(signature = (s, ks = vec![1, 5, 10]))]
fn evaluate<'py>(py: Python<'py>, s: Vec<Vec<f64>>, ks: Vec<usize>) -> PyResult<Bound<'py, PyDict>> {
    let m = to_matrix(&s)?;
    let r = eval::evaluate_bidirectional(&SimilarityMatrix { values: m }, &ks).map_err(err)?;
    report_dict(py, &r)
}

#[pyclass(module = "marginforge_py", name = "SynthConfig")]
struct SynthConfig {
    inner: CoreSynth,
}

#[pymethods]
impl SynthConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut c = CoreSynth::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                match key.as_str() {
                    "n_items" => c.n_items = v.extract()?,
                    "n_concepts" => c.n_concepts = v.extract()?,
                    "latent_dim" => c.latent_dim = v.extract()?,
                    "video_dim" => c.video_dim = v.extract()?,
                    "text_dim" => c.text_dim = v.extract()?,
                    "frames_per_video" => c.frames_per_video = v.extract()?,
                    "noise_video" => c.noise_video = v.extract()?,
                    "noise_text" => c.noise_text = v.extract()?,
                    "sse_text_noise" => c.sse_text_noise = v.extract()?,
                    "duplicate_rate" => c.duplicate_rate = v.extract()?,
                    "val_fraction" => c.val_fraction = v.extract()?,
                    "seed" => c.seed = v.extract()?,
                    _ => return Err(MarginforgeError::new_err(format!("unknown SynthConfig field `{key}`"))),
                }
            }
        }
        c.validate().map_err(err)?;
        Ok(Self { inner: c })
    }

    fn __getattr__<'py>(&self, py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyAny>> {
        let c = &self.inner;
        Ok(match name {
            "n_items" => c.n_items.into_pyobject(py)?.into_any(),
            "n_concepts" => c.n_concepts.into_pyobject(py)?.into_any(),
            "latent_dim" => c.latent_dim.into_pyobject(py)?.into_any(),
            "video_dim" => c.video_dim.into_pyobject(py)?.into_any(),
            "text_dim" => c.text_dim.into_pyobject(py)?.into_any(),
            "frames_per_video" => c.frames_per_video.into_pyobject(py)?.into_any(),
            "noise_video" => c.noise_video.into_pyobject(py)?.into_any(),
            "noise_text" => c.noise_text.into_pyobject(py)?.into_any(),
            "sse_text_noise" => c.sse_text_noise.into_pyobject(py)?.into_any(),
            "duplicate_rate" => c.duplicate_rate.into_pyobject(py)?.into_any(),
            "val_fraction" => c.val_fraction.into_pyobject(py)?.into_any(),
            "seed" => c.seed.into_pyobject(py)?.into_any(),
            _ => return Err(pyo3::exceptions::PyAttributeError::new_err(name.to_string())),
        })
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(module = "marginforge_py", name = "TrainConfig")]
struct TrainConfig {
    inner: CoreTrain,
}

#[pymethods]
impl TrainConfig {
    /// Keyword arguments use the field names; expert toggles are
    /// `dse_text`, `dse_video`, `sse_text`, `sse_video`.
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut c = CoreTrain::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                match key.as_str() {
                    "alpha" => c.alpha = v.extract()?,
                    "beta" => c.beta = v.extract()?,
                    "lambda_start_epoch" => c.lambda_start_epoch = v.extract()?,
                    "lambda_start_value" => c.lambda_start_value = v.extract()?,
                    "lambda_end_epoch" => c.lambda_end_epoch = v.extract()?,
                    "lambda_end_value" => c.lambda_end_value = v.extract()?,
                    "warmup_epochs" => c.warmup_epochs = v.extract()?,
                    "epochs" => c.epochs = v.extract()?,
                    "batch_size" => c.batch_size = v.extract()?,
                    "learning_rate" => c.learning_rate = v.extract()?,
                    "seed" => c.seed = v.extract()?,
                    "hidden_dim" => c.hidden_dim = v.extract()?,
                    "joint_dim" => c.joint_dim = v.extract()?,
                    "dse_text" => c.experts.dse_text = v.extract()?,
                    "dse_video" => c.experts.dse_video = v.extract()?,
                    "sse_text" => c.experts.sse_text = v.extract()?,
                    "sse_video" => c.experts.sse_video = v.extract()?,
                    "mining_criterion" => {
                        let s: String = v.extract()?;
                        c.mining_criterion = s
                            .parse()
                            .map_err(|_| MarginforgeError::new_err(format!("unknown criterion `{s}`")))?;
                    }
                    _ => return Err(MarginforgeError::new_err(format!("unknown TrainConfig field `{key}`"))),
                }
            }
        }
        c.validate(None).map_err(err)?;
        Ok(Self { inner: c })
    }

    /// Baseline settings: every expert off and `beta = 0`.
    fn baseline(&self) -> Self {
        let mut c = self.inner.clone();
        c.experts = trainer::ExpertToggles::NONE;
        c.beta = 0.0;
        Self { inner: c }
    }

    fn __getattr__<'py>(&self, py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyAny>> {
        let c = &self.inner;
        Ok(match name {
            "alpha" => c.alpha.into_pyobject(py)?.into_any(),
            "beta" => c.beta.into_pyobject(py)?.into_any(),
            "lambda_start_epoch" => c.lambda_start_epoch.into_pyobject(py)?.into_any(),
            "lambda_start_value" => c.lambda_start_value.into_pyobject(py)?.into_any(),
            "lambda_end_epoch" => c.lambda_end_epoch.into_pyobject(py)?.into_any(),
            "lambda_end_value" => c.lambda_end_value.into_pyobject(py)?.into_any(),
            "warmup_epochs" => c.warmup_epochs.into_pyobject(py)?.into_any(),
            "epochs" => c.epochs.into_pyobject(py)?.into_any(),
            "batch_size" => c.batch_size.into_pyobject(py)?.into_any(),
            "learning_rate" => c.learning_rate.into_pyobject(py)?.into_any(),
            "seed" => c.seed.into_pyobject(py)?.into_any(),
            "hidden_dim" => c.hidden_dim.into_pyobject(py)?.into_any(),
            "joint_dim" => c.joint_dim.into_pyobject(py)?.into_any(),
            "mining_criterion" => c.mining_criterion.as_str().into_pyobject(py)?.into_any(),
            "dse_text" => PyBool::new(py, c.experts.dse_text).to_owned().into_any(),
            "dse_video" => PyBool::new(py, c.experts.dse_video).to_owned().into_any(),
            "sse_text" => PyBool::new(py, c.experts.sse_text).to_owned().into_any(),
            "sse_video" => PyBool::new(py, c.experts.sse_video).to_owned().into_any(),
            _ => return Err(pyo3::exceptions::PyAttributeError::new_err(name.to_string())),
        })
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(module = "marginforge_py", name = "Dataset")]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (config = None))]
    fn generate(config: Option<PyRef<'_, SynthConfig>>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        Ok(Self {
            inner: data::generate(&cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_dataset(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::write_dataset(&self.inner, &path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.items.len()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.items.iter().map(|it| it.id.clone()).collect()
    }

    fn concepts(&self) -> Vec<usize> {
        self.inner.items.iter().map(|it| it.concept).collect()
    }

    fn train_indices(&self) -> Vec<usize> {
        self.inner.train.clone()
    }

    fn val_indices(&self) -> Vec<usize> {
        self.inner.val.clone()
    }

    fn duplicate_rate(&self) -> f64 {
        data::realized_duplicate_rate(&self.inner)
    }
}

#[pyclass(module = "marginforge_py", name = "Checkpoint")]
struct Checkpoint {
    inner: trainer::Checkpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::Checkpoint::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.model.num_params()
    }

    /// Metrics on the `val`, `train` or `all` split.
    #[pyo3(signature = (dataset, split = "val", ks = vec![1, 5, 10]))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: PyRef<'_, Dataset>,
        split: &str,
        ks: Vec<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let ds = &dataset.inner;
        let indices: Vec<usize> = match split {
            "val" => ds.val.clone(),
            "train" => ds.train.clone(),
            "all" => (0..ds.items.len()).collect(),
            _ => return Err(MarginforgeError::new_err(format!("unknown split `{split}`"))),
        };
        let r = trainer::evaluate_model(&self.inner.model, ds, &indices, &ks).map_err(err)?;
        report_dict(py, &r)
    }
}

/// Trains from a fresh model. Returns `(reports, checkpoint)`; each report
/// is a dict with the per-epoch fields.
#[pyfunction]
#[pyo3(signature = (config, dataset, out_dir = None, ks = vec![1, 5, 10]))]
fn train<'py>(
    py: Python<'py>,
    config: PyRef<'_, TrainConfig>,
    dataset: PyRef<'_, Dataset>,
    out_dir: Option<PathBuf>,
    ks: Vec<usize>,
) -> PyResult<(Vec<Bound<'py, PyAny>>, Checkpoint)> {
    let cfg = config.inner.clone();
    let ds = &dataset.inner;
    let outcome = py
        .detach(|| trainer::run_training(&cfg, ds, &ks, out_dir.as_deref()))
        .map_err(err)?;
    let json = py.import("json")?;
    let reports = outcome
        .reports
        .iter()
        .map(|r| json.call_method1("loads", (r.to_json_line(),)))
        .collect::<PyResult<Vec<_>>>()?;
    Ok((
        reports,
        Checkpoint {
            inner: outcome.checkpoint,
        },
    ))
}

#[pymodule]
pub fn marginforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MarginforgeError", m.py().get_type::<MarginforgeError>())?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(normal_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(beta_to_variance, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_cosine_distances, m)?)?;
    m.add_function(wrap_pyfunction!(rescale_margins, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(hard_triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(full_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<SynthConfig>()?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Checkpoint>()?;
    Ok(())
}
