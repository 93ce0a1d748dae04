//! Python bindings: cubes, encodings, masking, losses, metrics, and
//! pre-training / fine-tuning / reconstruction with checkpoints.

use hsmae_core::checkpoint::Checkpoint;
use hsmae_core::hsidata::{self, HsiCube, SplitEntry};
use hsmae_core::loss::{evaluate_rec_loss, spectral_angle as angle};
use hsmae_core::masking::{self, MaskPlan};
use hsmae_core::model::{self, ModelConfig};
use hsmae_core::tensor::Tensor;
use hsmae_core::tokenizer;
use hsmae_core::training::{self, FinetuneConfig, PretrainConfig};
use hsmae_core::Error;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e if e.is_numeric() => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// Converts any serializable value into Python objects via JSON.
fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    PyModule::import(py, "json")?.call_method1("loads", (text,))
}

/// Hyperspectral cube stored row-major as `[height, width, bands]`.
#[pyclass(name = "Cube", module = "hsmae", from_py_object)]
#[derive(Clone)]
struct PyCube {
    inner: HsiCube,
}

#[pymethods]
impl PyCube {
    #[new]
    #[pyo3(signature = (height, width, bands, values, wavelengths, labels=None))]
    fn new(
        height: usize,
        width: usize,
        bands: usize,
        values: Vec<f64>,
        wavelengths: Vec<f64>,
        labels: Option<Vec<u16>>,
    ) -> PyResult<Self> {
        HsiCube::new(height, width, bands, values, wavelengths, labels)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    #[staticmethod]
    fn synthetic(height: usize, width: usize, bands: usize, n_classes: usize, seed: u64) -> PyResult<Self> {
        hsidata::gen_synthetic(height, width, bands, n_classes, seed)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        hsidata::load_cube(path).map(|inner| Self { inner }).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        hsidata::save_cube(&self.inner, path).map_err(err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn bands(&self) -> usize {
        self.inner.bands()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.height(), self.inner.width(), self.inner.bands())
    }

    #[getter]
    fn wavelengths(&self) -> Vec<f64> {
        self.inner.wavelengths().to_vec()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<u16>> {
        self.inner.labels().map(<[u16]>::to_vec)
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn spectrum(&self, i: usize, j: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.height() || j >= self.inner.width() {
            return Err(PyValueError::new_err("pixel outside the cube"));
        }
        Ok(self.inner.spectrum(i, j).to_vec())
    }

    /// Per-band z-scored copy.
    fn normalized(&self) -> Self {
        Self {
            inner: hsidata::normalize(&self.inner).0,
        }
    }

    #[pyo3(signature = (i, j, size=9))]
    fn window(&self, i: usize, j: usize, size: usize) -> PyResult<Self> {
        if i >= self.inner.height() || j >= self.inner.width() || size == 0 {
            return Err(PyValueError::new_err("window center outside the cube"));
        }
        Ok(Self {
            inner: self.inner.window(i, j, size),
        })
    }

    /// Token grid `(P, Q, K)` of 9×9×8 patches.
    fn token_grid(&self) -> PyResult<(usize, usize, usize)> {
        let g = tokenizer::partition(&self.inner).map_err(err)?;
        Ok((g.p, g.q, g.k))
    }

    /// Random labeled-pixel split as a list of `(i, j, label, "train"|"test")`.
    #[pyo3(signature = (train_fraction=0.1, seed=0))]
    fn split(&self, train_fraction: f64, seed: u64) -> PyResult<Vec<(usize, usize, u16, String)>> {
        let entries = hsidata::make_split(&self.inner, train_fraction, seed).map_err(err)?;
        Ok(entries
            .into_iter()
            .map(|e| {
                let s = match e.split {
                    hsidata::Split::Train => "train",
                    hsidata::Split::Test => "test",
                };
                (e.i, e.j, e.label, s.to_string())
            })
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Cube({}×{}×{}, labels={})",
            self.inner.height(),
            self.inner.width(),
            self.inner.bands(),
            self.inner.labels().is_some()
        )
    }
}

/// Dual spatial/spectral mask over a `(P, Q, K)` token grid.
#[pyclass(name = "MaskPlan", module = "hsmae", skip_from_py_object)]
#[derive(Clone)]
struct PyMaskPlan {
    inner: MaskPlan,
}

#[pymethods]
impl PyMaskPlan {
    #[getter]
    fn visible(&self) -> Vec<usize> {
        self.inner.visible.clone()
    }

    #[getter]
    fn masked_tokens(&self) -> Vec<usize> {
        self.inner.masked_tokens.clone()
    }

    #[getter]
    fn masked_spatial(&self) -> Vec<(usize, usize)> {
        self.inner.masked_spatial.clone()
    }

    #[getter]
    fn masked_spectral(&self) -> Vec<usize> {
        self.inner.masked_spectral.clone()
    }

    #[getter]
    fn n_tokens(&self) -> usize {
        self.inner.n_tokens()
    }

    /// Number of masked voxels over the cropped cube.
    fn masked_voxels(&self) -> PyResult<usize> {
        let (p, q, k) = (self.inner.p, self.inner.q, self.inner.k);
        masking::voxel_mask(&self.inner, 9 * p, 9 * q, 8 * k)
            .map(|m| m.count())
            .map_err(err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        MaskPlan::from_json(text).map(|inner| Self { inner }).map_err(err)
    }
}

#[pyfunction]
#[pyo3(signature = (p, q, k, ratio_spatial=0.5, ratio_spectral=0.5, seed=0))]
fn sample_mask_plan(
    p: usize,
    q: usize,
    k: usize,
    ratio_spatial: f64,
    ratio_spectral: f64,
    seed: u64,
) -> PyResult<PyMaskPlan> {
    masking::sample_mask_plan(p, q, k, ratio_spatial, ratio_spectral, seed)
        .map(|inner| PyMaskPlan { inner })
        .map_err(err)
}

#[pyfunction]
fn spec_enc(wavelength: f64, d: usize) -> PyResult<Vec<f64>> {
    tokenizer::spec_enc(wavelength, d).map_err(err)
}

#[pyfunction]
fn sinusoidal_pe(pos: usize, d: usize) -> PyResult<Vec<f64>> {
    tokenizer::sinusoidal_pe(pos, d).map_err(err)
}

/// Angle in radians, or `None` for a zero-norm spectrum.
#[pyfunction]
fn spectral_angle(y: Vec<f64>, y_hat: Vec<f64>) -> PyResult<Option<f64>> {
    if y.len() != y_hat.len() {
        return Err(PyValueError::new_err("spectra differ in length"));
    }
    Ok(angle(&y, &y_hat))
}

/// Masked MSE, SAM and their mix for flat `[h, w, b]` arrays and a 0/1 mask.
#[pyfunction]
#[pyo3(signature = (y, y_hat, shape, mask, alpha=0.5))]
fn reconstruction_loss<'py>(
    py: Python<'py>,
    y: Vec<f64>,
    y_hat: Vec<f64>,
    shape: (usize, usize, usize),
    mask: Vec<bool>,
    alpha: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let (h, w, b) = shape;
    let yt = Tensor::new([h, w, b], y).map_err(err)?;
    let yh = Tensor::new([h, w, b], y_hat).map_err(err)?;
    let m = masking::VoxelMask::from_flags(h, w, b, mask).map_err(err)?;
    let report = evaluate_rec_loss(&yt, &yh, &m, alpha).map_err(err)?;
    to_py(py, &report)
}

/// OA, AA, κ and the confusion matrix for 0-based class indices.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, pred: Vec<usize>, truth: Vec<usize>) -> PyResult<Bound<'py, PyAny>> {
    let report = training::evaluate(&pred, &truth).map_err(err)?;
    to_py(py, &report)
}

/// Model weights plus configuration, as stored in a checkpoint file.
#[pyclass(name = "Model", module = "hsmae", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Checkpoint,
}

fn preset(name: &str) -> PyResult<ModelConfig> {
    match name {
        "micro" => Ok(ModelConfig::micro()),
        "desk" => Ok(ModelConfig::desk()),
        "foundation" => Ok(ModelConfig::foundation()),
        _ => Err(PyValueError::new_err(format!("unknown preset {name:?}"))),
    }
}

#[pymethods]
impl PyModel {
    /// Randomly initialized model for a `p × q` spatial table.
    #[staticmethod]
    #[pyo3(signature = (preset_name="desk", p=3, q=3, n_classes=1, seed=0))]
    fn init(preset_name: &str, p: usize, q: usize, n_classes: usize, seed: u64) -> PyResult<Self> {
        let config = preset(preset_name)?;
        let params = model::init_params(&config, p, q, n_classes, seed).map_err(err)?;
        Ok(Self {
            inner: Checkpoint {
                config,
                k: 0,
                seed,
                params,
            },
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Checkpoint::load(path).map(|inner| Self { inner }).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.params.n_params()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.params.n_classes()
    }

    fn header<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.header())
    }

    /// Mean-pooled encoder features of an unmasked cube.
    fn features(&self, cube: &PyCube) -> PyResult<Vec<f64>> {
        model::features(&cube.inner, &self.inner.params, &self.inner.config).map_err(err)
    }

    fn classify(&self, cube: &PyCube) -> PyResult<Vec<f64>> {
        model::classify(&cube.inner, &self.inner.params, &self.inner.config).map_err(err)
    }

    /// Reconstructs a normalized copy of `cube` under `plan`; returns the
    /// flat cropped reconstruction and the loss report.
    #[pyo3(signature = (cube, plan, alpha=0.5))]
    fn reconstruct<'py>(
        &self,
        py: Python<'py>,
        cube: &PyCube,
        plan: &PyMaskPlan,
        alpha: f64,
    ) -> PyResult<(Vec<f64>, Bound<'py, PyAny>)> {
        let norm = hsidata::normalize(&cube.inner).0;
        let mut g = hsmae_core::tensor::Graph::new();
        let w = self.inner.params.bind_frozen(&mut g);
        let rec = model::reconstruct(&mut g, &w, &norm, &plan.inner, &self.inner.config).map_err(err)?;
        let (_, report) =
            hsmae_core::loss::rec_loss(&mut g, rec.y_hat, &rec.target, &rec.mask, alpha).map_err(err)?;
        Ok((g.value(rec.y_hat).data().to_vec(), to_py(py, &report)?))
    }
}

/// Pre-trains on `cubes`; `config` is an optional JSON object overriding
/// the default settings. Returns the model and the per-step loss log.
#[pyfunction]
#[pyo3(signature = (cubes, steps, seed=0, preset_name="desk", config=None))]
fn pretrain<'py>(
    py: Python<'py>,
    cubes: Vec<PyCube>,
    steps: usize,
    seed: u64,
    preset_name: &str,
    config: Option<&str>,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let mut cfg: PretrainConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => PretrainConfig {
            model: preset(preset_name)?,
            ..Default::default()
        },
    };
    cfg.steps = steps;
    let cubes: Vec<HsiCube> = cubes.into_iter().map(|c| c.inner).collect();
    let out = training::pretrain(&cubes, &cfg, seed, &mut |_, _| Ok(())).map_err(err)?;
    Ok((PyModel { inner: out.checkpoint }, to_py(py, &out.log)?))
}

/// Fine-tunes `model` on the labeled `cube`; `split` rows are
/// `(i, j, label, "train"|"test")`. Returns the tuned model and the report.
#[pyfunction]
#[pyo3(signature = (model, cube, split, mode="probe", steps=None, seed=0))]
fn finetune<'py>(
    py: Python<'py>,
    model: &PyModel,
    cube: &PyCube,
    split: Vec<(usize, usize, u16, String)>,
    mode: &str,
    steps: Option<usize>,
    seed: u64,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let mut cfg = match mode {
        "probe" => FinetuneConfig::probe(),
        "full" => FinetuneConfig::full(),
        _ => return Err(PyValueError::new_err("mode must be 'probe' or 'full'")),
    };
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let entries = split
        .into_iter()
        .map(|(i, j, label, s)| {
            let split = match s.as_str() {
                "train" => hsidata::Split::Train,
                "test" => hsidata::Split::Test,
                _ => return Err(PyValueError::new_err(format!("bad split tag {s:?}"))),
            };
            Ok(SplitEntry { i, j, label, split })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let out = training::finetune(&model.inner, &cube.inner, &entries, &cfg, seed).map_err(err)?;
    let tuned = Checkpoint {
        params: out.params,
        ..model.inner.clone()
    };
    Ok((PyModel { inner: tuned }, to_py(py, &out.report)?))
}

#[pymodule]
fn hsmae(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCube>()?;
    m.add_class::<PyMaskPlan>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(sample_mask_plan, m)?)?;
    m.add_function(wrap_pyfunction!(spec_enc, m)?)?;
    m.add_function(wrap_pyfunction!(sinusoidal_pe, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_angle, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruction_loss, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add("PATCH_SHAPE", (9usize, 9usize, 8usize))?;
    Ok(())
}
