//! Python bindings: tensors, norm states, the normalization layers with
//! their gradients, patch grids, patch statistics, the gradient checker and
//! the synthetic data and corruption suite.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use patchnorm::gradcheck::{run_suite, standard_suite};
use patchnorm::harness::{corrupt as corrupt_images, generate_dataset as gen_dataset, CorruptionKind};
use patchnorm::norm::{self, Mode, NormVars};
use patchnorm::scheme::{self, Orientation};
use patchnorm::stats;
use patchnorm::{Error, NormKind, SchemeConfig, Shape, SplitMode, Tape, Var};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Diverged(_) | Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn shape_of(s: (usize, usize, usize, usize)) -> Shape {
    Shape::new(s.0, s.1, s.2, s.3)
}

/// Dense `N x C x H x W` tensor of float64 values.
#[pyclass(name = "Tensor", module = "patchnorm_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    pub inner: patchnorm::Tensor<f64>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: (usize, usize, usize, usize), data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor { inner: patchnorm::Tensor::new(shape_of(shape), data).map_err(to_py)? })
    }

    #[staticmethod]
    fn zeros(shape: (usize, usize, usize, usize)) -> Self {
        PyTensor { inner: patchnorm::Tensor::zeros(shape_of(shape)) }
    }

    #[staticmethod]
    fn full(shape: (usize, usize, usize, usize), value: f64) -> Self {
        PyTensor { inner: patchnorm::Tensor::full(shape_of(shape), value) }
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.inner.shape();
        (s.n, s.c, s.h, s.w)
    }

    /// Flat values in N, C, H, W order.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn at(&self, n: usize, c: usize, h: usize, w: usize) -> PyResult<f64> {
        let s = self.inner.shape();
        if n >= s.n || c >= s.c || h >= s.h || w >= s.w {
            return Err(PyValueError::new_err(format!("index ({n}, {c}, {h}, {w}) outside {s}")));
        }
        Ok(self.inner.at(n, c, h, w))
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={})", self.inner.shape())
    }
}

/// Affine parameters and accumulated statistics of one normalization site.
#[pyclass(name = "NormState", module = "patchnorm_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyNormState {
    pub inner: norm::NormState<f64>,
}

#[pymethods]
impl PyNormState {
    #[new]
    #[pyo3(signature = (channels, momentum = 0.1, eps = 1e-5))]
    fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        PyNormState { inner: norm::NormState::new(channels).with_hyper(momentum, eps) }
    }

    #[getter]
    fn gamma(&self) -> Vec<f64> {
        self.inner.gamma.clone()
    }
    #[setter]
    fn set_gamma(&mut self, v: Vec<f64>) {
        self.inner.gamma = v;
    }
    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.clone()
    }
    #[setter]
    fn set_beta(&mut self, v: Vec<f64>) {
        self.inner.beta = v;
    }
    #[getter]
    fn running_mean(&self) -> Vec<f64> {
        self.inner.running_mean.clone()
    }
    #[setter]
    fn set_running_mean(&mut self, v: Vec<f64>) {
        self.inner.running_mean = v;
    }
    #[getter]
    fn running_std(&self) -> Vec<f64> {
        self.inner.running_std.clone()
    }
    #[setter]
    fn set_running_std(&mut self, v: Vec<f64>) {
        self.inner.running_std = v;
    }

    /// "train" or "eval".
    #[getter]
    fn mode(&self) -> &'static str {
        match self.inner.mode {
            Mode::Train => "train",
            Mode::Eval => "eval",
        }
    }

    fn train(&mut self) {
        self.inner.train();
    }

    fn eval(&mut self) {
        self.inner.eval();
    }

    fn copy(&self) -> Self {
        self.clone()
    }
}

fn parse_split(s: &str) -> PyResult<SplitMode> {
    match s {
        "equal" => Ok(SplitMode::Equal),
        "random" => Ok(SplitMode::Random),
        other => Err(PyValueError::new_err(format!("split must be equal or random, got {other}"))),
    }
}

fn parse_orientation(s: &str) -> PyResult<Orientation> {
    match s {
        "any" => Ok(Orientation::Any),
        "lr" => Ok(Orientation::LeftRight),
        "ud" => Ok(Orientation::UpDown),
        other => Err(PyValueError::new_err(format!("orientation must be any, lr or ud, got {other}"))),
    }
}

/// Hyper-parameters of the patch-aware layer. `lambda_` is the blend weight.
#[pyclass(name = "SchemeConfig", module = "patchnorm_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PySchemeConfig {
    pub inner: SchemeConfig,
}

#[pymethods]
impl PySchemeConfig {
    #[new]
    #[pyo3(signature = (candidate_set = vec![1, 2, 4], subset_size = 2, split = "random", orientation = "any", lambda_ = 0.5, eps = 1e-5, momentum = 0.1, rng_seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        candidate_set: Vec<usize>,
        subset_size: usize,
        split: &str,
        orientation: &str,
        lambda_: f64,
        eps: f64,
        momentum: f64,
        rng_seed: u64,
    ) -> PyResult<Self> {
        let inner = SchemeConfig {
            candidate_set,
            subset_size,
            split_mode: parse_split(split)?,
            orientation: parse_orientation(orientation)?,
            lambda: lambda_,
            eps,
            momentum,
            rng_seed,
        };
        inner.validate().map_err(to_py)?;
        Ok(PySchemeConfig { inner })
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn candidate_set(&self) -> Vec<usize> {
        self.inner.candidate_set.clone()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Exact rectangular partition of an `H x W` plane.
#[pyclass(name = "PatchGrid", module = "patchnorm_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyPatchGrid {
    pub inner: patchnorm::PatchGrid,
}

#[pymethods]
impl PyPatchGrid {
    /// `(row_start, row_end, col_start, col_end)` per patch, half-open.
    #[getter]
    fn rects(&self) -> Vec<(usize, usize, usize, usize)> {
        self.inner.rects.iter().map(|r| (r.row_start, r.row_end, r.col_start, r.col_end)).collect()
    }

    #[getter]
    fn patch_count(&self) -> usize {
        self.inner.patch_count()
    }

    #[getter]
    fn requested(&self) -> usize {
        self.inner.requested
    }

    fn is_exact_partition(&self) -> bool {
        self.inner.is_exact_partition()
    }

    fn __repr__(&self) -> String {
        format!("PatchGrid({}x{}, {} patches)", self.inner.height, self.inner.width, self.inner.patch_count())
    }
}

#[pyfunction]
fn channel_mean(t: PyRef<'_, PyTensor>) -> PyResult<Vec<f64>> {
    patchnorm::tensor::channel_mean(&t.inner).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (t, eps = 1e-5))]
fn channel_std(t: PyRef<'_, PyTensor>, eps: f64) -> PyResult<Vec<f64>> {
    let mean = patchnorm::tensor::channel_mean(&t.inner).map_err(to_py)?;
    patchnorm::tensor::channel_std(&t.inner, &mean, eps).map_err(to_py)
}

fn run_layer(
    kind: &str,
    tape: &mut Tape<f64>,
    x: Var,
    state: &mut norm::NormState<f64>,
    scheme: Option<&SchemeConfig>,
    seed: u64,
    groups: usize,
) -> PyResult<NormVars> {
    let kind: NormKind = kind.parse().map_err(to_py)?;
    let default = SchemeConfig::default();
    let cfg = scheme.unwrap_or(&default);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = match kind {
        NormKind::Bn => norm::bn_forward(tape, x, state),
        NormKind::Pbn => norm::pbn_forward(tape, x, state, cfg, &mut rng),
        NormKind::PixelBn => norm::pixel_bn_forward(tape, x, state, cfg, &mut rng),
        NormKind::In => norm::in_forward(tape, x, state),
        NormKind::Ln => norm::ln_forward(tape, x, state),
        NormKind::Gn => norm::gn_forward(tape, x, state, groups),
    };
    out.map_err(to_py)
}

/// Forward pass of a normalization layer. Batch-statistic layers in
/// train mode update `state` in place.
#[pyfunction]
#[pyo3(signature = (kind, x, state, scheme = None, seed = 0, groups = 2))]
fn normalize(
    kind: &str,
    x: PyRef<'_, PyTensor>,
    mut state: PyRefMut<'_, PyNormState>,
    scheme: Option<PyRef<'_, PySchemeConfig>>,
    seed: u64,
    groups: usize,
) -> PyResult<PyTensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.inner.clone());
    let nv = run_layer(kind, &mut tape, xv, &mut state.inner, scheme.as_ref().map(|s| &s.inner), seed, groups)?;
    Ok(PyTensor { inner: tape.take(nv.out) })
}

/// Forward and backward of a normalization layer for the loss
/// `sum(upstream * output)`. Returns `(output, dx, dgamma, dbeta)`.
#[pyfunction]
#[pyo3(signature = (kind, x, state, upstream, scheme = None, seed = 0, groups = 2))]
#[allow(clippy::type_complexity)]
fn normalize_with_grad(
    kind: &str,
    x: PyRef<'_, PyTensor>,
    mut state: PyRefMut<'_, PyNormState>,
    upstream: PyRef<'_, PyTensor>,
    scheme: Option<PyRef<'_, PySchemeConfig>>,
    seed: u64,
    groups: usize,
) -> PyResult<(PyTensor, PyTensor, Vec<f64>, Vec<f64>)> {
    if upstream.inner.shape() != x.inner.shape() {
        return Err(PyValueError::new_err("upstream must have the shape of x"));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.inner.clone());
    let nv = run_layer(kind, &mut tape, xv, &mut state.inner, scheme.as_ref().map(|s| &s.inner), seed, groups)?;
    let loss = tape.weighted_sum(nv.out, upstream.inner.data()).map_err(to_py)?;
    tape.backward(loss).map_err(to_py)?;
    let grad = |v: Var| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default();
    let dx = patchnorm::Tensor::new(x.inner.shape(), grad(xv)).map_err(to_py)?;
    let (dg, db) = (grad(nv.gamma), grad(nv.beta));
    Ok((PyTensor { inner: tape.value(nv.out).clone() }, PyTensor { inner: dx }, dg, db))
}

#[pyfunction]
#[pyo3(signature = (height, width, patches, split = "random", orientation = "any", seed = 0))]
fn generate_grid(
    height: usize,
    width: usize,
    patches: usize,
    split: &str,
    orientation: &str,
    seed: u64,
) -> PyResult<PyPatchGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = scheme::generate_grid(height, width, patches, parse_split(split)?, parse_orientation(orientation)?, &mut rng)
        .map_err(to_py)?;
    Ok(PyPatchGrid { inner: g })
}

/// One dict per patch row, then one per global row (`patch` is None).
#[pyfunction]
fn analyze_patches<'py>(
    py: Python<'py>,
    t: PyRef<'_, PyTensor>,
    grid: PyRef<'_, PyPatchGrid>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let report = stats::analyze_patches(&t.inner, &grid.inner).map_err(to_py)?;
    report
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("source", r.source)?;
            d.set_item("channel", r.channel)?;
            d.set_item("patch", r.patch)?;
            d.set_item("rect", (r.rect.row_start, r.rect.row_end, r.rect.col_start, r.rect.col_end))?;
            d.set_item("mean", r.mean)?;
            d.set_item("std", r.std)?;
            Ok(d)
        })
        .collect()
}

#[pyfunction]
fn patch_stats_csv(t: PyRef<'_, PyTensor>, grid: PyRef<'_, PyPatchGrid>) -> PyResult<String> {
    Ok(stats::analyze_patches(&t.inner, &grid.inner).map_err(to_py)?.to_csv_string())
}

/// Runs the finite-difference suite. Returns `(passed, [(case, error)])`.
#[pyfunction]
#[pyo3(signature = (sizes = (2, 4, 6, 6), seed = 0))]
fn gradcheck(sizes: (usize, usize, usize, usize), seed: u64) -> PyResult<(bool, Vec<(String, f64)>)> {
    let report = run_suite(&standard_suite(shape_of(sizes), seed, false).map_err(to_py)?).map_err(to_py)?;
    Ok((report.passed(), report.results.iter().map(|r| (r.name.clone(), r.max_error)).collect()))
}

/// `(images, labels)` of the synthetic shape dataset.
#[pyfunction]
fn generate_dataset(seed: u64, n: usize) -> PyResult<(PyTensor, Vec<usize>)> {
    let d = gen_dataset(seed, n).map_err(to_py)?;
    Ok((PyTensor { inner: d.images }, d.labels))
}

#[pyfunction]
#[pyo3(signature = (images, kind, severity, seed = 0))]
fn corrupt(images: PyRef<'_, PyTensor>, kind: &str, severity: u8, seed: u64) -> PyResult<PyTensor> {
    let kind: CorruptionKind = kind.parse().map_err(to_py)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(PyTensor { inner: corrupt_images(&images.inner, kind, severity, &mut rng).map_err(to_py)? })
}

#[pymodule]
fn patchnorm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyNormState>()?;
    m.add_class::<PySchemeConfig>()?;
    m.add_class::<PyPatchGrid>()?;
    m.add_function(wrap_pyfunction!(channel_mean, m)?)?;
    m.add_function(wrap_pyfunction!(channel_std, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_with_grad, m)?)?;
    m.add_function(wrap_pyfunction!(generate_grid, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_patches, m)?)?;
    m.add_function(wrap_pyfunction!(patch_stats_csv, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt, m)?)?;
    m.add("NORM_KINDS", NormKind::ALL.iter().map(|k| k.label()).collect::<Vec<_>>())?;
    Ok(())
}
