//! Python bindings: shapes, the pillar library, the environment, training,
//! checkpoints and suggestions. Structured results come back as plain
//! Python objects decoded from the same JSON the CLI writes.

use std::sync::Arc;

use flowsculpt::agent::checkpoint::Checkpoint as CoreCheckpoint;
use flowsculpt::docs::{LibraryDocument, ShapeDocument};
use flowsculpt::env::{self, EnvConfig, EnvState};
use flowsculpt::flow::{self, FlowShape, GridSpec, PillarLibrary, PillarSequence};
use flowsculpt::suggest::{solve, SuggestOptions, DEFAULT_SUGGEST_EPSILON, DEFAULT_SUGGEST_SEED};
use flowsculpt::trainer::{self, EnvSettings, RunArtifacts, TrainConfig};
use flowsculpt::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn loads<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Accepts a JSON string or any object `json.dumps` can encode.
fn dumps(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(s) = value.extract::<String>() {
        return Ok(s);
    }
    py.import("json")?.call_method1("dumps", (value,))?.extract()
}

fn grid(height: usize, width: usize) -> PyResult<GridSpec> {
    GridSpec::new(height, width).map_err(py_err)
}

/// Binary flow cross-section; row 0 is the top of the channel.
#[pyclass(name = "Shape", module = "flowsculpt_py", eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
pub struct Shape(FlowShape);

#[pymethods]
impl Shape {
    /// Builds a shape from rows of '0'/'1' characters.
    #[new]
    fn new(rows: Vec<String>) -> PyResult<Self> {
        let doc = ShapeDocument {
            h: rows.len(),
            w: rows.first().map_or(0, |r| r.chars().count()),
            rows,
        };
        doc.to_shape().map(Shape).map_err(py_err)
    }

    #[staticmethod]
    fn zeros(height: usize, width: usize) -> PyResult<Self> {
        Ok(Shape(FlowShape::zeros(grid(height, width)?)))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        ShapeDocument::from_json(text)
            .and_then(|d| d.to_shape())
            .map(Shape)
            .map_err(py_err)
    }

    fn to_json(&self) -> String {
        ShapeDocument::from_shape(&self.0).to_json()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.grid().height
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.grid().width
    }

    fn rows(&self) -> Vec<String> {
        ShapeDocument::from_shape(&self.0).rows
    }

    /// Row-major 0/1 pixels.
    fn pixels(&self) -> Vec<u8> {
        self.0.pixels().to_vec()
    }

    fn get(&self, row: usize, col: usize) -> PyResult<bool> {
        let g = self.0.grid();
        if row >= g.height || col >= g.width {
            return Err(PyValueError::new_err(format!("({row}, {col}) is outside {g}")));
        }
        Ok(self.0.get(row, col))
    }

    fn count_on(&self) -> usize {
        self.0.count_on()
    }

    fn __repr__(&self) -> String {
        format!("Shape({}, {} on)", self.0.grid(), self.0.count_on())
    }

    fn __str__(&self) -> String {
        self.rows().join("\n")
    }
}

/// The 32 pillar advection maps for one grid.
#[pyclass(name = "Library", module = "flowsculpt_py", frozen)]
pub struct Library(Arc<PillarLibrary>);

#[pymethods]
impl Library {
    #[staticmethod]
    #[pyo3(signature = (height = 12, width = 32))]
    fn surrogate(height: usize, width: usize) -> PyResult<Self> {
        Ok(Library(Arc::new(PillarLibrary::surrogate(grid(height, width)?))))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        LibraryDocument::from_json(text)
            .and_then(|d| d.to_library())
            .map(|l| Library(Arc::new(l)))
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        flowsculpt::docs::read_library(path)
            .map(|l| Library(Arc::new(l)))
            .map_err(py_err)
    }

    fn to_json(&self) -> String {
        LibraryDocument::from_library(&self.0).to_json()
    }

    #[getter]
    fn num_actions(&self) -> usize {
        self.0.num_actions()
    }

    #[getter]
    fn grid(&self) -> (usize, usize) {
        let g = self.0.grid();
        (g.height, g.width)
    }

    #[getter]
    fn provenance(&self) -> String {
        self.0.provenance().to_string()
    }

    /// Applies one pillar.
    fn apply(&self, shape: &Shape, action: usize) -> PyResult<Shape> {
        let map = self.0.map(action).map_err(py_err)?;
        flow::apply_pillar(&shape.0, map).map(Shape).map_err(py_err)
    }

    /// Intermediate shapes after each pillar, starting from `inlet` (the
    /// default stripe when omitted). The inlet itself is not included.
    #[pyo3(signature = (sequence, inlet = None))]
    fn simulate(&self, sequence: Vec<usize>, inlet: Option<PyRef<'_, Shape>>) -> PyResult<Vec<Shape>> {
        let start = match inlet {
            Some(s) => s.0.clone(),
            None => flow::default_inlet(self.0.grid()),
        };
        flow::apply_sequence(&start, &PillarSequence::new(sequence), &self.0)
            .map(|v| v.into_iter().map(Shape).collect())
            .map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Library({}, {} actions, {})",
            self.0.grid(),
            self.0.num_actions(),
            self.0.provenance()
        )
    }
}

/// Environment settings resolved against a library.
#[pyclass(name = "Environment", module = "flowsculpt_py", frozen)]
pub struct Environment(EnvConfig);

#[pymethods]
impl Environment {
    /// `settings` is the `env` section of a training config, as a dict or
    /// JSON string. Omitted fields take their defaults.
    #[new]
    #[pyo3(signature = (settings = None))]
    fn new(py: Python<'_>, settings: Option<Bound<'_, PyAny>>) -> PyResult<Self> {
        let settings: EnvSettings = match settings {
            Some(v) => serde_json::from_str(&dumps(py, &v)?).map_err(json_err)?,
            None => EnvSettings::default(),
        };
        settings.build().map(Environment).map_err(py_err)
    }

    #[getter]
    fn library(&self) -> Library {
        Library(Arc::clone(&self.0.library))
    }

    #[getter]
    fn inlet(&self) -> Shape {
        Shape(self.0.inlet.clone())
    }

    #[getter]
    fn max_steps(&self) -> usize {
        self.0.max_steps
    }

    #[getter]
    fn pmr_threshold(&self) -> f64 {
        self.0.pmr_threshold
    }

    fn reset(&self, target: &Shape) -> PyResult<Episode> {
        let state = env::reset(&self.0, &target.0).map_err(py_err)?;
        Ok(Episode {
            env: self.0.clone(),
            state,
        })
    }
}

/// One episode in progress.
#[pyclass(name = "Episode", module = "flowsculpt_py")]
pub struct Episode {
    env: EnvConfig,
    state: EnvState,
}

#[pymethods]
impl Episode {
    /// Applies `action`; returns `(reward, done, success, pmr)`.
    fn step(&mut self, action: usize) -> PyResult<(f64, bool, bool, f64)> {
        let (next, r) = env::step(&self.state, action, &self.env).map_err(py_err)?;
        self.state = next;
        Ok((r.reward, r.done, r.success, r.pmr))
    }

    #[getter]
    fn current(&self) -> Shape {
        Shape(self.state.current.clone())
    }

    #[getter]
    fn actions(&self) -> Vec<usize> {
        self.state.action_history.actions().to_vec()
    }

    #[getter]
    fn done(&self) -> bool {
        self.state.done
    }

    #[getter]
    fn success(&self) -> bool {
        self.state.success
    }
}

#[pyclass(name = "Checkpoint", module = "flowsculpt_py", frozen)]
pub struct Checkpoint(CoreCheckpoint);

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        CoreCheckpoint::load(path).map(Checkpoint).map_err(py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        CoreCheckpoint::from_json(text).map(Checkpoint).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(py_err)
    }

    fn metadata<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        loads(py, &serde_json::to_string(&self.0.metadata).map_err(json_err)?)
    }

    fn q_values(&self, shape: &Shape) -> PyResult<Vec<f64>> {
        self.0.network().and_then(|n| n.forward(&shape.0)).map_err(py_err)
    }

    #[pyo3(signature = (env, target, episodes = 1))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        env: &Environment,
        target: &Shape,
        episodes: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let summary = trainer::evaluate_checkpoint(&self.0, &env.0, &target.0, episodes).map_err(py_err)?;
        loads(py, &serde_json::to_string(&summary).map_err(json_err)?)
    }

    /// Up to `k` candidate sequences for `target`, best first.
    #[pyo3(signature = (env, target, k = 1, seed = DEFAULT_SUGGEST_SEED))]
    fn suggest<'py>(
        &self,
        py: Python<'py>,
        env: &Environment,
        target: &Shape,
        k: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let params = self.0.network().map_err(py_err)?;
        let opts = SuggestOptions {
            k,
            seed,
            epsilon: DEFAULT_SUGGEST_EPSILON,
        };
        let found = py.detach(|| solve(&params, &env.0, &target.0, &opts)).map_err(py_err)?;
        loads(py, &serde_json::to_string(&found).map_err(json_err)?)
    }
}

/// A finished training run.
#[pyclass(name = "Run", module = "flowsculpt_py", frozen)]
pub struct Run(RunArtifacts);

#[pymethods]
impl Run {
    #[getter]
    fn checkpoint(&self) -> Checkpoint {
        Checkpoint(self.0.checkpoint.clone())
    }

    #[getter]
    fn episodes(&self) -> usize {
        self.0.episodes.len()
    }

    /// Success frequency of each window, in order.
    fn window_frequencies(&self) -> Vec<f64> {
        self.0.windows.iter().map(|w| w.frequency).collect()
    }

    fn final_window_frequency(&self) -> Option<f64> {
        self.0.final_window_frequency()
    }

    fn episodes_to_reach(&self, level: f64) -> Option<usize> {
        self.0.episodes_to_reach(level)
    }

    fn total_unique_states(&self) -> usize {
        self.0.total_unique_states()
    }

    fn counters<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        loads(py, &serde_json::to_string(&self.0.counters).map_err(json_err)?)
    }

    /// `(sequence, count)` for the `k` most frequent solutions.
    fn top_solutions(&self, k: usize) -> Vec<(Vec<usize>, u64)> {
        self.0
            .solutions
            .top_k(k)
            .into_iter()
            .map(|e| (e.sequence.0, e.frequency))
            .collect()
    }

    fn write_dir(&self, path: &str) -> PyResult<()> {
        self.0.write_dir(path).map_err(py_err)
    }
}

/// A training config as a dict: "desk", "full", or the full-scale
/// protocol multiplied by `scale`.
#[pyfunction]
#[pyo3(signature = (preset = "desk", scale = None))]
fn config<'py>(py: Python<'py>, preset: &str, scale: Option<f64>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = match (preset, scale) {
        (_, Some(f)) if f > 0.0 && f.is_finite() => TrainConfig::scaled(f),
        (_, Some(f)) => return Err(PyValueError::new_err(format!("scale {f} must be positive"))),
        ("desk", None) => TrainConfig::desk(),
        ("full", None) => TrainConfig::full_scale(),
        (other, None) => return Err(PyValueError::new_err(format!("unknown preset '{other}'"))),
    };
    loads(py, &serde_json::to_string(&cfg).map_err(json_err)?)
}

/// Trains on `target`. `config` is a dict or JSON string in the config
/// file format; `seed` and `episodes` override it.
#[pyfunction]
#[pyo3(signature = (target, config = None, seed = None, episodes = None, init = None))]
fn train(
    py: Python<'_>,
    target: &Shape,
    config: Option<Bound<'_, PyAny>>,
    seed: Option<u64>,
    episodes: Option<usize>,
    init: Option<PyRef<'_, Checkpoint>>,
) -> PyResult<Run> {
    let mut cfg: TrainConfig = match config {
        Some(v) => serde_json::from_str(&dumps(py, &v)?).map_err(json_err)?,
        None => TrainConfig::desk(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = episodes {
        cfg.episodes = n;
    }
    let init = init.map(|c| c.0.clone());
    let target = target.0.clone();
    py.detach(|| trainer::train(&cfg, &target, init.as_ref()))
        .map(Run)
        .map_err(py_err)
}

#[pyfunction]
fn pmr(generated: &Shape, target: &Shape) -> PyResult<f64> {
    flow::pmr(&generated.0, &target.0).map_err(py_err)
}

#[pyfunction]
fn reward(p: f64, b: f64) -> f64 {
    env::reward_fn(p, b)
}

#[pyfunction]
#[pyo3(signature = (height = 12, width = 32))]
fn default_inlet(height: usize, width: usize) -> PyResult<Shape> {
    Ok(Shape(flow::default_inlet(grid(height, width)?)))
}

#[pyfunction]
fn make_inlet(height: usize, width: usize, lo: f64, hi: f64) -> PyResult<Shape> {
    flow::make_inlet(grid(height, width)?, lo, hi)
        .map(Shape)
        .map_err(py_err)
}

/// Parses "22, 11, 31" style text into action ids.
#[pyfunction]
#[pyo3(signature = (text, num_actions = flow::NUM_ACTIONS))]
fn parse_sequence(text: &str, num_actions: usize) -> PyResult<Vec<usize>> {
    PillarSequence::parse_checked(text, num_actions)
        .map(|s| s.0)
        .map_err(py_err)
}

#[pymodule]
fn flowsculpt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Shape>()?;
    m.add_class::<Library>()?;
    m.add_class::<Environment>()?;
    m.add_class::<Episode>()?;
    m.add_class::<Checkpoint>()?;
    m.add_class::<Run>()?;
    m.add_function(wrap_pyfunction!(config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(pmr, m)?)?;
    m.add_function(wrap_pyfunction!(reward, m)?)?;
    m.add_function(wrap_pyfunction!(default_inlet, m)?)?;
    m.add_function(wrap_pyfunction!(make_inlet, m)?)?;
    m.add_function(wrap_pyfunction!(parse_sequence, m)?)?;
    m.add("NUM_ACTIONS", flow::NUM_ACTIONS)?;
    Ok(())
}
