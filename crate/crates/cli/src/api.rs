//! Documents exchanged by the command line and the service, and the pure
//! functions that answer them. Both front ends serialize through
//! [`to_document`], so identical inputs give byte-identical output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use flowsculpt::agent::checkpoint::{Checkpoint, CheckpointMetadata};
use flowsculpt::agent::QNetworkParams;
use flowsculpt::docs::{ShapeDocument, LIBRARY_FORMAT_VERSION};
use flowsculpt::env::EnvConfig;
use flowsculpt::flow::{apply_sequence, make_inlet, pmr, FlowShape, PillarLibrary, PillarSequence, Provenance};
use flowsculpt::suggest::{suggest, SuggestionRequest, SuggestionResponse};
use flowsculpt::trainer::InletSpec;
use flowsculpt::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Pretty JSON with a trailing newline.
pub fn to_document<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// A parse failure located at a field path such as `target.rows[3]`.
#[derive(Debug)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.field.is_empty() || self.field == "." {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

pub fn parse_document<T: DeserializeOwned>(text: &[u8]) -> std::result::Result<T, FieldError> {
    let de = &mut serde_json::Deserializer::from_slice(text);
    serde_path_to_error::deserialize(de).map_err(|e| FieldError {
        field: e.path().to_string(),
        message: e.into_inner().to_string(),
    })
}

/// Either a list of ids or the `"22, 11, 31"` text form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged, expecting = "a list of pillar ids or a comma-separated string")]
pub enum SequenceField {
    Ids(Vec<usize>),
    Text(String),
}

impl Default for SequenceField {
    fn default() -> Self {
        SequenceField::Ids(Vec::new())
    }
}

impl SequenceField {
    pub fn resolve(&self, num_actions: usize) -> Result<PillarSequence> {
        match self {
            SequenceField::Ids(ids) => {
                let seq = PillarSequence::new(ids.clone());
                seq.validate(num_actions)?;
                Ok(seq)
            }
            SequenceField::Text(s) => PillarSequence::parse_checked(s, num_actions),
        }
    }
}

/// An inlet stripe `{lo, hi}` or a full shape document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged, expecting = "an inlet stripe {lo, hi} or a shape document {h, w, rows}")]
pub enum InletField {
    Stripe(InletSpec),
    Shape(ShapeDocument),
}

impl InletField {
    pub fn resolve(&self, library: &PillarLibrary) -> Result<FlowShape> {
        match self {
            InletField::Stripe(s) => make_inlet(library.grid(), s.lo, s.hi),
            InletField::Shape(doc) => {
                let shape = doc.to_shape()?;
                if shape.grid() != library.grid() {
                    return Err(Error::Shape(format!(
                        "inlet grid {} does not match library grid {}",
                        shape.grid(),
                        library.grid()
                    )));
                }
                Ok(shape)
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateRequest {
    #[serde(default)]
    pub sequence: SequenceField,
    /// Defaults to the environment's inlet.
    #[serde(default)]
    pub inlet: Option<InletField>,
    #[serde(default)]
    pub target: Option<ShapeDocument>,
}

/// `shapes[0]` is the inlet and `shapes[i]` the shape after `i` pillars;
/// `pmr[i]` scores `shapes[i]` when a target was given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateResponse {
    pub sequence: PillarSequence,
    pub shapes: Vec<ShapeDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pmr: Option<Vec<f64>>,
}

/// Where a failed request went wrong, for field-level error messages.
#[derive(Debug)]
pub struct RequestError {
    pub field: &'static str,
    pub error: Error,
}

fn at(field: &'static str) -> impl FnOnce(Error) -> RequestError {
    move |error| RequestError { field, error }
}

pub fn simulate(env: &EnvConfig, req: &SimulateRequest) -> std::result::Result<SimulateResponse, RequestError> {
    let library = &env.library;
    let sequence = req.sequence.resolve(library.num_actions()).map_err(at("sequence"))?;
    let inlet = match &req.inlet {
        Some(i) => i.resolve(library).map_err(at("inlet"))?,
        None => env.inlet.clone(),
    };
    let target = match &req.target {
        Some(doc) => Some(doc.to_shape().map_err(at("target"))?),
        None => None,
    };
    let mut shapes = vec![inlet.clone()];
    shapes.extend(apply_sequence(&inlet, &sequence, library).map_err(at("sequence"))?);
    let pmr = match &target {
        Some(t) => Some(
            shapes
                .iter()
                .map(|s| pmr(s, t))
                .collect::<Result<Vec<_>>>()
                .map_err(at("target"))?,
        ),
        None => None,
    };
    Ok(SimulateResponse {
        sequence,
        shapes: shapes.iter().map(ShapeDocument::from_shape).collect(),
        pmr,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmrRequest {
    /// Generated shape.
    pub a: ShapeDocument,
    /// Target shape.
    pub b: ShapeDocument,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmrResponse {
    pub pmr: f64,
}

pub fn pmr_of(req: &PmrRequest) -> std::result::Result<PmrResponse, RequestError> {
    let a = req.a.to_shape().map_err(at("a"))?;
    let b = req.b.to_shape().map_err(at("b"))?;
    Ok(PmrResponse {
        pmr: pmr(&a, &b).map_err(at("b"))?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryInfo {
    pub format_version: u32,
    pub grid: GridInfo,
    pub actions: usize,
    pub provenance: Provenance,
    pub inlet: ShapeDocument,
    pub max_steps: usize,
    pub pmr_threshold: f64,
}

pub fn library_info(env: &EnvConfig) -> LibraryInfo {
    let g = env.library.grid();
    LibraryInfo {
        format_version: LIBRARY_FORMAT_VERSION,
        grid: GridInfo {
            h: g.height,
            w: g.width,
        },
        actions: env.library.num_actions(),
        provenance: env.library.provenance(),
        inlet: ShapeDocument::from_shape(&env.inlet),
        max_steps: env.max_steps,
        pmr_threshold: env.pmr_threshold,
    }
}

/// Identifier of a checkpoint file: the run directory's name for
/// `<run>/checkpoint.json`, otherwise the file name without `.json`.
pub fn checkpoint_id(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    if name == "checkpoint.json" {
        if let Some(parent) = path.parent().and_then(|p| p.file_name()) {
            return parent.to_string_lossy().into_owned();
        }
    }
    name.strip_suffix(".json").unwrap_or(&name).to_string()
}

pub struct LoadedCheckpoint {
    pub path: PathBuf,
    pub metadata: CheckpointMetadata,
    pub params: QNetworkParams,
}

impl LoadedCheckpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        Ok(LoadedCheckpoint {
            path: path.to_path_buf(),
            params: ck.network()?,
            metadata: ck.metadata,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckpointInfo {
    pub id: String,
    #[serde(flatten)]
    pub metadata: CheckpointMetadata,
}

/// Checkpoints read once at startup and never modified.
#[derive(Default)]
pub struct CheckpointStore {
    entries: BTreeMap<String, Arc<LoadedCheckpoint>>,
}

impl CheckpointStore {
    /// Loads `<dir>/<id>.json` files and `<dir>/<id>/checkpoint.json` run
    /// directories. Any unreadable checkpoint is an error.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths = Vec::new();
        let entries = fs::read_dir(dir).map_err(|e| Error::Config(format!("checkpoint dir {}: {e}", dir.display())))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::Config(format!("checkpoint dir {}: {e}", dir.display())))?;
            let path = entry.path();
            if path.is_dir() {
                let inner = path.join("checkpoint.json");
                if inner.is_file() {
                    paths.push(inner);
                }
            } else if path.extension().is_some_and(|e| e == "json") {
                paths.push(path);
            }
        }
        paths.sort();
        let mut store = CheckpointStore::default();
        for p in paths {
            store.insert(LoadedCheckpoint::load(&p)?)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, ck: LoadedCheckpoint) -> Result<()> {
        let id = checkpoint_id(&ck.path);
        if let Some(prev) = self.entries.get(&id) {
            return Err(Error::Config(format!(
                "checkpoint id '{id}' is used by both {} and {}",
                prev.path.display(),
                ck.path.display()
            )));
        }
        self.entries.insert(id, Arc::new(ck));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<Arc<LoadedCheckpoint>> {
        self.entries.get(id).cloned()
    }

    pub fn list(&self) -> Vec<CheckpointInfo> {
        self.entries
            .iter()
            .map(|(id, ck)| CheckpointInfo {
                id: id.clone(),
                metadata: ck.metadata.clone(),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Runs a suggestion request against a loaded checkpoint.
pub fn suggest_with(
    ck: &LoadedCheckpoint,
    env: &EnvConfig,
    req: &SuggestionRequest,
) -> std::result::Result<SuggestionResponse, RequestError> {
    let grid = env.library.grid();
    if ck.metadata.grid != grid {
        return Err(RequestError {
            field: "checkpoint",
            error: Error::Checkpoint(format!(
                "checkpoint '{}' was trained on grid {}, the library has {grid}",
                req.checkpoint, ck.metadata.grid
            )),
        });
    }
    if req.k == 0 {
        return Err(RequestError {
            field: "k",
            error: Error::Parameter("k must be at least 1".into()),
        });
    }
    let target = req.target.to_shape().map_err(at("target"))?;
    if target.grid() != grid {
        return Err(RequestError {
            field: "target",
            error: Error::Shape(format!(
                "target grid {} does not match library grid {grid}",
                target.grid()
            )),
        });
    }
    if target.count_on() == 0 {
        return Err(RequestError {
            field: "target",
            error: Error::UndefinedMetric("target shape has no on-pixels".into()),
        });
    }
    if let Some(m) = req.max_steps {
        env.clone().with_max_steps(m).map_err(at("max_steps"))?;
    }
    if let Some(t) = req.pmr_threshold {
        env.clone().with_threshold(t).map_err(at("pmr_threshold"))?;
    }
    suggest(&ck.params, env, req).map_err(at(""))
}
