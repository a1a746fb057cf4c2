//! Text documents for shapes and pillar libraries.
//!
//! Shape document (pretty JSON, row 0 on top):
//!
//! ```text
//! {
//!   "h": 2,
//!   "w": 4,
//!   "rows": [
//!     "0110",
//!     "0110"
//!   ]
//! }
//! ```
//!
//! Library document (JSON, one action per line):
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "grid": {"h": 12, "w": 32},
//!   "provenance": "surrogate",
//!   "actions": [
//!     {"id": 0, "src_index": [0, 1, ...]},
//!     ...
//!   ]
//! }
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{AdvectionMap, FlowShape, GridSpec, PillarLibrary, Provenance};

pub const LIBRARY_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeDocument {
    pub h: usize,
    pub w: usize,
    pub rows: Vec<String>,
}

impl ShapeDocument {
    pub fn from_shape(shape: &FlowShape) -> Self {
        let g = shape.grid();
        let rows = shape
            .pixels()
            .chunks(g.width)
            .map(|row| row.iter().map(|&p| if p == 1 { '1' } else { '0' }).collect())
            .collect();
        ShapeDocument {
            h: g.height,
            w: g.width,
            rows,
        }
    }

    pub fn to_shape(&self) -> Result<FlowShape> {
        let grid = GridSpec::new(self.h, self.w).map_err(|e| Error::Format(format!("shape: {e}")))?;
        if self.rows.len() != self.h {
            return Err(Error::Format(format!(
                "shape.rows: {} rows for h = {}",
                self.rows.len(),
                self.h
            )));
        }
        let mut pixels = Vec::with_capacity(grid.cells());
        for (i, row) in self.rows.iter().enumerate() {
            if row.chars().count() != self.w {
                return Err(Error::Format(format!(
                    "shape.rows[{i}]: length {} for w = {}",
                    row.chars().count(),
                    self.w
                )));
            }
            for c in row.chars() {
                pixels.push(match c {
                    '0' => 0,
                    '1' => 1,
                    other => {
                        return Err(Error::Format(format!(
                            "shape.rows[{i}]: character '{other}' is not 0 or 1"
                        )))
                    }
                });
            }
        }
        FlowShape::from_pixels(grid, pixels)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("shape documents always serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("shape document: {e}")))
    }
}

pub fn read_shape(path: impl AsRef<Path>) -> Result<FlowShape> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ShapeDocument::from_json(&text)?.to_shape()
}

pub fn write_shape(path: impl AsRef<Path>, shape: &FlowShape) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ShapeDocument::from_shape(shape).to_json()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDocument {
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionDocument {
    pub id: usize,
    pub src_index: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibraryDocument {
    pub format_version: u32,
    pub grid: GridDocument,
    pub provenance: Provenance,
    pub actions: Vec<ActionDocument>,
}

impl LibraryDocument {
    pub fn from_library(lib: &PillarLibrary) -> Self {
        let g = lib.grid();
        LibraryDocument {
            format_version: LIBRARY_FORMAT_VERSION,
            grid: GridDocument {
                h: g.height,
                w: g.width,
            },
            provenance: lib.provenance(),
            actions: lib
                .maps()
                .iter()
                .map(|m| ActionDocument {
                    id: m.action_id(),
                    src_index: m.src_index().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_library(&self) -> Result<PillarLibrary> {
        if self.format_version != LIBRARY_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "library.format_version {} is not supported",
                self.format_version
            )));
        }
        let grid = GridSpec::new(self.grid.h, self.grid.w).map_err(|e| Error::Format(format!("library.grid: {e}")))?;
        let maps = self
            .actions
            .iter()
            .enumerate()
            .map(|(k, a)| {
                if a.id != k {
                    return Err(Error::Format(format!(
                        "library.actions[{k}].id is {}; ids must be contiguous from 0",
                        a.id
                    )));
                }
                AdvectionMap::new(grid, a.id, a.src_index.clone())
                    .map_err(|e| Error::Format(format!("library.actions[{k}]: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        PillarLibrary::from_maps(grid, maps, self.provenance).map_err(|e| Error::Format(format!("library: {e}")))
    }

    pub fn to_json(&self) -> String {
        let mut s = String::new();
        s.push_str("{\n");
        let _ = writeln!(s, "  \"format_version\": {},", self.format_version);
        let _ = writeln!(s, "  \"grid\": {{\"h\": {}, \"w\": {}}},", self.grid.h, self.grid.w);
        let _ = writeln!(s, "  \"provenance\": \"{}\",", self.provenance);
        s.push_str("  \"actions\": [\n");
        for (k, a) in self.actions.iter().enumerate() {
            let _ = write!(s, "    {{\"id\": {}, \"src_index\": [", a.id);
            for (i, v) in a.src_index.iter().enumerate() {
                if i > 0 {
                    s.push_str(", ");
                }
                let _ = write!(s, "{v}");
            }
            s.push_str("]}");
            if k + 1 < self.actions.len() {
                s.push(',');
            }
            s.push('\n');
        }
        s.push_str("  ]\n}\n");
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("library document: {e}")))
    }
}

pub fn read_library(path: impl AsRef<Path>) -> Result<PillarLibrary> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LibraryDocument::from_json(&text)?.to_library()
}

pub fn write_library(path: impl AsRef<Path>, lib: &PillarLibrary) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, LibraryDocument::from_library(lib).to_json()).map_err(|e| Error::io(path, e))
}
