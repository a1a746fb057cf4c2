//! Flow cross-sections and the pillar deformations that act on them.
//!
//! A [`FlowShape`] is a binary occupancy grid of the sculpted stream seen in
//! the channel cross-section: rows run along the channel depth, columns along
//! the lateral axis. Each pillar configuration is an [`AdvectionMap`], a total
//! gather map telling every destination pixel which source pixel's fluid ends
//! up there. Applying a pillar is a pure gather; a sequence of pillars is the
//! left-to-right composition of their maps.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of pillar configurations in the default library.
pub const NUM_ACTIONS: usize = 32;

/// Upper bound on `height * width`.
pub const MAX_GRID_CELLS: usize = 1 << 20;

/// Default inlet stripe: the central 25% of the channel width.
pub const DEFAULT_INLET: (f64, f64) = (0.375, 0.625);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
}

impl GridSpec {
    pub const DEFAULT: GridSpec = GridSpec { height: 12, width: 32 };

    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::Parameter(format!(
                "grid {height}x{width}: both dimensions must be at least 2"
            )));
        }
        match height.checked_mul(width) {
            Some(n) if n <= MAX_GRID_CELLS => Ok(GridSpec { height, width }),
            _ => Err(Error::Parameter(format!(
                "grid {height}x{width} exceeds {MAX_GRID_CELLS} cells"
            ))),
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub(crate) fn check_same(&self, other: &GridSpec, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::Shape(format!("{what}: grid {self} vs {other}")));
        }
        Ok(())
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    /// Parses `HxW`, e.g. `12x32`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parameter(format!("grid '{s}' is not of the form HxW"));
        let (h, w) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
        let h = h.trim().parse().map_err(|_| bad())?;
        let w = w.trim().parse().map_err(|_| bad())?;
        GridSpec::new(h, w)
    }
}

/// Binary cross-section of the sculpted stream, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FlowShape {
    grid: GridSpec,
    pixels: Vec<u8>,
}

impl FlowShape {
    pub fn zeros(grid: GridSpec) -> Self {
        FlowShape {
            grid,
            pixels: vec![0; grid.cells()],
        }
    }

    /// Builds a shape from row-major 0/1 values.
    pub fn from_pixels(grid: GridSpec, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != grid.cells() {
            return Err(Error::Shape(format!(
                "{} pixels for grid {grid} ({} expected)",
                pixels.len(),
                grid.cells()
            )));
        }
        if let Some(p) = pixels.iter().find(|&&p| p > 1) {
            return Err(Error::Parameter(format!("pixel value {p} is not 0 or 1")));
        }
        Ok(FlowShape { grid, pixels })
    }

    pub fn from_fn(grid: GridSpec, mut on: impl FnMut(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(grid.cells());
        for i in 0..grid.height {
            for j in 0..grid.width {
                pixels.push(on(i, j) as u8);
            }
        }
        FlowShape { grid, pixels }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.pixels[self.grid.index(row, col)] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        let d = self.grid.index(row, col);
        self.pixels[d] = on as u8;
    }

    /// Flips one pixel by flat index.
    pub fn toggle(&mut self, index: usize) {
        self.pixels[index] ^= 1;
    }

    pub fn count_on(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    /// Flat indices of the on-pixels, ascending.
    pub fn on_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.pixels.iter().enumerate().filter(|(_, &p)| p == 1).map(|(d, _)| d)
    }
}

/// Per-action gather map: destination pixel `d` takes the value of source
/// pixel `src_index[d]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdvectionMap {
    grid: GridSpec,
    action_id: usize,
    src_index: Vec<u32>,
}

impl AdvectionMap {
    pub fn new(grid: GridSpec, action_id: usize, src_index: Vec<u32>) -> Result<Self> {
        if src_index.len() != grid.cells() {
            return Err(Error::Shape(format!(
                "advection map for action {action_id} has {} entries, grid {grid} needs {}",
                src_index.len(),
                grid.cells()
            )));
        }
        if let Some((d, &s)) = src_index.iter().enumerate().find(|(_, &s)| s as usize >= grid.cells()) {
            return Err(Error::Parameter(format!(
                "advection map for action {action_id}: src_index[{d}] = {s} out of range"
            )));
        }
        Ok(AdvectionMap {
            grid,
            action_id,
            src_index,
        })
    }

    pub fn identity(grid: GridSpec, action_id: usize) -> Self {
        AdvectionMap {
            grid,
            action_id,
            src_index: (0..grid.cells() as u32).collect(),
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn action_id(&self) -> usize {
        self.action_id
    }

    pub fn src_index(&self) -> &[u32] {
        &self.src_index
    }
}

/// Constants of the closed-form surrogate deformation.
///
/// Action `a` places a pillar at lateral position `center_offset +
/// center_spacing * (a % 4)` with strength `amplitude_step * (a / 4 + 1)`.
/// The backward displacement of a destination pixel at normalized lateral
/// coordinate `y` and depth `z` is
/// `-amplitude * sin(2 pi z) * exp(-(y - c)^2 / (2 width^2))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateParams {
    pub amplitude_step: f64,
    pub center_offset: f64,
    pub center_spacing: f64,
    pub width: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        SurrogateParams {
            amplitude_step: 0.05,
            center_offset: 0.125,
            center_spacing: 0.25,
            width: 0.15,
        }
    }
}

/// Upper clamp margin for the backward-traced lateral coordinate.
const SOURCE_CLAMP_EPS: f64 = 1e-9;

/// Builds the surrogate advection map for one of the 32 pillar configurations.
pub fn build_surrogate_map(action: usize, grid: GridSpec) -> Result<AdvectionMap> {
    build_surrogate_map_with(action, grid, &SurrogateParams::default())
}

pub fn build_surrogate_map_with(action: usize, grid: GridSpec, params: &SurrogateParams) -> Result<AdvectionMap> {
    if action >= NUM_ACTIONS {
        return Err(Error::Parameter(format!(
            "action {action} out of range 0..{NUM_ACTIONS}"
        )));
    }
    let position = (action % 4) as f64;
    let strength = (action / 4) as f64;
    let center = params.center_offset + params.center_spacing * position;
    let amplitude = params.amplitude_step * (strength + 1.0);
    let two_var = 2.0 * params.width * params.width;

    let (h, w) = (grid.height, grid.width);
    let mut src_index = Vec::with_capacity(grid.cells());
    for i in 0..h {
        let z = (i as f64 + 0.5) / h as f64;
        let shear = amplitude * (2.0 * PI * z).sin();
        for j in 0..w {
            let y = (j as f64 + 0.5) / w as f64;
            let dy = y - center;
            let y_src = (y - shear * (-(dy * dy) / two_var).exp()).clamp(0.0, 1.0 - SOURCE_CLAMP_EPS);
            // Nearest cell center; f64::round is half-away-from-zero. A source at
            // the very left wall lands on -0.5 and is pulled back to column 0.
            let col = (y_src * w as f64 - 0.5).round().clamp(0.0, (w - 1) as f64) as usize;
            src_index.push(grid.index(i, col) as u32);
        }
    }
    Ok(AdvectionMap {
        grid,
        action_id: action,
        src_index,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Surrogate,
    File,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Surrogate => "surrogate",
            Provenance::File => "file",
        })
    }
}

/// The ordered set of pillar maps available to the designer.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarLibrary {
    grid: GridSpec,
    maps: Vec<AdvectionMap>,
    provenance: Provenance,
}

impl PillarLibrary {
    /// The 32 built-in surrogate maps.
    pub fn surrogate(grid: GridSpec) -> Self {
        let maps = (0..NUM_ACTIONS)
            .map(|a| build_surrogate_map(a, grid).expect("action in range"))
            .collect();
        PillarLibrary {
            grid,
            maps,
            provenance: Provenance::Surrogate,
        }
    }

    pub fn from_maps(grid: GridSpec, maps: Vec<AdvectionMap>, provenance: Provenance) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Parameter("library has no maps".into()));
        }
        for (k, m) in maps.iter().enumerate() {
            if m.action_id != k {
                return Err(Error::Parameter(format!(
                    "map at position {k} has action id {}",
                    m.action_id
                )));
            }
            grid.check_same(&m.grid, &format!("map {k}"))?;
        }
        Ok(PillarLibrary { grid, maps, provenance })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn num_actions(&self) -> usize {
        self.maps.len()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn maps(&self) -> &[AdvectionMap] {
        &self.maps
    }

    pub fn map(&self, action: usize) -> Result<&AdvectionMap> {
        self.maps
            .get(action)
            .ok_or_else(|| Error::Parameter(format!("action {action} out of range 0..{}", self.maps.len())))
    }
}

/// An ordered list of pillar ids, first pillar applied first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PillarSequence(pub Vec<usize>);

impl PillarSequence {
    pub fn new(actions: Vec<usize>) -> Self {
        PillarSequence(actions)
    }

    pub fn actions(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn push(&mut self, action: usize) {
        self.0.push(action);
    }

    pub fn validate(&self, num_actions: usize) -> Result<()> {
        match self.0.iter().find(|&&a| a >= num_actions) {
            Some(a) => Err(Error::Parameter(format!("pillar id {a} out of range 0..{num_actions}"))),
            None => Ok(()),
        }
    }

    /// Parses a comma-separated list such as `"22, 11, 31"`, rejecting ids
    /// outside `0..num_actions` by name.
    pub fn parse_checked(s: &str, num_actions: usize) -> Result<Self> {
        let seq: PillarSequence = s.parse()?;
        if let Some(a) = seq.0.iter().find(|&&a| a >= num_actions) {
            return Err(Error::Parameter(format!(
                "sequence token '{a}' is not a pillar id in 0..{num_actions}"
            )));
        }
        Ok(seq)
    }
}

impl FromStr for PillarSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Ok(PillarSequence::default());
        }
        s.split(',')
            .map(|tok| {
                let tok = tok.trim();
                tok.parse::<usize>()
                    .map_err(|_| Error::Parameter(format!("sequence token '{tok}' is not a pillar id")))
            })
            .collect::<Result<Vec<_>>>()
            .map(PillarSequence)
    }
}

impl fmt::Display for PillarSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, a) in self.0.iter().enumerate() {
            if k > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

/// Inlet stream: a full-height stripe covering columns
/// `floor(lo * W) .. floor(hi * W)`.
pub fn make_inlet(grid: GridSpec, lo_frac: f64, hi_frac: f64) -> Result<FlowShape> {
    if !(0.0..=1.0).contains(&lo_frac) || !(0.0..=1.0).contains(&hi_frac) || lo_frac >= hi_frac {
        return Err(Error::Parameter(format!(
            "inlet fractions must satisfy 0 <= lo < hi <= 1, got lo={lo_frac} hi={hi_frac}"
        )));
    }
    let w = grid.width as f64;
    let lo = (lo_frac * w).floor() as usize;
    let hi = (hi_frac * w).floor() as usize;
    Ok(FlowShape::from_fn(grid, |_, j| lo <= j && j < hi))
}

pub fn default_inlet(grid: GridSpec) -> FlowShape {
    make_inlet(grid, DEFAULT_INLET.0, DEFAULT_INLET.1).expect("default fractions are valid")
}

pub fn apply_pillar(shape: &FlowShape, map: &AdvectionMap) -> Result<FlowShape> {
    shape.grid.check_same(&map.grid, "apply_pillar")?;
    let pixels = map.src_index.iter().map(|&s| shape.pixels[s as usize]).collect();
    Ok(FlowShape {
        grid: shape.grid,
        pixels,
    })
}

/// Returns every intermediate shape `s1..sL` of the sequence.
pub fn apply_sequence(shape: &FlowShape, seq: &PillarSequence, library: &PillarLibrary) -> Result<Vec<FlowShape>> {
    seq.validate(library.num_actions())?;
    let mut out: Vec<FlowShape> = Vec::with_capacity(seq.len());
    for &a in seq.actions() {
        let prev = out.last().unwrap_or(shape);
        let next = apply_pillar(prev, library.map(a)?)?;
        out.push(next);
    }
    Ok(out)
}

/// Final shape of a sequence (the inlet itself for an empty sequence).
pub fn final_shape(shape: &FlowShape, seq: &PillarSequence, library: &PillarLibrary) -> Result<FlowShape> {
    Ok(apply_sequence(shape, seq, library)?
        .pop()
        .unwrap_or_else(|| shape.clone()))
}

/// Pixel match rate `max(0, 1 - mismatches / target_on_pixels)`.
pub fn pmr(generated: &FlowShape, target: &FlowShape) -> Result<f64> {
    generated.grid.check_same(&target.grid, "pmr")?;
    let target_mass = target.count_on();
    if target_mass == 0 {
        return Err(Error::UndefinedMetric(
            "pixel match rate needs a target with at least one on-pixel".into(),
        ));
    }
    let mismatches = generated
        .pixels
        .iter()
        .zip(&target.pixels)
        .filter(|(a, b)| a != b)
        .count();
    Ok((1.0 - mismatches as f64 / target_mass as f64).max(0.0))
}

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a digest of the byte string `height (u32 LE) || width (u32 LE)
/// || one byte (0 or 1) per pixel, row-major`, seeded with the standard FNV
/// offset basis.
pub fn shape_hash(shape: &FlowShape) -> u64 {
    let mut h = FNV_OFFSET_BASIS;
    let mut feed = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    };
    for b in (shape.grid.height as u32).to_le_bytes() {
        feed(b);
    }
    for b in (shape.grid.width as u32).to_le_bytes() {
        feed(b);
    }
    for &p in &shape.pixels {
        feed(p);
    }
    h
}
