//! Self-describing JSON checkpoints.
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "metadata": { "architecture": {...}, "grid": {"height", "width"}, "seed",
//!                 "global_step", "gradient_steps", "episodes",
//!                 "library_provenance", "lineage": [...] },
//!   "parameters": [ {"name", "shape", "values"} ... ],
//!   "buffers":    [ batch-norm running statistics, same entry layout ],
//!   "optimizer":  [ RMSProp squared-gradient averages, same entry layout ]
//! }
//! ```
//!
//! Values are 64-bit floats written in shortest round-trip form, so a
//! save/load cycle reproduces every tensor bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{NetworkArchitecture, QNetworkParams, Tensor};
use super::optim::RmsPropState;
use crate::error::{Error, Result};
use crate::flow::{GridSpec, Provenance};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// One training stage that contributed to a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub stage: usize,
    /// Hex `shape_hash` of the stage's target.
    pub target_hash: String,
    pub episodes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub architecture: NetworkArchitecture,
    pub grid: GridSpec,
    pub seed: u64,
    pub global_step: u64,
    pub gradient_steps: u64,
    pub episodes: usize,
    pub library_provenance: Provenance,
    #[serde(default)]
    pub lineage: Vec<LineageEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub metadata: CheckpointMetadata,
    pub parameters: Vec<Tensor>,
    pub buffers: Vec<Tensor>,
    pub optimizer: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(params: &QNetworkParams, optimizer: &RmsPropState, metadata: CheckpointMetadata) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            metadata,
            parameters: params.tensors().to_vec(),
            buffers: params.buffers().to_vec(),
            optimizer: optimizer.second_moments.clone(),
        }
    }

    pub fn network(&self) -> Result<QNetworkParams> {
        QNetworkParams::from_tensors(
            &self.metadata.architecture,
            self.parameters.clone(),
            self.buffers.clone(),
        )
    }

    pub fn optimizer_state(&self) -> Result<RmsPropState> {
        let state = RmsPropState {
            second_moments: self.optimizer.clone(),
        };
        state
            .check_matches(&self.network()?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(state)
    }

    /// Checks version, internal consistency, and that every tensor fits the
    /// recorded architecture.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.metadata.grid != self.metadata.architecture.input {
            return Err(Error::Checkpoint(format!(
                "grid {} disagrees with architecture input {}",
                self.metadata.grid, self.metadata.architecture.input
            )));
        }
        self.optimizer_state()?;
        Ok(())
    }

    /// Fails unless the checkpoint was produced for `arch`.
    pub fn expect_architecture(&self, arch: &NetworkArchitecture) -> Result<()> {
        if &self.metadata.architecture != arch {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture {:?} on grid {} does not match requested {:?} on grid {}",
                self.metadata.architecture.layers, self.metadata.grid, arch.layers, arch.input
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &QNetworkParams,
    optimizer: &RmsPropState,
    metadata: CheckpointMetadata,
) -> Result<()> {
    Checkpoint::new(params, optimizer, metadata).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(QNetworkParams, RmsPropState, CheckpointMetadata)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.network()?, ck.optimizer_state()?, ck.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::network::LayerSpec;
    use crate::flow::default_inlet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (QNetworkParams, RmsPropState, CheckpointMetadata) {
        let arch = NetworkArchitecture::fully_connected(GridSpec::DEFAULT, 32);
        let params = QNetworkParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut opt = RmsPropState::new(&params);
        opt.second_moments[0].values[7] = 1.0 / 3.0;
        let meta = CheckpointMetadata {
            architecture: arch,
            grid: GridSpec::DEFAULT,
            seed: 2,
            global_step: 10,
            gradient_steps: 3,
            episodes: 1,
            library_provenance: Provenance::Surrogate,
            lineage: vec![],
        };
        (params, opt, meta)
    }

    #[test]
    fn save_load_round_trip() {
        let (params, opt, meta) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&path, &params, &opt, meta.clone()).unwrap();
        let (p2, o2, m2) = load_checkpoint(&path).unwrap();
        assert_eq!(p2, params);
        assert_eq!(o2, opt);
        assert_eq!(m2, meta);
        let probe = default_inlet(GridSpec::DEFAULT);
        assert_eq!(params.forward(&probe).unwrap(), p2.forward(&probe).unwrap());
        let first = std::fs::read(&path).unwrap();
        Checkpoint::new(&p2, &o2, m2).save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let (params, opt, meta) = sample();
        let ck = Checkpoint::new(&params, &opt, meta);
        let other = NetworkArchitecture::new(
            GridSpec::DEFAULT,
            vec![LayerSpec::Flatten, LayerSpec::FullyConnected { units: 32 }],
            32,
        )
        .unwrap();
        assert!(matches!(ck.expect_architecture(&other), Err(Error::Checkpoint(_))));

        let mut tampered = ck.clone();
        tampered.metadata.architecture = other;
        tampered.metadata.grid = GridSpec::DEFAULT;
        let text = tampered.to_json().unwrap();
        assert!(matches!(Checkpoint::from_json(&text), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let (params, opt, meta) = sample();
        let mut ck = Checkpoint::new(&params, &opt, meta);
        ck.format_version = 99;
        assert!(matches!(
            Checkpoint::from_json(&ck.to_json().unwrap()),
            Err(Error::Checkpoint(_))
        ));
    }
}
