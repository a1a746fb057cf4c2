//! Training runs: episode loop, metrics, evaluation and warm-started stages.
//!
//! A run directory written by [`RunArtifacts::write_dir`] holds:
//!
//! | file                | contents                                                       |
//! |---------------------|----------------------------------------------------------------|
//! | `config.json`       | fully resolved [`TrainConfig`]                                 |
//! | `target.json`       | goal shape as a shape document                                 |
//! | `episodes.csv`      | `episode,reward,length,success,pmr,sequence`                   |
//! | `windows.csv`       | `window,start,end,episodes,successes,frequency,complete`       |
//! | `evaluations.csv`   | `episode,success,pmr,length,sequence`                          |
//! | `unique_states.csv` | `episode,unique_states` (cumulative distinct shapes)           |
//! | `solutions.csv`     | `rank,sequence,frequency,first_seen`                           |
//! | `counters.json`     | step, gradient-step and target-sync counters                   |
//! | `checkpoint.json`   | final agent checkpoint                                         |
//!
//! Sequences inside the tables are space-separated action ids. `start` and
//! `end` are 0-based, end-exclusive episode indices.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::network::fully_connected_layers;
use crate::agent::{
    argmax, AgentConfig, Checkpoint, CheckpointMetadata, DqnAgent, EpsilonSchedule, LayerSpec, LineageEntry,
    NetworkArchitecture, QNetworkParams, Transition,
};
use crate::docs::{read_library, write_shape};
use crate::env::{reset_shared, step, EnvConfig, RewardScale};
use crate::error::{Error, Result};
use crate::flow::{
    apply_pillar, make_inlet, shape_hash, FlowShape, GridSpec, PillarLibrary, PillarSequence, DEFAULT_INLET,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LibrarySource {
    Surrogate,
    File { path: PathBuf },
}

/// Inlet stripe as fractions of the channel width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InletSpec {
    pub lo: f64,
    pub hi: f64,
}

impl Default for InletSpec {
    fn default() -> Self {
        InletSpec {
            lo: DEFAULT_INLET.0,
            hi: DEFAULT_INLET.1,
        }
    }
}

/// Serializable environment description; [`EnvSettings::build`] resolves it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSettings {
    pub grid: GridSpec,
    pub library: LibrarySource,
    pub max_steps: usize,
    pub pmr_threshold: f64,
    pub baseline: f64,
    pub reward_scale: RewardScale,
    pub inlet: InletSpec,
}

impl Default for EnvSettings {
    fn default() -> Self {
        EnvSettings {
            grid: GridSpec::DEFAULT,
            library: LibrarySource::Surrogate,
            max_steps: EnvConfig::DEFAULT_MAX_STEPS,
            pmr_threshold: EnvConfig::DEFAULT_THRESHOLD,
            baseline: EnvConfig::DEFAULT_BASELINE,
            reward_scale: RewardScale::Baseline,
            inlet: InletSpec::default(),
        }
    }
}

impl EnvSettings {
    pub fn build(&self) -> Result<EnvConfig> {
        let library = match &self.library {
            LibrarySource::Surrogate => PillarLibrary::surrogate(GridSpec::new(self.grid.height, self.grid.width)?),
            LibrarySource::File { path } => {
                let lib = read_library(path)?;
                if lib.grid() != self.grid {
                    return Err(Error::Config(format!(
                        "library {} has grid {}, settings ask for {}",
                        path.display(),
                        lib.grid(),
                        self.grid
                    )));
                }
                lib
            }
        };
        self.build_with(Arc::new(library))
    }

    /// Builds the environment around an already loaded library.
    pub fn build_with(&self, library: Arc<PillarLibrary>) -> Result<EnvConfig> {
        let inlet = make_inlet(library.grid(), self.inlet.lo, self.inlet.hi)?;
        let env = EnvConfig {
            library,
            max_steps: self.max_steps,
            pmr_threshold: self.pmr_threshold,
            baseline: self.baseline,
            reward_scale: self.reward_scale,
            inlet,
        };
        env.validate()?;
        Ok(env)
    }
}

/// How warm-started stages explore and what they keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferPolicy {
    /// Epsilon a warm-started stage restarts from; the slope is kept.
    pub epsilon_restart: f64,
    pub retain_replay: bool,
    pub warmup_random_steps: u64,
}

impl Default for TransferPolicy {
    fn default() -> Self {
        TransferPolicy {
            epsilon_restart: 0.3,
            retain_replay: false,
            warmup_random_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub seed: u64,
    pub env: EnvSettings,
    pub agent: AgentConfig,
    pub schedule: EpsilonSchedule,
    /// Hidden layers; the input grid and the action count come from `env`.
    pub network: Vec<LayerSpec>,
    /// Greedy evaluation period in episodes; 0 disables it.
    pub eval_every: usize,
    pub success_window: usize,
    pub transfer: TransferPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    pub const FULL_SCALE_EPISODES: usize = 300_000;

    /// Full-scale protocol: 300K episodes, 10K random steps, epsilon decay
    /// over 1M steps, target sync every 4000 gradient steps.
    pub fn full_scale() -> Self {
        TrainConfig {
            episodes: Self::FULL_SCALE_EPISODES,
            seed: 0,
            env: EnvSettings::default(),
            agent: AgentConfig::default(),
            schedule: EpsilonSchedule::default(),
            network: fully_connected_layers(crate::flow::NUM_ACTIONS),
            eval_every: 0,
            success_window: 1000,
            transfer: TransferPolicy::default(),
        }
    }

    /// The full-scale protocol with episodes, warm-up, decay and sync
    /// interval all multiplied by `factor`.
    pub fn scaled(factor: f64) -> Self {
        let mut cfg = TrainConfig::full_scale();
        let scale = |v: f64| ((v * factor).round() as u64).max(1);
        cfg.episodes = scale(cfg.episodes as f64) as usize;
        cfg.agent.warmup_random_steps = scale(cfg.agent.warmup_random_steps as f64);
        cfg.agent.target_update_interval = scale(cfg.agent.target_update_interval as f64);
        cfg.schedule.decay_steps = scale(cfg.schedule.decay_steps as f64);
        cfg
    }

    /// One sixth of the full-scale protocol: 50K episodes.
    pub fn desk() -> Self {
        TrainConfig::scaled(1.0 / 6.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.success_window == 0 {
            return Err(Error::Config("success_window must be positive".into()));
        }
        if !(self.transfer.epsilon_restart >= 0.0 && self.transfer.epsilon_restart <= 1.0) {
            return Err(Error::Config("transfer.epsilon_restart must lie in [0, 1]".into()));
        }
        self.agent.validate()?;
        self.schedule.validate()
    }

    pub fn architecture(&self, env: &EnvConfig) -> Result<NetworkArchitecture> {
        NetworkArchitecture::new(env.library.grid(), self.network.clone(), env.num_actions())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub index: usize,
    pub reward: f64,
    pub length: usize,
    pub success: bool,
    pub pmr: f64,
    pub actions: PillarSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowStat {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub successes: usize,
    pub frequency: f64,
    /// False for a trailing window shorter than the configured size.
    pub complete: bool,
}

/// Splits the logs into consecutive windows of `size` episodes.
pub fn success_windows(logs: &[EpisodeLog], size: usize) -> Vec<WindowStat> {
    logs.chunks(size.max(1))
        .enumerate()
        .map(|(k, chunk)| {
            let successes = chunk.iter().filter(|l| l.success).count();
            WindowStat {
                index: k,
                start: k * size,
                end: k * size + chunk.len(),
                successes,
                frequency: successes as f64 / chunk.len() as f64,
                complete: chunk.len() == size,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionEntry {
    pub sequence: PillarSequence,
    pub frequency: u64,
    /// Episode index of the first visit.
    pub first_seen: usize,
}

/// Visit counts of the action sequences that ended in success.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SolutionTable {
    entries: BTreeMap<PillarSequence, (u64, usize)>,
}

impl SolutionTable {
    pub fn new() -> Self {
        SolutionTable::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frequency(&self, seq: &PillarSequence) -> u64 {
        self.entries.get(seq).map_or(0, |e| e.0)
    }

    pub fn total(&self) -> u64 {
        self.entries.values().map(|e| e.0).sum()
    }

    /// Most frequent first; equal counts keep first-seen order.
    pub fn top_k(&self, k: usize) -> Vec<SolutionEntry> {
        let mut all: Vec<SolutionEntry> = self
            .entries
            .iter()
            .map(|(s, &(frequency, first_seen))| SolutionEntry {
                sequence: s.clone(),
                frequency,
                first_seen,
            })
            .collect();
        all.sort_by(|a, b| b.frequency.cmp(&a.frequency).then(a.first_seen.cmp(&b.first_seen)));
        all.truncate(k);
        all
    }
}

pub fn record_solution(table: &mut SolutionTable, log: &EpisodeLog) -> Result<()> {
    if !log.success {
        return Err(Error::Usage(format!(
            "episode {} did not succeed and cannot be recorded as a solution",
            log.index
        )));
    }
    table
        .entries
        .entry(log.actions.clone())
        .and_modify(|e| e.0 += 1)
        .or_insert((1, log.index));
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    pub global_steps: u64,
    pub gradient_steps: u64,
    pub target_syncs: u64,
    pub warmup_random_steps: u64,
    /// Global step at which the first gradient step ran.
    pub first_gradient_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub episode: usize,
    pub success: bool,
    pub pmr: f64,
    pub length: usize,
    pub sequence: PillarSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub config: TrainConfig,
    pub stage: usize,
    pub target: FlowShape,
    pub episodes: Vec<EpisodeLog>,
    pub windows: Vec<WindowStat>,
    pub evaluations: Vec<EvalRecord>,
    pub unique_states: Vec<usize>,
    pub solutions: SolutionTable,
    pub counters: RunCounters,
    pub checkpoint: Checkpoint,
}

impl RunArtifacts {
    /// Index of the first complete window with frequency at least `level`.
    pub fn first_window_reaching(&self, level: f64) -> Option<usize> {
        self.windows
            .iter()
            .find(|w| w.complete && w.frequency >= level)
            .map(|w| w.index)
    }

    /// Episodes consumed up to the end of the first window reaching `level`.
    pub fn episodes_to_reach(&self, level: f64) -> Option<usize> {
        self.first_window_reaching(level).map(|k| self.windows[k].end)
    }

    pub fn final_window_frequency(&self) -> Option<f64> {
        self.windows.iter().rev().find(|w| w.complete).map(|w| w.frequency)
    }

    pub fn total_unique_states(&self) -> usize {
        self.unique_states.last().copied().unwrap_or(0)
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(path, e))
        };
        put("config.json", pretty(&self.config)?)?;
        write_shape(dir.join("target.json"), &self.target)?;

        let mut w = csv_writer(&["episode", "reward", "length", "success", "pmr", "sequence"]);
        for l in &self.episodes {
            w.write_record([
                l.index.to_string(),
                l.reward.to_string(),
                l.length.to_string(),
                (l.success as u8).to_string(),
                l.pmr.to_string(),
                spaced(&l.actions),
            ])?;
        }
        put("episodes.csv", finish(w)?)?;

        let mut w = csv_writer(&[
            "window",
            "start",
            "end",
            "episodes",
            "successes",
            "frequency",
            "complete",
        ]);
        for s in &self.windows {
            w.write_record([
                s.index.to_string(),
                s.start.to_string(),
                s.end.to_string(),
                (s.end - s.start).to_string(),
                s.successes.to_string(),
                s.frequency.to_string(),
                (s.complete as u8).to_string(),
            ])?;
        }
        put("windows.csv", finish(w)?)?;

        let mut w = csv_writer(&["episode", "success", "pmr", "length", "sequence"]);
        for e in &self.evaluations {
            w.write_record([
                e.episode.to_string(),
                (e.success as u8).to_string(),
                e.pmr.to_string(),
                e.length.to_string(),
                spaced(&e.sequence),
            ])?;
        }
        put("evaluations.csv", finish(w)?)?;

        let mut w = csv_writer(&["episode", "unique_states"]);
        for (k, n) in self.unique_states.iter().enumerate() {
            w.write_record([k.to_string(), n.to_string()])?;
        }
        put("unique_states.csv", finish(w)?)?;

        let mut w = csv_writer(&["rank", "sequence", "frequency", "first_seen"]);
        for (rank, e) in self.solutions.top_k(usize::MAX).iter().enumerate() {
            w.write_record([
                (rank + 1).to_string(),
                spaced(&e.sequence),
                e.frequency.to_string(),
                e.first_seen.to_string(),
            ])?;
        }
        put("solutions.csv", finish(w)?)?;

        put("counters.json", pretty(&self.counters)?)?;
        self.checkpoint.save(dir.join("checkpoint.json"))
    }
}

fn pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn spaced(seq: &PillarSequence) -> String {
    seq.actions()
        .iter()
        .map(|a| a.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn csv_writer(header: &[&str]) -> csv::Writer<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("writing to memory");
    w
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Greedy rollout summary. The greedy policy is deterministic, so every
/// requested episode repeats the same trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_pmr: f64,
    pub mean_length: f64,
    pub best_sequence: PillarSequence,
    pub best_pmr: f64,
    pub note: String,
}

/// One greedy episode from the inlet.
pub fn greedy_rollout(params: &QNetworkParams, env: &EnvConfig, target: &FlowShape) -> Result<EvalRecord> {
    check_network_fits(params.architecture(), env)?;
    let target = Arc::new(target.clone());
    let mut state = reset_shared(env, target)?;
    let mut pmr = 0.0;
    while !state.done {
        let action = argmax(&params.forward(&state.current)?);
        let (next, r) = step(&state, action, env)?;
        pmr = r.pmr;
        state = next;
    }
    Ok(EvalRecord {
        episode: 0,
        success: state.success,
        pmr,
        length: state.steps_taken,
        sequence: state.action_history,
    })
}

pub fn evaluate(
    params: &QNetworkParams,
    env: &EnvConfig,
    target: &FlowShape,
    n_episodes: usize,
) -> Result<EvalSummary> {
    if n_episodes == 0 {
        return Err(Error::Parameter("evaluation needs at least one episode".into()));
    }
    let r = greedy_rollout(params, env, target)?;
    Ok(EvalSummary {
        episodes: n_episodes,
        success_rate: if r.success { 1.0 } else { 0.0 },
        mean_pmr: r.pmr,
        mean_length: r.length as f64,
        best_sequence: r.sequence,
        best_pmr: r.pmr,
        note: format!("greedy policy is deterministic; the {n_episodes} episodes are identical and reported once"),
    })
}

pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    env: &EnvConfig,
    target: &FlowShape,
    n_episodes: usize,
) -> Result<EvalSummary> {
    evaluate(&ck.network()?, env, target, n_episodes)
}

fn check_network_fits(arch: &NetworkArchitecture, env: &EnvConfig) -> Result<()> {
    if arch.input != env.library.grid() || arch.output_units != env.num_actions() {
        return Err(Error::Checkpoint(format!(
            "network expects grid {} with {} actions, environment has grid {} with {}",
            arch.input,
            arch.output_units,
            env.library.grid(),
            env.num_actions()
        )));
    }
    Ok(())
}

/// Cumulative number of distinct shapes (by hash) visited after each episode,
/// counting the inlet.
pub fn unique_states(logs: &[EpisodeLog], library: &PillarLibrary, inlet: &FlowShape) -> Result<Vec<usize>> {
    let mut seen = HashSet::new();
    seen.insert(shape_hash(inlet));
    let mut out = Vec::with_capacity(logs.len());
    for log in logs {
        let mut s = inlet.clone();
        for &a in log.actions.actions() {
            s = apply_pillar(&s, library.map(a)?)?;
            seen.insert(shape_hash(&s));
        }
        out.push(seen.len());
    }
    Ok(out)
}

/// Samples `count` distinct targets, each produced by a uniform random
/// sequence of `length` pillars applied to `inlet`.
pub fn make_targets<R: Rng + ?Sized>(
    library: &PillarLibrary,
    inlet: &FlowShape,
    rng: &mut R,
    count: usize,
    length: usize,
) -> Result<Vec<(PillarSequence, FlowShape)>> {
    if length == 0 {
        return Err(Error::Parameter("target sequence length must be at least 1".into()));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let budget = count.saturating_mul(1000).max(1000);
    for _ in 0..budget {
        if out.len() == count {
            break;
        }
        let seq = PillarSequence::new((0..length).map(|_| rng.gen_range(0..library.num_actions())).collect());
        let mut s = inlet.clone();
        for &a in seq.actions() {
            s = apply_pillar(&s, library.map(a)?)?;
        }
        if s.count_on() > 0 && seen.insert(shape_hash(&s)) {
            out.push((seq, s));
        }
    }
    if out.len() < count {
        return Err(Error::Parameter(format!(
            "only {} distinct targets of length {length} found after {budget} draws",
            out.len()
        )));
    }
    Ok(out)
}

/// A run that stopped on an error, with everything logged before it.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub episode: usize,
    pub global_step: u64,
    pub episodes: Vec<EpisodeLog>,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    error: String,
    episode: usize,
    global_step: u64,
    config: &'a TrainConfig,
}

impl TrainFailure {
    /// Writes `diagnostic.json` and the partial episode table to `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>, cfg: &TrainConfig) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let diag = Diagnostic {
            error: self.error.to_string(),
            episode: self.episode,
            global_step: self.global_step,
            config: cfg,
        };
        let path = dir.join("diagnostic.json");
        fs::write(&path, pretty(&diag)?).map_err(|e| Error::io(path, e))?;
        let mut w = csv_writer(&["episode", "reward", "length", "success", "pmr", "sequence"]);
        for l in &self.episodes {
            w.write_record([
                l.index.to_string(),
                l.reward.to_string(),
                l.length.to_string(),
                (l.success as u8).to_string(),
                l.pmr.to_string(),
                spaced(&l.actions),
            ])?;
        }
        let path = dir.join("episodes.csv");
        fs::write(&path, finish(w)?).map_err(|e| Error::io(path, e))
    }
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        TrainFailure {
            error,
            episode: 0,
            global_step: 0,
            episodes: Vec::new(),
        }
    }
}

/// Where a stage's agent comes from.
enum Start {
    Scratch,
    Checkpoint(Checkpoint),
    Agent(Box<DqnAgent>, CheckpointMetadata),
}

/// Trains an agent on a fixed target. With `init`, the run is warm-started
/// under the transfer policy.
pub fn train(cfg: &TrainConfig, target: &FlowShape, init: Option<&Checkpoint>) -> Result<RunArtifacts> {
    let env = cfg.env.build()?;
    train_with_env(cfg, &env, target, init)
}

pub fn train_with_env(
    cfg: &TrainConfig,
    env: &EnvConfig,
    target: &FlowShape,
    init: Option<&Checkpoint>,
) -> Result<RunArtifacts> {
    train_detailed(cfg, env, target, init).map_err(|f| f.error)
}

/// Like [`train_with_env`] but keeps the partial log on failure.
pub fn train_detailed(
    cfg: &TrainConfig,
    env: &EnvConfig,
    target: &FlowShape,
    init: Option<&Checkpoint>,
) -> Result<RunArtifacts, TrainFailure> {
    let start = match init {
        Some(ck) => Start::Checkpoint(ck.clone()),
        None => Start::Scratch,
    };
    run_stage(cfg, env, target, start, 0).map(|(artifacts, _)| artifacts)
}

/// Trains and writes the run directory; on failure writes the diagnostic
/// dump there instead and returns the error.
pub fn train_in_dir(
    cfg: &TrainConfig,
    env: &EnvConfig,
    target: &FlowShape,
    init: Option<&Checkpoint>,
    dir: impl AsRef<Path>,
) -> Result<RunArtifacts> {
    match train_detailed(cfg, env, target, init) {
        Ok(a) => {
            a.write_dir(dir)?;
            Ok(a)
        }
        Err(f) => {
            f.write_dir(dir, cfg)?;
            Err(f.error)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumStage {
    pub target: FlowShape,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumSpec {
    pub stages: Vec<CurriculumStage>,
    pub initial: Option<Checkpoint>,
}

/// Trains the stages in order, each starting from the previous stage's
/// agent. Per-stage episode budgets override `cfg.episodes`.
pub fn transfer_train(curriculum: &CurriculumSpec, cfg: &TrainConfig) -> Result<Vec<RunArtifacts>> {
    let env = cfg.env.build()?;
    transfer_train_with_env(curriculum, cfg, &env)
}

pub fn transfer_train_with_env(
    curriculum: &CurriculumSpec,
    cfg: &TrainConfig,
    env: &EnvConfig,
) -> Result<Vec<RunArtifacts>> {
    if curriculum.stages.is_empty() {
        return Err(Error::Config("curriculum has no stages".into()));
    }
    if let Some(s) = curriculum.stages.iter().position(|s| s.episodes == 0) {
        return Err(Error::Config(format!("curriculum stage {s} has a zero episode budget")));
    }
    let mut start = match &curriculum.initial {
        Some(ck) => Start::Checkpoint(ck.clone()),
        None => Start::Scratch,
    };
    let mut out = Vec::with_capacity(curriculum.stages.len());
    for (k, stage) in curriculum.stages.iter().enumerate() {
        let mut stage_cfg = cfg.clone();
        stage_cfg.episodes = stage.episodes;
        let (artifacts, agent) = run_stage(&stage_cfg, env, &stage.target, start, k).map_err(|f| f.error)?;
        start = Start::Agent(Box::new(agent), artifacts.checkpoint.metadata.clone());
        out.push(artifacts);
    }
    Ok(out)
}

fn run_stage(
    cfg: &TrainConfig,
    env: &EnvConfig,
    target: &FlowShape,
    start: Start,
    stage: usize,
) -> Result<(RunArtifacts, DqnAgent), TrainFailure> {
    cfg.validate()?;
    env.library
        .grid()
        .check_same(&target.grid(), "target vs library")
        .map_err(|e| Error::Config(e.to_string()))?;
    let arch = cfg.architecture(env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (mut agent, prior, warm) = match start {
        Start::Scratch => (DqnAgent::new(&arch, cfg.agent.clone(), &mut rng)?, None, false),
        Start::Checkpoint(ck) => {
            ck.expect_architecture(&arch)?;
            let agent = DqnAgent::from_parts(ck.network()?, ck.optimizer_state()?, cfg.agent.clone())?;
            (agent, Some(ck.metadata), true)
        }
        Start::Agent(prev, meta) => {
            let mut agent = DqnAgent::from_parts(prev.online().clone(), prev.optimizer().clone(), cfg.agent.clone())?;
            if cfg.transfer.retain_replay {
                for t in prev.replay().iter() {
                    agent.remember(t.clone());
                }
            }
            (agent, Some(meta), true)
        }
    };
    let (schedule, warmup) = if warm {
        (
            cfg.schedule.restarted(cfg.transfer.epsilon_restart),
            cfg.transfer.warmup_random_steps,
        )
    } else {
        (cfg.schedule, cfg.agent.warmup_random_steps)
    };

    let target = Arc::new(target.clone());
    // Checks the target before any work so an empty goal fails fast.
    reset_shared(env, Arc::clone(&target))?;
    let num_actions = env.num_actions();
    let mut logs = Vec::with_capacity(cfg.episodes);
    let mut solutions = SolutionTable::new();
    let mut evaluations = Vec::new();
    let mut global_step = 0u64;
    let mut first_gradient_step = None;

    for episode in 0..cfg.episodes {
        let fail = |error: Error, logs: Vec<EpisodeLog>, global_step| TrainFailure {
            error,
            episode,
            global_step,
            episodes: logs,
        };
        let mut state = match reset_shared(env, Arc::clone(&target)) {
            Ok(s) => s,
            Err(e) => return Err(fail(e, logs, global_step)),
        };
        let mut total = 0.0;
        let mut last_pmr = 0.0;
        while !state.done {
            let action = if global_step < warmup {
                rng.gen_range(0..num_actions)
            } else {
                match agent.act(&state.current, schedule.epsilon_at(global_step), &mut rng) {
                    Ok(a) => a,
                    Err(e) => return Err(fail(e, logs, global_step)),
                }
            };
            let (next, r) = match step(&state, action, env) {
                Ok(x) => x,
                Err(e) => return Err(fail(e, logs, global_step)),
            };
            agent.remember(Transition {
                state: state.current,
                action,
                reward: r.reward,
                next_state: r.observation,
                done: r.done,
            });
            if global_step >= warmup && agent.can_learn() {
                if let Err(e) = agent.learn(&mut rng) {
                    return Err(fail(e, logs, global_step));
                }
                first_gradient_step.get_or_insert(global_step);
            }
            global_step += 1;
            total += r.reward;
            last_pmr = r.pmr;
            state = next;
        }
        let log = EpisodeLog {
            index: episode,
            reward: total,
            length: state.steps_taken,
            success: state.success,
            pmr: last_pmr,
            actions: state.action_history,
        };
        if log.success {
            record_solution(&mut solutions, &log)?;
        }
        logs.push(log);
        if cfg.eval_every > 0 && (episode + 1) % cfg.eval_every == 0 {
            let mut rec =
                greedy_rollout(agent.online(), env, &target).map_err(|e| fail(e, logs.clone(), global_step))?;
            rec.episode = episode + 1;
            evaluations.push(rec);
        }
    }

    let unique = unique_states(&logs, &env.library, &env.inlet)?;
    let (mut lineage, base_steps, base_grad, base_eps) = match &prior {
        Some(m) => (m.lineage.clone(), m.global_step, m.gradient_steps, m.episodes),
        None => (Vec::new(), 0, 0, 0),
    };
    lineage.push(LineageEntry {
        stage,
        target_hash: format!("{:016x}", shape_hash(&target)),
        episodes: cfg.episodes,
        seed: cfg.seed,
    });
    let metadata = CheckpointMetadata {
        architecture: arch,
        grid: env.library.grid(),
        seed: cfg.seed,
        global_step: base_steps + global_step,
        gradient_steps: base_grad + agent.gradient_steps(),
        episodes: base_eps + cfg.episodes,
        library_provenance: env.library.provenance(),
        lineage,
    };
    let checkpoint = Checkpoint::new(agent.online(), agent.optimizer(), metadata);
    let mut resolved = cfg.clone();
    resolved.agent.warmup_random_steps = warmup;
    resolved.schedule = schedule;
    let artifacts = RunArtifacts {
        windows: success_windows(&logs, cfg.success_window),
        config: resolved,
        stage,
        target: (*target).clone(),
        episodes: logs,
        evaluations,
        unique_states: unique,
        solutions,
        counters: RunCounters {
            global_steps: global_step,
            gradient_steps: agent.gradient_steps(),
            target_syncs: agent.target_syncs(),
            warmup_random_steps: warmup,
            first_gradient_step,
        },
        checkpoint,
    };
    Ok((artifacts, agent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{default_inlet, AdvectionMap, Provenance};

    fn log(index: usize, actions: &[usize], success: bool) -> EpisodeLog {
        EpisodeLog {
            index,
            reward: -1.0,
            length: actions.len(),
            success,
            pmr: if success { 1.0 } else { 0.0 },
            actions: PillarSequence::new(actions.to_vec()),
        }
    }

    #[test]
    fn desk_preset_scales_the_schedule() {
        let d = TrainConfig::desk();
        assert_eq!(d.episodes, 50_000);
        assert_eq!(d.agent.warmup_random_steps, 1667);
        assert_eq!(d.schedule.decay_steps, 166_667);
        assert_eq!(d.agent.target_update_interval, 667);
        let p = TrainConfig::full_scale();
        assert_eq!((p.episodes, p.agent.warmup_random_steps), (300_000, 10_000));
    }

    #[test]
    fn config_json_round_trip_and_partial_documents() {
        let cfg = TrainConfig::desk();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"episodes": 10, "agent": {"batch_size": 8}}"#).unwrap();
        assert_eq!(partial.episodes, 10);
        assert_eq!(partial.agent.batch_size, 8);
        assert_eq!(partial.agent.gamma, 0.99);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"episode": 10}"#).is_err());
    }

    #[test]
    fn solution_table_counts_and_orders() {
        let mut t = SolutionTable::new();
        record_solution(&mut t, &log(0, &[3, 4], true)).unwrap();
        record_solution(&mut t, &log(1, &[30, 30, 24], true)).unwrap();
        record_solution(&mut t, &log(2, &[30, 30, 24], true)).unwrap();
        record_solution(&mut t, &log(3, &[1], true)).unwrap();
        assert!(record_solution(&mut t, &log(4, &[5], false)).is_err());
        assert_eq!(t.frequency(&PillarSequence::new(vec![30, 30, 24])), 2);
        let top: Vec<_> = t
            .top_k(3)
            .into_iter()
            .map(|e| (e.sequence.to_string(), e.frequency))
            .collect();
        assert_eq!(
            top,
            vec![
                ("30, 30, 24".to_string(), 2),
                ("3, 4".to_string(), 1),
                ("1".to_string(), 1)
            ]
        );
        assert_eq!(t.total(), 4);
    }

    #[test]
    fn windows_partition_the_episodes() {
        let logs: Vec<_> = (0..25).map(|i| log(i, &[0], i % 3 == 0)).collect();
        let w = success_windows(&logs, 10);
        assert_eq!(w.len(), 3);
        assert_eq!((w[2].start, w[2].end, w[2].complete), (20, 25, false));
        assert_eq!(w.iter().map(|s| s.successes).sum::<usize>(), 9);
        assert_eq!(w[0].frequency, 0.4);
    }

    #[test]
    fn unique_state_counts() {
        let lib = PillarLibrary::surrogate(GridSpec::DEFAULT);
        let inlet = default_inlet(GridSpec::DEFAULT);
        assert_eq!(unique_states(&[log(0, &[17], false)], &lib, &inlet).unwrap(), vec![2]);
        let twice = unique_states(&[log(0, &[17, 3], false), log(1, &[17, 3], false)], &lib, &inlet).unwrap();
        assert_eq!(twice, vec![3, 3]);
    }

    #[test]
    fn make_targets_is_seeded_and_distinct() {
        let lib = PillarLibrary::surrogate(GridSpec::DEFAULT);
        let inlet = default_inlet(GridSpec::DEFAULT);
        let a = make_targets(&lib, &inlet, &mut ChaCha8Rng::seed_from_u64(4), 1, 1).unwrap();
        let b = make_targets(&lib, &inlet, &mut ChaCha8Rng::seed_from_u64(4), 1, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].0.len(), 1);
        let many = make_targets(&lib, &inlet, &mut ChaCha8Rng::seed_from_u64(5), 40, 3).unwrap();
        let hashes: HashSet<_> = many.iter().map(|(_, s)| shape_hash(s)).collect();
        assert_eq!(hashes.len(), 40);
        assert!(make_targets(&lib, &inlet, &mut ChaCha8Rng::seed_from_u64(5), 1, 0).is_err());
    }

    #[test]
    fn zero_episodes_gives_initial_checkpoint_only() {
        let mut cfg = TrainConfig::desk();
        cfg.episodes = 0;
        cfg.seed = 9;
        let target = default_inlet(GridSpec::DEFAULT);
        let a = train(&cfg, &target, None).unwrap();
        assert!(a.episodes.is_empty() && a.windows.is_empty());
        assert_eq!(
            a.counters,
            RunCounters {
                warmup_random_steps: 1667,
                ..RunCounters::default()
            }
        );
        let arch = cfg.architecture(&cfg.env.build().unwrap()).unwrap();
        let fresh = QNetworkParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.checkpoint.network().unwrap(), fresh);
    }

    #[test]
    fn untrained_zero_network_evaluates_to_action_zero() {
        let env = EnvSettings::default().build().unwrap();
        let arch = NetworkArchitecture::fully_connected(GridSpec::DEFAULT, 32);
        let net = QNetworkParams::zeros(&arch).unwrap();
        let target = FlowShape::from_fn(GridSpec::DEFAULT, |_, j| j < 3);
        let s = evaluate(&net, &env, &target, 5).unwrap();
        assert!(s.best_sequence.actions().iter().all(|&a| a == 0));
        assert_eq!(s.best_sequence.len(), 7);
        assert_eq!(s.episodes, 5);
    }

    #[test]
    fn evaluation_rejects_a_foreign_grid() {
        let env = EnvSettings::default().build().unwrap();
        let arch = NetworkArchitecture::fully_connected(GridSpec::new(4, 8).unwrap(), 32);
        let net = QNetworkParams::zeros(&arch).unwrap();
        let target = default_inlet(GridSpec::DEFAULT);
        assert!(matches!(evaluate(&net, &env, &target, 1), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn identity_library_degenerate_target_always_succeeds() {
        let grid = GridSpec::new(4, 8).unwrap();
        let maps = (0..4).map(|a| AdvectionMap::identity(grid, a)).collect();
        let lib = Arc::new(PillarLibrary::from_maps(grid, maps, Provenance::File).unwrap());
        let env = EnvSettings {
            grid,
            ..EnvSettings::default()
        }
        .build_with(lib)
        .unwrap();
        let mut cfg = TrainConfig::desk();
        cfg.episodes = 30;
        cfg.success_window = 10;
        cfg.agent.warmup_random_steps = 5;
        cfg.agent.batch_size = 4;
        cfg.network = fully_connected_layers(4);
        let a = train_with_env(&cfg, &env, &env.inlet.clone(), None).unwrap();
        assert!(a.episodes.iter().all(|l| l.success && l.length == 1));
        assert!(a.windows.iter().all(|w| w.frequency == 1.0));
        assert_eq!(a.total_unique_states(), 1);
    }
}
