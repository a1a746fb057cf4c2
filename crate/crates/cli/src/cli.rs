//! `flowsculpt` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use flowsculpt::agent::checkpoint::Checkpoint;
use flowsculpt::docs::{read_library, read_shape, write_library, write_shape, ShapeDocument};
use flowsculpt::env::EnvConfig;
use flowsculpt::flow::{final_shape, GridSpec, PillarLibrary, PillarSequence};
use flowsculpt::suggest::SuggestionRequest;
use flowsculpt::trainer::{
    evaluate_checkpoint, train_in_dir, transfer_train_with_env, CurriculumSpec, CurriculumStage, RunArtifacts,
    TrainConfig,
};
use flowsculpt::{Error, Result};
use serde::Deserialize;

use crate::api::{
    checkpoint_id, parse_document, simulate, suggest_with, to_document, CheckpointStore, InletField, LoadedCheckpoint,
    SequenceField, SimulateRequest,
};
use crate::service::{self, AppState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Environment variable naming the service's checkpoint directory.
pub const CHECKPOINT_DIR_VAR: &str = "FLOWSCULPT_CHECKPOINT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "flowsculpt",
    version,
    about = "Pillar-sequence design for inertial flow sculpting"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the 32-map surrogate library for a grid.
    GenLibrary {
        #[arg(long, default_value = "12x32")]
        grid: GridSpec,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a pillar sequence to an inlet and print every intermediate shape.
    Simulate(SimulateArgs),
    /// Train an agent on one target and write a run directory.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint on a target.
    Eval(EvalArgs),
    /// Train through a curriculum of targets, one run directory per stage.
    Transfer(TransferArgs),
    /// Rank candidate sequences for a target with a trained agent.
    Solve(SolveArgs),
    /// Serve the /api endpoints.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct LibraryArgs {
    /// Library document; the surrogate library is used when absent.
    #[arg(long)]
    pub library: Option<PathBuf>,
    /// Training config whose `env` section supplies library, inlet, step
    /// limit and threshold.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub lib: LibraryArgs,
    /// Comma-separated pillar ids, e.g. "22, 11, 31".
    #[arg(long, default_value = "", allow_hyphen_values = true)]
    pub sequence: String,
    /// `LO,HI` stripe fractions or a shape document path.
    #[arg(long)]
    pub inlet: Option<String>,
    /// Target shape; adds per-step PMR.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Write the document here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the final shape as a shape document.
    #[arg(long)]
    pub final_shape: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (JSON, missing fields take desk defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, group = "goal")]
    pub target: Option<PathBuf>,
    /// Build the target by applying this sequence to the inlet.
    #[arg(long, group = "goal")]
    pub target_sequence: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Warm-start from this checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub lib: LibraryArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub episodes: usize,
    /// Write the summary document here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Curriculum document: `{"stages": [{"target" | "target_file" |
    /// "target_sequence", "episodes"}], "initial": checkpoint path}`.
    #[arg(long)]
    pub curriculum: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub lib: LibraryArgs,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Write the response document here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the response document instead of the ranked table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub lib: LibraryArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, env = CHECKPOINT_DIR_VAR)]
    pub checkpoint_dir: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            }
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenLibrary { grid, out } => write_library(out, &PillarLibrary::surrogate(grid)),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let cfg: TrainConfig =
                parse_document(read_text(p)?.as_bytes()).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

/// Environment for the read-only commands. `grid_hint` picks the surrogate
/// grid when neither a library nor a config is given.
fn resolve_env(args: &LibraryArgs, grid_hint: Option<GridSpec>) -> Result<EnvConfig> {
    let mut settings = read_config(args.config.as_deref())?.env;
    if args.config.is_none() {
        if let Some(g) = grid_hint {
            settings.grid = g;
        }
    }
    match &args.library {
        Some(path) => settings.build_with(Arc::new(read_library(path)?)),
        None => settings.build(),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Format(format!("{}: {e}", p.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::Format(format!("stdout: {e}")))
        }
    }
}

/// `LO,HI` fractions, or else a shape document path.
pub fn parse_inlet(spec: &str) -> Result<InletField> {
    if let Some((lo, hi)) = spec.split_once(',') {
        if let (Ok(lo), Ok(hi)) = (lo.trim().parse::<f64>(), hi.trim().parse::<f64>()) {
            return Ok(InletField::Stripe(flowsculpt::trainer::InletSpec { lo, hi }));
        }
    }
    let path = Path::new(spec);
    if !path.is_file() {
        return Err(Error::Usage(format!(
            "--inlet '{spec}' is neither LO,HI nor a shape file"
        )));
    }
    Ok(InletField::Shape(ShapeDocument::from_shape(&read_shape(path)?)))
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let env = resolve_env(&a.lib, None)?;
    let req = SimulateRequest {
        sequence: SequenceField::Text(a.sequence.clone()),
        inlet: a.inlet.as_deref().map(parse_inlet).transpose()?,
        target: match &a.target {
            Some(p) => Some(ShapeDocument::from_shape(&read_shape(p)?)),
            None => None,
        },
    };
    let reply = simulate(&env, &req).map_err(|e| e.error)?;
    if let Some(p) = &a.final_shape {
        let last = reply.shapes.last().expect("inlet is always present");
        write_shape(p, &last.to_shape()?)?;
    }
    write_or_print(a.out.as_deref(), &to_document(&reply)?)
}

fn target_from_sequence(env: &EnvConfig, text: &str) -> Result<flowsculpt::flow::FlowShape> {
    let seq = PillarSequence::parse_checked(text, env.num_actions())?;
    if seq.is_empty() {
        return Err(Error::Parameter("target sequence is empty".into()));
    }
    final_shape(&env.inlet, &seq, &env.library)
}

fn run_summary(run: &RunArtifacts, dir: &Path) -> String {
    let mut s = format!(
        "episodes {}  steps {}  gradient steps {}  target syncs {}\n",
        run.episodes.len(),
        run.counters.global_steps,
        run.counters.gradient_steps,
        run.counters.target_syncs
    );
    if let Some(f) = run.final_window_frequency() {
        s.push_str(&format!("final window success frequency {f:?}\n"));
    }
    match run.episodes_to_reach(0.8) {
        Some(n) => s.push_str(&format!("first window at 0.8 ends at episode {n}\n")),
        None => s.push_str("no window reached 0.8\n"),
    }
    s.push_str(&format!("unique states {}\n", run.total_unique_states()));
    for (rank, e) in run.solutions.top_k(5).iter().enumerate() {
        s.push_str(&format!("Solution-{}: {} (x{})\n", rank + 1, e.sequence, e.frequency));
    }
    s.push_str(&format!("wrote {}\n", dir.display()));
    s
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.episodes {
        cfg.episodes = n;
    }
    let env = cfg.env.build()?;
    let target = match (&a.target, &a.target_sequence) {
        (Some(p), None) => read_shape(p)?,
        (None, Some(s)) => target_from_sequence(&env, s)?,
        _ => return Err(Error::Usage("give exactly one of --target or --target-sequence".into())),
    };
    let init = a.init.as_deref().map(Checkpoint::load).transpose()?;
    let run = train_in_dir(&cfg, &env, &target, init.as_ref(), &a.out)?;
    write_or_print(None, &run_summary(&run, &a.out))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let env = resolve_env(&a.lib, Some(ck.metadata.grid))?;
    let target = read_shape(&a.target)?;
    let summary = evaluate_checkpoint(&ck, &env, &target, a.episodes)?;
    if let Some(p) = &a.out {
        write_or_print(Some(p), &to_document(&summary)?)?;
    }
    let best = if summary.best_sequence.is_empty() {
        "-".to_string()
    } else {
        summary.best_sequence.to_string()
    };
    write_or_print(
        None,
        &format!(
            "success rate {:?}\nmean pmr {:?}\nmean length {:?}\nbest sequence {} (pmr {:?})\n",
            summary.success_rate, summary.mean_pmr, summary.mean_length, best, summary.best_pmr
        ),
    )
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageDocument {
    #[serde(default)]
    target: Option<ShapeDocument>,
    #[serde(default)]
    target_file: Option<PathBuf>,
    #[serde(default)]
    target_sequence: Option<String>,
    episodes: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CurriculumDocument {
    stages: Vec<StageDocument>,
    #[serde(default)]
    initial: Option<PathBuf>,
}

fn cmd_transfer(a: TransferArgs) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let env = cfg.env.build()?;
    let doc: CurriculumDocument = parse_document(read_text(&a.curriculum)?.as_bytes())
        .map_err(|e| Error::Config(format!("{}: {e}", a.curriculum.display())))?;
    // Relative paths inside the curriculum are relative to its file.
    let base = a.curriculum.parent().unwrap_or(Path::new("."));
    let mut stages = Vec::with_capacity(doc.stages.len());
    for (k, s) in doc.stages.iter().enumerate() {
        let target = match (&s.target, &s.target_file, &s.target_sequence) {
            (Some(d), None, None) => d.to_shape()?,
            (None, Some(p), None) => read_shape(base.join(p))?,
            (None, None, Some(q)) => target_from_sequence(&env, q)?,
            _ => {
                return Err(Error::Config(format!(
                    "stages[{k}]: give exactly one of target, target_file, target_sequence"
                )))
            }
        };
        stages.push(CurriculumStage {
            target,
            episodes: s.episodes,
        });
    }
    let spec = CurriculumSpec {
        stages,
        initial: doc.initial.map(|p| Checkpoint::load(base.join(p))).transpose()?,
    };
    let runs = transfer_train_with_env(&spec, &cfg, &env)?;
    let mut text = String::new();
    for run in &runs {
        let dir = a.out.join(format!("stage-{}", run.stage));
        run.write_dir(&dir)?;
        text.push_str(&format!("stage {}\n", run.stage));
        text.push_str(&run_summary(run, &dir));
    }
    write_or_print(None, &text)
}

fn cmd_solve(a: SolveArgs) -> Result<()> {
    let ck = LoadedCheckpoint::load(&a.checkpoint)?;
    let env = resolve_env(&a.lib, Some(ck.metadata.grid))?;
    let req = SuggestionRequest {
        target: ShapeDocument::from_shape(&read_shape(&a.target)?),
        k: a.k,
        max_steps: a.max_steps,
        pmr_threshold: a.threshold,
        checkpoint: checkpoint_id(&a.checkpoint),
        seed: a.seed,
    };
    let reply = suggest_with(&ck, &env, &req).map_err(|e| match e.field {
        "k" | "max_steps" | "pmr_threshold" => Error::Usage(e.error.to_string()),
        _ => e.error,
    })?;
    let doc = reply.to_json()?;
    if let Some(p) = &a.out {
        write_or_print(Some(p), &doc)?;
    }
    if a.json {
        write_or_print(None, &doc)
    } else {
        write_or_print(None, &reply.table())
    }
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let env = resolve_env(&a.lib, None)?;
    let checkpoints = match &a.checkpoint_dir {
        Some(dir) => CheckpointStore::load_dir(dir)?,
        None => CheckpointStore::default(),
    };
    eprintln!(
        "library {} ({} actions), {} checkpoint(s)",
        env.library.grid(),
        env.library.num_actions(),
        checkpoints.len()
    );
    let state = Arc::new(AppState { env, checkpoints });
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Config(format!("runtime: {e}")))?;
    rt.block_on(service::serve(state, a.addr))
        .map_err(|e| Error::Config(format!("serving on {}: {e}", a.addr)))
}
