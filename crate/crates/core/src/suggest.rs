//! Ranked pillar-sequence suggestions from a trained agent.
//!
//! Candidates come from the greedy rollout, from branching wherever the
//! greedy choice is an exact tie, and from seeded epsilon-greedy rollouts.
//! A rollout that never reaches the threshold is cut back to its best-PMR
//! prefix. Every candidate is replayed through the simulator before it is
//! returned, and its reported PMR and success flag come from that replay.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{select_action, QNetworkParams};
use crate::docs::ShapeDocument;
use crate::env::{reset_shared, step, EnvConfig, EnvState};
use crate::error::{Error, Result};
use crate::flow::{apply_sequence, pmr, FlowShape, PillarSequence};

pub const DEFAULT_SUGGEST_SEED: u64 = 0;
pub const DEFAULT_SUGGEST_EPSILON: f64 = 0.25;
/// Upper bound on greedy paths explored through tied Q-values.
pub const MAX_TIE_PATHS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuggestOptions {
    pub k: usize,
    /// Stochastic rollout `i` is seeded with `seed + i`.
    pub seed: u64,
    pub epsilon: f64,
}

impl Default for SuggestOptions {
    fn default() -> Self {
        SuggestOptions {
            k: 1,
            seed: DEFAULT_SUGGEST_SEED,
            epsilon: DEFAULT_SUGGEST_EPSILON,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub sequence: PillarSequence,
    /// Shape after each pillar, in order.
    pub shapes: Vec<ShapeDocument>,
    pub pmr: f64,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuggestionRequest {
    pub target: ShapeDocument,
    #[serde(default = "one")]
    pub k: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub pmr_threshold: Option<f64>,
    pub checkpoint: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuggestionResponse {
    pub checkpoint: String,
    pub k: usize,
    pub max_steps: usize,
    pub pmr_threshold: f64,
    pub seed: u64,
    pub candidates: Vec<Candidate>,
}

impl SuggestionResponse {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// `Best-1: 30, 30, 24 (pmr 0.9375, success)` style lines.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for (k, c) in self.candidates.iter().enumerate() {
            out.push_str(&format!(
                "Best-{}: {} (pmr {:.4}, {})\n",
                k + 1,
                if c.sequence.is_empty() {
                    "-".to_string()
                } else {
                    c.sequence.to_string()
                },
                c.pmr,
                if c.success { "success" } else { "no success" }
            ));
        }
        out
    }
}

/// Resolves the environment overrides of a request.
pub fn request_env(base: &EnvConfig, req: &SuggestionRequest) -> Result<EnvConfig> {
    let mut env = base.clone();
    if let Some(m) = req.max_steps {
        env = env.with_max_steps(m)?;
    }
    if let Some(t) = req.pmr_threshold {
        env = env.with_threshold(t)?;
    }
    Ok(env)
}

/// Answers a request against an already loaded network.
pub fn suggest(params: &QNetworkParams, base: &EnvConfig, req: &SuggestionRequest) -> Result<SuggestionResponse> {
    let env = request_env(base, req)?;
    let target = req.target.to_shape()?;
    let seed = req.seed.unwrap_or(DEFAULT_SUGGEST_SEED);
    let opts = SuggestOptions {
        k: req.k,
        seed,
        ..SuggestOptions::default()
    };
    Ok(SuggestionResponse {
        checkpoint: req.checkpoint.clone(),
        k: req.k,
        max_steps: env.max_steps,
        pmr_threshold: env.pmr_threshold,
        seed,
        candidates: solve(params, &env, &target, &opts)?,
    })
}

/// Up to `k` distinct candidates, sorted by PMR (descending), then length,
/// then lexicographically.
pub fn solve(
    params: &QNetworkParams,
    env: &EnvConfig,
    target: &FlowShape,
    opts: &SuggestOptions,
) -> Result<Vec<Candidate>> {
    if opts.k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&opts.epsilon) {
        return Err(Error::Parameter(format!("epsilon {} outside [0, 1]", opts.epsilon)));
    }
    let arch = params.architecture();
    if arch.input != env.library.grid() || arch.output_units != env.num_actions() {
        return Err(Error::Checkpoint(format!(
            "network expects grid {} with {} actions, environment has grid {} with {}",
            arch.input,
            arch.output_units,
            env.library.grid(),
            env.num_actions()
        )));
    }
    let target = Arc::new(target.clone());
    let start = reset_shared(env, Arc::clone(&target))?;
    let inlet_pmr = pmr(&env.inlet, &target)?;

    let mut found: BTreeSet<PillarSequence> = BTreeSet::new();
    for (state, trace) in tie_paths(params, env, &start)? {
        found.insert(best_prefix(&state, &trace, inlet_pmr));
    }
    let mut attempts = 0u64;
    let max_attempts = 32 * opts.k as u64;
    while attempts < max_attempts && (attempts + 1 < opts.k as u64 || found.len() < opts.k) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(attempts));
        let mut state = start.clone();
        let mut trace = Vec::new();
        while !state.done {
            let a = select_action(params, &state.current, opts.epsilon, &mut rng)?;
            let (next, r) = step(&state, a, env)?;
            trace.push(r.pmr);
            state = next;
        }
        found.insert(best_prefix(&state, &trace, inlet_pmr));
        attempts += 1;
    }

    let mut out = found
        .into_iter()
        .map(|seq| verify(env, &target, seq))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| {
        b.pmr
            .total_cmp(&a.pmr)
            .then(a.sequence.len().cmp(&b.sequence.len()))
            .then_with(|| a.sequence.cmp(&b.sequence))
    });
    out.truncate(opts.k);
    Ok(out)
}

/// Finished greedy rollouts, branching on exactly tied maxima, lowest
/// action first. Each comes with its per-step PMR trace.
fn tie_paths(params: &QNetworkParams, env: &EnvConfig, start: &EnvState) -> Result<Vec<(EnvState, Vec<f64>)>> {
    let mut out = Vec::new();
    let mut stack = vec![(start.clone(), Vec::<f64>::new())];
    while let Some((state, trace)) = stack.pop() {
        if state.done {
            out.push((state, trace));
            continue;
        }
        let q = params.forward(&state.current)?;
        let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..q.len()).filter(|&a| q[a] == best).collect();
        let room = MAX_TIE_PATHS.saturating_sub(out.len() + stack.len()).max(1);
        // Pushed in reverse so the lowest action is expanded first.
        for &a in tied.iter().take(room).rev() {
            let (next, r) = step(&state, a, env)?;
            let mut t = trace.clone();
            t.push(r.pmr);
            stack.push((next, t));
        }
    }
    Ok(out)
}

/// The whole history on success; otherwise the shortest prefix reaching
/// the best PMR seen (the empty prefix if the inlet itself scores best).
fn best_prefix(state: &EnvState, trace: &[f64], inlet_pmr: f64) -> PillarSequence {
    if state.success {
        return state.action_history.clone();
    }
    let mut best = (inlet_pmr, 0);
    for (k, &p) in trace.iter().enumerate() {
        if p > best.0 {
            best = (p, k + 1);
        }
    }
    PillarSequence::new(state.action_history.actions()[..best.1].to_vec())
}

fn verify(env: &EnvConfig, target: &FlowShape, seq: PillarSequence) -> Result<Candidate> {
    let shapes = apply_sequence(&env.inlet, &seq, &env.library)?;
    let last = shapes.last().unwrap_or(&env.inlet);
    let p = pmr(last, target)?;
    Ok(Candidate {
        shapes: shapes.iter().map(ShapeDocument::from_shape).collect(),
        success: p >= env.pmr_threshold,
        pmr: p,
        sequence: seq,
    })
}
