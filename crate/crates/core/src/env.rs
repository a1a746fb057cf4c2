//! Episodic flow-sculpting environment.
//!
//! Each episode starts from the inlet with a fixed goal shape. An action
//! places one pillar; the episode ends on reaching the PMR threshold or after
//! `max_steps` pillars. Every step is penalized by the shaped reward, so
//! shorter successful sequences collect more reward.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{apply_pillar, pmr, FlowShape, PillarLibrary, PillarSequence};

/// Denominator used when scaling the PMR above the baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardScale {
    /// `-(1 - (p - b) / b)`.
    #[default]
    Baseline,
    /// `-(1 - (p - b) / (1 - b))`.
    Remainder,
}

/// Shaped step reward `-(1 - (p - b) / b)`.
pub fn reward_fn(p: f64, b: f64) -> f64 {
    -(1.0 - (p - b) / b)
}

pub fn scaled_reward(p: f64, b: f64, scale: RewardScale) -> f64 {
    match scale {
        RewardScale::Baseline => reward_fn(p, b),
        RewardScale::Remainder => -(1.0 - (p - b) / (1.0 - b)),
    }
}

#[derive(Clone, Debug)]
pub struct EnvConfig {
    pub library: Arc<PillarLibrary>,
    pub max_steps: usize,
    pub pmr_threshold: f64,
    pub baseline: f64,
    pub reward_scale: RewardScale,
    pub inlet: FlowShape,
}

impl EnvConfig {
    pub const DEFAULT_MAX_STEPS: usize = 7;
    pub const DEFAULT_THRESHOLD: f64 = 0.90;
    pub const DEFAULT_BASELINE: f64 = 0.5;

    pub fn new(library: Arc<PillarLibrary>, inlet: FlowShape) -> Result<Self> {
        let cfg = EnvConfig {
            library,
            max_steps: Self::DEFAULT_MAX_STEPS,
            pmr_threshold: Self::DEFAULT_THRESHOLD,
            baseline: Self::DEFAULT_BASELINE,
            reward_scale: RewardScale::Baseline,
            inlet,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Result<Self> {
        self.max_steps = max_steps;
        self.validate()?;
        Ok(self)
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        self.pmr_threshold = threshold;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if !(self.baseline > 0.0 && self.baseline < 1.0) {
            return Err(Error::Config(format!("baseline {} outside (0, 1)", self.baseline)));
        }
        if !(self.pmr_threshold > 0.0 && self.pmr_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "pmr threshold {} outside (0, 1]",
                self.pmr_threshold
            )));
        }
        self.library
            .grid()
            .check_same(&self.inlet.grid(), "inlet vs library")
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn num_actions(&self) -> usize {
        self.library.num_actions()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub current: FlowShape,
    pub target: Arc<FlowShape>,
    pub steps_taken: usize,
    pub action_history: PillarSequence,
    pub done: bool,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: FlowShape,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    pub pmr: f64,
}

/// Starts an episode at the inlet with `target` as the goal.
pub fn reset(env: &EnvConfig, target: &FlowShape) -> Result<EnvState> {
    reset_shared(env, Arc::new(target.clone()))
}

pub fn reset_shared(env: &EnvConfig, target: Arc<FlowShape>) -> Result<EnvState> {
    env.library
        .grid()
        .check_same(&target.grid(), "target vs library")
        .map_err(|e| Error::Config(e.to_string()))?;
    if target.count_on() == 0 {
        return Err(Error::Config("target shape has no on-pixels".into()));
    }
    Ok(EnvState {
        current: env.inlet.clone(),
        target,
        steps_taken: 0,
        action_history: PillarSequence::default(),
        done: false,
        success: false,
    })
}

/// Places pillar `action` and scores the result against the target.
pub fn step(state: &EnvState, action: usize, env: &EnvConfig) -> Result<(EnvState, StepResult)> {
    if state.done {
        return Err(Error::Usage("step called on a finished episode".into()));
    }
    let next = apply_pillar(&state.current, env.library.map(action)?)?;
    let p = pmr(&next, &state.target)?;
    let reward = scaled_reward(p, env.baseline, env.reward_scale);
    let success = p >= env.pmr_threshold;
    let steps_taken = state.steps_taken + 1;
    let done = success || steps_taken >= env.max_steps;
    let mut history = state.action_history.clone();
    history.push(action);
    let result = StepResult {
        observation: next.clone(),
        reward,
        done,
        success,
        pmr: p,
    };
    let state = EnvState {
        current: next,
        target: Arc::clone(&state.target),
        steps_taken,
        action_history: history,
        done,
        success,
    };
    Ok((state, result))
}

/// Runs `policy` from reset until the episode ends; returns the terminal
/// state and the summed reward.
pub fn rollout(
    env: &EnvConfig,
    target: &FlowShape,
    mut policy: impl FnMut(&FlowShape) -> Result<usize>,
) -> Result<(EnvState, f64)> {
    let mut state = reset(env, target)?;
    let mut total = 0.0;
    while !state.done {
        let action = policy(&state.current)?;
        let (next, r) = step(&state, action, env)?;
        total += r.reward;
        state = next;
    }
    Ok((state, total))
}
