use std::fs;
use std::path::Path;

use flowsculpt::agent::checkpoint::Checkpoint;
use flowsculpt::env::{reset, step};
use flowsculpt::flow::{default_inlet, final_shape, pmr, shape_hash, FlowShape, GridSpec, PillarLibrary};
use flowsculpt::trainer::{
    evaluate_checkpoint, make_targets, train, train_in_dir, transfer_train, CurriculumSpec, CurriculumStage,
    RunArtifacts, TrainConfig,
};
use flowsculpt::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A few hundred episodes with every step count shrunk to match.
fn small_config(episodes: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.episodes = episodes;
    cfg.seed = seed;
    cfg.agent.warmup_random_steps = 200;
    cfg.agent.target_update_interval = 75;
    cfg.schedule.decay_steps = 2000;
    cfg.success_window = 100;
    cfg.eval_every = 100;
    cfg
}

fn two_pillar_target(seed: u64) -> FlowShape {
    let grid = GridSpec::DEFAULT;
    let lib = PillarLibrary::surrogate(grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_targets(&lib, &default_inlet(grid), &mut rng, 1, 2)
        .unwrap()
        .remove(0)
        .1
}

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn identical_config_and_seed_write_identical_run_directories() {
    let cfg = small_config(300, 4);
    let target = two_pillar_target(1);
    let a = train(&cfg, &target, None).unwrap();
    let b = train(&cfg, &target, None).unwrap();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    a.write_dir(da.path()).unwrap();
    b.write_dir(db.path()).unwrap();
    let (fa, fb) = (dir_files(da.path()), dir_files(db.path()));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "checkpoint.json",
            "config.json",
            "counters.json",
            "episodes.csv",
            "evaluations.csv",
            "solutions.csv",
            "target.json",
            "unique_states.csv",
            "windows.csv"
        ]
    );
    assert_eq!(fa, fb);

    let c = train(&small_config(300, 5), &target, None).unwrap();
    assert_ne!(a.checkpoint.parameters, c.checkpoint.parameters);
}

fn check_bookkeeping(run: &RunArtifacts, lib: &PillarLibrary) {
    let cfg = &run.config;
    let env = cfg.env.build().unwrap();
    let mut steps = 0u64;
    let mut successes = 0usize;
    for (k, log) in run.episodes.iter().enumerate() {
        assert_eq!(log.index, k);
        assert_eq!(log.length, log.actions.len());
        assert!(log.length >= 1 && log.length <= env.max_steps);
        // Replaying the logged actions reproduces reward, pmr and outcome.
        let mut state = reset(&env, &run.target).unwrap();
        let mut total = 0.0;
        let mut last = None;
        for &a in log.actions.actions() {
            assert!(!state.done, "episode {k} continued past its end");
            let (next, r) = step(&state, a, &env).unwrap();
            total += r.reward;
            last = Some(r);
            state = next;
        }
        let last = last.unwrap();
        assert!(state.done);
        assert_eq!(total, log.reward);
        assert_eq!(last.pmr, log.pmr);
        assert_eq!(last.success, log.success);
        steps += log.length as u64;
        successes += log.success as usize;
    }
    assert_eq!(run.counters.global_steps, steps);

    assert_eq!(run.windows.iter().map(|w| w.successes).sum::<usize>(), successes);
    assert_eq!(
        run.windows.iter().map(|w| w.end - w.start).sum::<usize>(),
        run.episodes.len()
    );
    for w in &run.windows {
        let count = run.episodes[w.start..w.end].iter().filter(|l| l.success).count();
        assert_eq!(w.successes, count);
        assert_eq!(w.frequency, count as f64 / (w.end - w.start) as f64);
        assert_eq!(w.complete, w.end - w.start == cfg.success_window);
    }

    assert_eq!(run.solutions.total() as usize, successes);
    for entry in run.solutions.top_k(usize::MAX) {
        let shape = final_shape(&env.inlet, &entry.sequence, lib).unwrap();
        assert!(pmr(&shape, &run.target).unwrap() >= env.pmr_threshold);
        let seen = run
            .episodes
            .iter()
            .filter(|l| l.success && l.actions == entry.sequence)
            .count();
        assert_eq!(entry.frequency as usize, seen);
        assert!(run.episodes[entry.first_seen].actions == entry.sequence);
    }

    assert_eq!(run.unique_states.len(), run.episodes.len());
    assert!(run.unique_states.windows(2).all(|w| w[0] <= w[1]));
    assert!(run.total_unique_states() as u64 <= 1 + steps);
}

#[test]
fn logs_windows_and_solutions_are_consistent() {
    let lib = PillarLibrary::surrogate(GridSpec::DEFAULT);
    let run = train(&small_config(400, 2), &two_pillar_target(3), None).unwrap();
    check_bookkeeping(&run, &lib);
    assert_eq!(run.evaluations.len(), 4);
    assert_eq!(
        run.evaluations.iter().map(|e| e.episode).collect::<Vec<_>>(),
        [100, 200, 300, 400]
    );
}

#[test]
fn gradient_steps_start_after_warmup_and_syncs_follow_the_interval() {
    let cfg = small_config(300, 7);
    let run = train(&cfg, &two_pillar_target(5), None).unwrap();
    let c = &run.counters;
    let warmup = cfg.agent.warmup_random_steps;
    assert_eq!(c.warmup_random_steps, warmup);
    assert_eq!(c.first_gradient_step, Some(warmup));
    assert_eq!(c.gradient_steps, c.global_steps - warmup);
    assert_eq!(c.target_syncs, c.gradient_steps / cfg.agent.target_update_interval);
    assert_eq!(run.checkpoint.metadata.gradient_steps, c.gradient_steps);
    assert_eq!(run.checkpoint.metadata.global_step, c.global_steps);

    // A budget that ends inside the warm-up never touches the weights.
    let short = small_config(10, 7);
    let run = train(&short, &two_pillar_target(5), None).unwrap();
    assert!(run.counters.global_steps < warmup);
    assert_eq!(run.counters.gradient_steps, 0);
    assert_eq!(run.counters.first_gradient_step, None);
    let fresh = train(&small_config(0, 7), &two_pillar_target(5), None).unwrap();
    assert_eq!(run.checkpoint.parameters, fresh.checkpoint.parameters);
}

#[test]
fn curriculum_stages_extend_the_lineage() {
    let cfg = small_config(150, 9);
    let (t0, t1) = (two_pillar_target(11), two_pillar_target(12));
    let spec = CurriculumSpec {
        stages: vec![
            CurriculumStage {
                target: t0.clone(),
                episodes: 150,
            },
            CurriculumStage {
                target: t1.clone(),
                episodes: 120,
            },
        ],
        initial: None,
    };
    let runs = transfer_train(&spec, &cfg).unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0].stage, 0);
    assert_eq!(runs[1].stage, 1);

    // Stage 0 is an ordinary scratch run.
    let scratch = train(&cfg, &t0, None).unwrap();
    assert_eq!(runs[0].checkpoint, scratch.checkpoint);

    let meta = &runs[1].checkpoint.metadata;
    assert_eq!(meta.episodes, 270);
    assert_eq!(
        meta.global_step,
        runs[0].counters.global_steps + runs[1].counters.global_steps
    );
    assert_eq!(
        meta.gradient_steps,
        runs[0].counters.gradient_steps + runs[1].counters.gradient_steps
    );
    let hashes: Vec<String> = meta.lineage.iter().map(|l| l.target_hash.clone()).collect();
    assert_eq!(
        hashes,
        [format!("{:016x}", shape_hash(&t0)), format!("{:016x}", shape_hash(&t1))]
    );
    assert_eq!(meta.lineage.iter().map(|l| l.episodes).collect::<Vec<_>>(), [150, 120]);

    // The warm stage skips random warm-up, starts learning once its fresh
    // replay holds one batch, and restarts exploration lower.
    let c = &runs[1].counters;
    assert_eq!(c.warmup_random_steps, cfg.transfer.warmup_random_steps);
    assert_eq!(c.first_gradient_step, Some(cfg.agent.batch_size as u64 - 1));
    assert_eq!(runs[1].config.schedule.epsilon_at(0), cfg.transfer.epsilon_restart);

    // Resuming from the stage-0 checkpoint gives the same second stage.
    let resumed = train(&small_config(120, 9), &t1, Some(&runs[0].checkpoint)).unwrap();
    assert_eq!(resumed.checkpoint.parameters, runs[1].checkpoint.parameters);
    assert_eq!(
        resumed.checkpoint.metadata,
        runs[1].checkpoint.metadata.clone().with_stage_zero()
    );
}

trait StageZero {
    fn with_stage_zero(self) -> Self;
}

impl StageZero for flowsculpt::agent::checkpoint::CheckpointMetadata {
    /// A resumed run is its own stage 0.
    fn with_stage_zero(mut self) -> Self {
        if let Some(last) = self.lineage.last_mut() {
            last.stage = 0;
        }
        self
    }
}

#[test]
fn checkpoints_round_trip_and_evaluate_deterministically() {
    let run = train(&small_config(250, 1), &two_pillar_target(8), None).unwrap();
    let text = run.checkpoint.to_json().unwrap();
    let back = Checkpoint::from_json(&text).unwrap();
    assert_eq!(back, run.checkpoint);
    assert_eq!(back.to_json().unwrap(), text);

    let env = run.config.env.build().unwrap();
    let a = evaluate_checkpoint(&back, &env, &run.target, 5).unwrap();
    let b = evaluate_checkpoint(&run.checkpoint, &env, &run.target, 5).unwrap();
    assert_eq!(a, b);
    assert!(a.success_rate == 0.0 || a.success_rate == 1.0);
    assert!(a.best_sequence.len() <= env.max_steps);
}

#[test]
fn a_diverging_run_leaves_a_diagnostic_dump() {
    let mut cfg = small_config(200, 3);
    cfg.agent.learning_rate = 1e300;
    let env = cfg.env.build().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = train_in_dir(&cfg, &env, &two_pillar_target(2), None, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    let diag: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("diagnostic.json")).unwrap()).unwrap();
    assert!(diag["error"].as_str().unwrap().contains("holds") || diag["error"].as_str().unwrap().contains("produced"));
    assert!(diag["global_step"].as_u64().unwrap() >= cfg.agent.warmup_random_steps);
    let episodes = fs::read_to_string(dir.path().join("episodes.csv")).unwrap();
    assert_eq!(episodes.lines().count(), 1 + diag["episode"].as_u64().unwrap() as usize);
    assert!(!dir.path().join("checkpoint.json").exists());
}

#[test]
fn bad_inputs_fail_before_training() {
    let cfg = small_config(10, 0);
    let empty = FlowShape::zeros(GridSpec::DEFAULT);
    assert!(matches!(train(&cfg, &empty, None), Err(Error::Config(_))));
    let other = FlowShape::zeros(GridSpec::new(4, 4).unwrap());
    assert!(train(&cfg, &other, None).is_err());
    let mut bad = cfg.clone();
    bad.success_window = 0;
    assert!(matches!(
        train(&bad, &two_pillar_target(0), None),
        Err(Error::Config(_))
    ));
}
