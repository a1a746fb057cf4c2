"""Smoke test for the flowsculpt_py extension.

Build and install it first:

    pip install --no-build-isolation ./crates/python
    python python/smoke_test.py
"""

import json
import tempfile
from pathlib import Path

import flowsculpt_py as fs


def main():
    lib = fs.Library.surrogate()
    assert lib.grid == (12, 32) and lib.num_actions == fs.NUM_ACTIONS == 32
    assert fs.Library.from_json(lib.to_json()).to_json() == lib.to_json()

    inlet = fs.default_inlet()
    seq = fs.parse_sequence("22, 11, 31, 15, 18, 4, 1")
    shapes = lib.simulate(seq)
    assert len(shapes) == 7
    assert shapes[-1] == lib.apply(shapes[-2], 1)
    assert fs.pmr(shapes[-1], shapes[-1]) == 1.0
    assert fs.pmr(fs.Shape.zeros(12, 32), shapes[-1]) == 0.0

    target = fs.Shape(["1" * 10] * 10)
    missing = fs.Shape(["0" * 10] + ["1" * 10] * 9)
    assert abs(fs.pmr(missing, target) - 0.9) < 1e-12
    assert fs.reward(0.75, 0.5) == -0.5
    assert fs.Shape.from_json(shapes[2].to_json()) == shapes[2]

    try:
        fs.parse_sequence("1, 32")
    except ValueError as e:
        assert "32" in str(e)
    else:
        raise AssertionError("out-of-range action accepted")

    env = fs.Environment({"max_steps": 7})
    goal = lib.simulate([30, 12])[-1]
    ep = env.reset(goal)
    for a in (30, 12):
        reward, done, success, p = ep.step(a)
    assert done and success and p == 1.0 and ep.actions == [30, 12]

    cfg = fs.config(scale=1 / 500)
    cfg["eval_every"] = 100
    run = fs.train(goal, cfg, seed=4)
    again = fs.train(goal, json.dumps(cfg), seed=4)
    assert run.checkpoint.to_json() == again.checkpoint.to_json()
    counters = run.counters()
    # Learning starts after the warm-up and once one batch is in replay.
    first = max(cfg["agent"]["warmup_random_steps"], cfg["agent"]["batch_size"] - 1)
    assert counters["first_gradient_step"] == first
    assert counters["gradient_steps"] == counters["global_steps"] - first
    assert run.episodes == cfg["episodes"]

    ck = run.checkpoint
    assert len(ck.q_values(inlet)) == 32
    summary = ck.evaluate(env, goal)
    assert set(summary) >= {"success_rate", "mean_pmr", "best_sequence"}
    candidates = ck.suggest(env, goal, k=3)
    assert 1 <= len(candidates) <= 3
    with tempfile.TemporaryDirectory() as d:
        path = str(Path(d) / "ck.json")
        ck.save(path)
        assert fs.Checkpoint.load(path).to_json() == ck.to_json()
        run.write_dir(str(Path(d) / "run"))
        assert (Path(d) / "run" / "episodes.csv").exists()

    print("windows", [round(f, 3) for f in run.window_frequencies()])
    print("best", candidates[0]["sequence"], "pmr", round(candidates[0]["pmr"], 3))
    print("smoke test ok")


if __name__ == "__main__":
    main()
