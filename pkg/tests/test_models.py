import json
from dataclasses import replace

import numpy as np
import pytest

from trpmbm.models import (
    ScenarioError,
    default_scenario,
    load_scenario,
    no_spawning,
    perp_unit,
    sample_ground_truth,
    sample_measurement_sequence,
    sample_measurements,
    scenario_from_dict,
    write_ground_truth,
    write_measurements,
)
from trpmbm.trees import parse_trees, targets_at_time, validate_tree


def test_perp_unit_reference_values():
    assert np.allclose(perp_unit(np.array([0.0, 1.0, 0.0, 0.0])), [0, 0, 1, 0])
    assert np.allclose(perp_unit(np.array([0.0, 0.0, 0.0, 1.0])), [-1, 0, 0, 0])
    # degenerate speed falls back to +y
    assert np.allclose(perp_unit(np.array([5.0, 0.0, 3.0, 0.0])), [0, 0, 1, 0])
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = rng.normal(size=4) * 10
        assert np.linalg.norm(perp_unit(x)) == pytest.approx(1.0, abs=1e-12)


def test_default_scenario_values():
    cfg = default_scenario()
    assert cfg.n_modes == 3
    assert cfg.survival.prob == 0.99
    assert cfg.spawn_modes[0].prob == 0.01
    assert cfg.measurement.p_detect == 0.9
    assert cfg.measurement.clutter_rate == 10.0
    assert cfg.measurement.clutter_density == pytest.approx(10.0 / (600 * 400))
    assert cfg.births[0].weight == 0.08
    assert cfg.horizon == 100
    f = cfg.filters
    assert (f.n_hyp, f.gamma_mbm, f.gate, f.gamma_estimate) == (100, 1e-4, 15.0, 0.4)


def test_single_deterministic_lineage():
    cfg = default_scenario()
    cfg = replace(
        cfg,
        horizon=20,
        modes=(replace(cfg.modes[0], prob=1.0),)
        + tuple(replace(m, prob=0.0) for m in cfg.modes[1:]),
    )
    for seed in range(5):
        for tree in sample_ground_truth(cfg, seed=seed):
            assert len(tree.branches) == 1
            marks = tree.branches[0].genealogy
            assert all(m == 1 for m in marks)
            assert len(marks) == cfg.horizon - tree.start_time + 1


def test_no_spawning_yields_single_branch_trees():
    cfg = replace(no_spawning(default_scenario()), horizon=30)
    for seed in range(10):
        for tree in sample_ground_truth(cfg, seed=seed):
            assert len(tree.branches) == 1


def test_sampler_statistics_within_three_sigma():
    from trpmbm.trees import first_own_generation, last_alive_generation

    cfg = replace(default_scenario(), horizon=60)
    survived = trials = 0
    spawns = alive_steps = 0
    for seed in range(80):
        for tree in sample_ground_truth(cfg, seed=seed):
            nu = tree.n_generations
            for br in tree.branches:
                own = first_own_generation(br.genealogy)
                end = last_alive_generation(br.genealogy)
                # one survival trial per alive generation before the horizon
                for g in range(own, min(end, nu - 1) + 1):
                    trials += 1
                    if g < end:
                        survived += 1
                if own > 1:
                    spawns += 1
            for k in range(tree.start_time, tree.end_time):
                alive_steps += len(targets_at_time(tree, k))
    p_hat = survived / trials
    sigma = np.sqrt(0.99 * 0.01 / trials)
    assert abs(p_hat - 0.99) < 3 * sigma
    # two independent spawn modes, each 0.01 per alive target step
    rate = spawns / alive_steps
    sigma = np.sqrt(2 * 0.01 * 0.99 / alive_steps)
    assert abs(rate - 0.02) < 3 * sigma


def test_measurement_sampler_statistics():
    base = replace(default_scenario(), horizon=40)
    truth = sample_ground_truth(base, seed=13)

    # detection rate, with clutter switched off
    clean = replace(base, measurement=replace(base.measurement, clutter_rate=0.0))
    detections = targets = 0
    for seed in range(60):
        for k in range(1, clean.horizon + 1):
            targets += sum(
                len(targets_at_time(t, k)) for t in truth if t.start_time <= k <= t.end_time
            )
            detections += len(sample_measurements(truth, clean, k, seed=seed))
    rate = detections / targets
    sigma = np.sqrt(0.9 * 0.1 / targets)
    assert abs(rate - 0.9) < 3 * sigma

    # clutter mean, with detections switched off
    noisy = replace(base, measurement=replace(base.measurement, p_detect=0.0))
    clutter = n_steps = 0
    for seed in range(60):
        for k in range(1, noisy.horizon + 1):
            clutter += len(sample_measurements(truth, noisy, k, seed=seed))
            n_steps += 1
    mean = clutter / n_steps
    sigma = np.sqrt(10.0 / n_steps)
    assert abs(mean - 10.0) < 3 * sigma
    lo = noisy.measurement.clutter_region[:, 0]
    hi = noisy.measurement.clutter_region[:, 1]
    Z = sample_measurements(truth, noisy, 5, seed=0)
    assert np.all(Z >= lo) and np.all(Z <= hi)


def test_measurement_sampler_degenerate_cases():
    cfg = default_scenario()
    quiet = replace(
        cfg,
        measurement=replace(cfg.measurement, p_detect=0.0, clutter_rate=0.0),
    )
    truth = sample_ground_truth(replace(quiet, horizon=10), seed=1)
    assert sample_measurements(truth, replace(quiet, horizon=10), 5, seed=0).size == 0

    exact = replace(
        cfg,
        horizon=10,
        measurement=replace(
            cfg.measurement, p_detect=1.0, clutter_rate=0.0, R=1e-20 * np.eye(2)
        ),
    )
    truth = sample_ground_truth(exact, seed=3)
    for k in (1, 5, 10):
        states = [
            x
            for t in truth
            if t.start_time <= k <= t.end_time
            for x in targets_at_time(t, k)
        ]
        Z = sample_measurements(truth, exact, k, seed=0)
        assert len(Z) == len(states)
        want = sorted(tuple(np.round(x[[0, 2]], 6)) for x in states)
        got = sorted(tuple(np.round(z, 6)) for z in Z)
        assert want == got


def test_sampling_is_reproducible_and_run_dependent():
    cfg = replace(default_scenario(), horizon=15)
    a = sample_ground_truth(cfg, seed=9)
    b = sample_ground_truth(cfg, seed=9)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.start_time == y.start_time
        for bx, by in zip(x.branches, y.branches):
            assert bx.genealogy == by.genealogy
            assert np.array_equal(bx.states, by.states)
    s0 = sample_measurement_sequence(a, cfg, seed=9, run=0)
    s1 = sample_measurement_sequence(a, cfg, seed=9, run=1)
    assert any(not np.array_equal(x, y) for x, y in zip(s0, s1))


def test_load_scenario_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("")
    cfg = load_scenario(path)
    ref = default_scenario()
    assert cfg.measurement.p_detect == ref.measurement.p_detect
    assert np.array_equal(cfg.survival.F, ref.survival.F)
    assert cfg.filters == ref.filters


def test_load_scenario_overrides_and_errors(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"measurement": {"p_detect": 0.7}, "horizon": 12, "seed": 4}))
    cfg = load_scenario(path)
    assert cfg.measurement.p_detect == 0.7
    assert cfg.horizon == 12 and cfg.seed == 4

    path.write_text(json.dumps({"measurement": {"p_detect": 1.3}}))
    with pytest.raises(ScenarioError, match="p_detect"):
        load_scenario(path)

    path.write_text("{ not json")
    with pytest.raises(ScenarioError, match="line"):
        load_scenario(path)

    path.write_text(json.dumps({"horizont": 3}))
    with pytest.raises(ScenarioError, match="unknown fields"):
        load_scenario(path)


def test_scenario_rho_one_strips_spawning():
    cfg = scenario_from_dict({"rho": 1})
    assert cfg.n_modes == 1
    assert cfg.spawn_modes == ()


def test_scenario_validation_collects_problems():
    with pytest.raises(ScenarioError) as err:
        scenario_from_dict(
            {
                "measurement": {"p_detect": -0.1, "clutter_rate": -2},
                "filters": {"n_hyp": 0, "lscan": 0},
            }
        )
    text = str(err.value)
    for frag in ("p_detect", "clutter_rate", "n_hyp", "lscan"):
        assert frag in text


def test_exports(tmp_path):
    cfg = replace(default_scenario(), horizon=8)
    truth = sample_ground_truth(cfg, seed=2)
    write_ground_truth(truth, tmp_path / "truth.txt")
    back = parse_trees((tmp_path / "truth.txt").read_text())
    assert len(back) == len(truth)
    assert all(validate_tree(t, cfg.n_modes) == [] for t in back)

    seq = sample_measurement_sequence(truth, cfg, seed=2)
    write_measurements(seq, tmp_path / "meas.csv")
    lines = (tmp_path / "meas.csv").read_text().splitlines()
    assert lines[0] == "k,z1,z2"
    assert len(lines) == 1 + sum(len(Z) for Z in seq)
