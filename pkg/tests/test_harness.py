"""End-to-end runs and sweeps on tiny configurations."""

from __future__ import annotations

import json
import math
from dataclasses import replace

import numpy as np
import pytest

from dplab.accountant import RdpCurve, compose, to_epsilon_delta
from dplab.config import ConfigError, RunConfig
from dplab.harness import SWEEP_HEADER, RunFailure, run_experiment, sweep
from dplab.ledger import RunLedger


def base_cfg(tmp_path, name="run", **over):
    d = dict(
        data_dir=str(tmp_path / "nodata"),
        image_side=8,
        subset=64,
        capacity=2,
        latent_dim=8,
        clip=1.0,
        noise_multiplier=0.8,
        delta=1e-5,
        batch_size=8,
        steps=6,
        n_critic=2,
        lambda_gp=10.0,
        lr=1e-3,
        sampling="poisson",
        seed=0,
        eval_every=3,
        eval_samples=64,
        eval_splits=2,
        classifier_train=200,
        classifier_val=64,
        classifier_epochs=1,
        out=str(tmp_path / name),
        timing="none",
    )
    d.update(over)
    return RunConfig(**d)


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("smoke")
    cfg = base_cfg(tmp)
    return cfg, run_experiment(cfg)


def test_smoke_run_completes_with_all_outputs(smoke):
    cfg, res = smoke
    assert res.status == "ok"
    out = res.out_dir
    for fname in (
        "config.txt",
        "ledger.csv",
        "meta.json",
        "classifier.ckpt",
        "generator.ckpt",
        "critic.ckpt",
    ):
        assert (out / fname).exists(), fname
    steps = [r.step for r in res.ledger.rows]
    assert steps == [0, 3, 6]
    meta = json.loads((out / "meta.json").read_text())
    assert meta["status"] == "ok"
    assert meta["accounted_steps"] == 6
    assert meta["dataset_source"].startswith("synthetic:")
    assert meta["sampling_rate"] == pytest.approx(8 / 64)


def test_ledger_epsilon_recomputes_bitwise_from_meta(smoke):
    cfg, res = smoke
    meta = json.loads((res.out_dir / "meta.json").read_text())
    q = meta["sampling_rate"]
    rows = RunLedger.read(res.out_dir / "ledger.csv").rows
    assert len(rows) == 3
    for row in rows:
        curve = compose(RdpCurve.zero(), row.step, q, cfg.noise_multiplier)
        ed = to_epsilon_delta(curve, cfg.delta)
        assert ed.epsilon == row.epsilon  # bitwise, through the CSV
        assert ed.alpha_star == row.alpha_star
        assert curve.eps[ed.alpha_star] == row.rdp_eps


def test_epsilon_rows_are_nondecreasing_and_finite(smoke):
    _, res = smoke
    eps = [r.epsilon for r in res.ledger.rows]
    assert all(math.isfinite(e) for e in eps)
    assert eps == sorted(eps)
    assert res.final_epsilon == eps[-1]


def test_zero_noise_reports_infinite_epsilon(tmp_path):
    cfg = base_cfg(tmp_path, noise_multiplier=0.0, clip=math.inf, steps=2, eval_every=2)
    res = run_experiment(cfg)
    assert all(r.epsilon == math.inf for r in res.ledger.rows)
    assert all(r.alpha_star == -1 for r in res.ledger.rows)
    meta = json.loads((res.out_dir / "meta.json").read_text())
    assert meta["final_epsilon"] == "inf"
    text = (res.out_dir / "ledger.csv").read_text()
    assert ",inf," in text


def test_identical_configs_give_byte_identical_outputs(tmp_path):
    cfg_a = base_cfg(tmp_path, name="a", steps=4, eval_every=2)
    cfg_b = replace(cfg_a, out=str(tmp_path / "b"))
    res_a = run_experiment(cfg_a)
    res_b = run_experiment(cfg_b)
    for fname in ("ledger.csv", "generator.ckpt", "critic.ckpt", "meta.json"):
        a = (res_a.out_dir / fname).read_bytes()
        b = (res_b.out_dir / fname).read_bytes()
        assert a == b, f"{fname} differs between identical runs"


def test_seed_changes_the_run(tmp_path):
    cfg_a = base_cfg(tmp_path, name="s0", steps=2, eval_every=2)
    cfg_b = base_cfg(tmp_path, name="s1", steps=2, eval_every=2, seed=1)
    res_a = run_experiment(cfg_a)
    res_b = run_experiment(cfg_b)
    a = (res_a.out_dir / "critic.ckpt").read_bytes()
    b = (res_b.out_dir / "critic.ckpt").read_bytes()
    assert a != b


def test_fixed_sampling_also_runs(tmp_path):
    cfg = base_cfg(tmp_path, sampling="fixed", steps=2, eval_every=2)
    res = run_experiment(cfg)
    assert res.status == "ok"
    assert len(res.ledger.rows) == 2


def test_nonfinite_abort_raises_after_flushing_the_ledger(tmp_path):
    cfg = base_cfg(tmp_path, name="boom", lr=math.inf, steps=4)
    with pytest.raises(RunFailure, match="non-finite"):
        run_experiment(cfg)
    led = RunLedger.read(tmp_path / "boom" / "ledger.csv")
    assert led.rows[0].step == 0  # the pre-training row survived the abort
    meta = json.loads((tmp_path / "boom" / "meta.json").read_text())
    assert meta["status"].startswith("failed: non-finite")
    assert meta["failed_at"] >= 1


def test_batch_larger_than_dataset_is_a_config_error(tmp_path):
    cfg = base_cfg(tmp_path, subset=4, batch_size=8)
    with pytest.raises(ConfigError, match="smaller than batch_size"):
        run_experiment(cfg)


# ---------------------------------------------------------------------------
# sweeps


def test_sweep_of_one_config_matches_the_standalone_run(tmp_path):
    cfg = base_cfg(tmp_path, name="alone", steps=4, eval_every=2)
    res = run_experiment(cfg)
    sw = sweep([cfg], tmp_path / "sw", baseline=False)
    assert len(sw.results) == 1
    a = (res.out_dir / "ledger.csv").read_bytes()
    b = (sw.results[0].out_dir / "ledger.csv").read_bytes()
    assert a == b


def test_sweep_adds_a_non_private_baseline_and_merges_csv(tmp_path):
    cfgs = [
        base_cfg(tmp_path, noise_multiplier=0.6, steps=2, eval_every=2),
        base_cfg(tmp_path, noise_multiplier=2.0, steps=2, eval_every=2),
    ]
    sw = sweep(cfgs, tmp_path / "sw")
    assert len(sw.results) == 3
    sigmas = [r.config.noise_multiplier for r in sw.results]
    assert sigmas == [0.6, 2.0, 0.0]
    # more noise buys a smaller epsilon at equal steps
    by_sigma = {r.config.noise_multiplier: r.final_epsilon for r in sw.results}
    assert by_sigma[0.6] > by_sigma[2.0]
    assert by_sigma[0.0] == math.inf

    text = sw.combined_csv.read_text().splitlines()
    assert text[0] == SWEEP_HEADER
    assert len(text) == 1 + 3 * 2  # two ledger rows per run
    summary = json.loads((sw.out_dir / "summary.json").read_text())
    assert len(summary) == 3 and all(v == "ok" for v in summary.values())


def test_sweep_reuses_the_first_runs_classifier(tmp_path):
    cfgs = [
        base_cfg(tmp_path, noise_multiplier=0.6, steps=2, eval_every=2),
        base_cfg(tmp_path, noise_multiplier=2.0, steps=2, eval_every=2),
    ]
    sw = sweep(cfgs, tmp_path / "sw", baseline=False)
    first, second = sw.results
    assert (first.out_dir / "classifier.ckpt").exists()
    assert not (second.out_dir / "classifier.ckpt").exists()
    cfg_text = (second.out_dir / "config.txt").read_text()
    assert "classifier.ckpt" in cfg_text


def test_sweep_continues_past_a_failing_run(tmp_path):
    cfgs = [
        base_cfg(tmp_path, lr=math.inf, steps=2, eval_every=2),
        base_cfg(tmp_path, noise_multiplier=2.0, steps=2, eval_every=2),
    ]
    sw = sweep(cfgs, tmp_path / "sw", baseline=False)
    assert len(sw.results) == 1
    assert len(sw.failures) == 1
    (fail_name,) = sw.failures
    assert "non-finite" in sw.failures[fail_name]
    # the aborted run's flushed step-0 row still reaches the combined csv
    lines = sw.combined_csv.read_text().splitlines()
    assert len(lines) == 1 + 1 + 2
    summary = json.loads((sw.out_dir / "summary.json").read_text())
    assert sum(v == "ok" for v in summary.values()) == 1


def test_sweep_records_config_errors_without_running(tmp_path):
    cfgs = [
        base_cfg(tmp_path, steps=2, eval_every=2),
        base_cfg(tmp_path, subset=4, batch_size=8, noise_multiplier=2.0),
    ]
    sw = sweep(cfgs, tmp_path / "sw", baseline=False)
    assert len(sw.results) == 1
    assert any("config error" in v for v in sw.failures.values())


def test_empty_sweep_is_an_error(tmp_path):
    with pytest.raises(ConfigError, match="at least one config"):
        sweep([], tmp_path / "sw")
