import csv
import json

import numpy as np
import pytest

from varlab.experiments import (
    InstanceSpec,
    Scenario,
    aggregate,
    emit_outputs,
    run_clip_distinction,
    run_consistency,
    run_estimator_study,
    run_gradcheck,
    run_negative_weight_demo,
)
from varlab.trainer import TrainConfig, train

SMALL = InstanceSpec(n_prompts=2, n_responses=4)


def small_consistency(**kw):
    spec = Scenario(name="ablate-b", instance=SMALL, seeds=(0, 1, 2), train=TrainConfig(steps=200),
                    batch_sizes=(2, 8), **kw)
    return run_consistency(spec)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_clip_distinction_targets():
    res = run_clip_distinction()
    by = {r["method"]: r for r in res.rows}
    assert by["rlol"]["target_p1"] == pytest.approx(100 / 199, abs=1e-15)
    assert by["var-exact"]["target_p1"] == pytest.approx(np.e / (np.e + 1), abs=1e-12)
    assert res.passed
    # ratio form: R1/R2 for R-LoL, exp(R1 - R2) for VAR
    assert by["rlol"]["achieved_p1"] / by["rlol"]["achieved_p2"] == pytest.approx(100 / 99, abs=1e-2)
    assert by["var-exact"]["achieved_p1"] / by["var-exact"]["achieved_p2"] == pytest.approx(np.e, abs=1e-2)


def test_clip_distinction_symmetric():
    res = run_clip_distinction(rewards=(100.0, 100.0))
    for row in res.rows:
        assert abs(row["achieved_p1"] - 0.5) < 1e-3
    assert res.passed


def test_clip_distinction_fails_loudly():
    res = run_clip_distinction(steps=5)
    assert not res.passed
    assert any(not r["within_tol"] for r in res.rows)


def test_clip_rejects_nonpositive_rewards():
    with pytest.raises(ValueError):
        run_clip_distinction(rewards=(1.0, -1.0))


def test_negative_weight_demo():
    res = run_negative_weight_demo()
    assert res.passed, res.checks
    by = {r["method"]: r for r in res.rows}
    assert by["wsft-custom"]["final_loss"] < -1e4
    assert by["wsft-custom"]["final_p_y0"] < 1e-8
    assert by["var-exact"]["min_loss"] >= 0


def test_consistency_schema_and_aggregates():
    res = small_consistency()
    seeds = [r for r in res.rows if r["row_type"] == "seed"]
    # one var-exact cell plus 2 modes x 2 batch sizes, 3 seeds each
    assert len(seeds) == 5 * 3
    cells = {(r["method"], r["sampling"], r["B"]) for r in seeds}
    assert ("var-inbatch", "uniform", 8) in cells and ("var-exact", "enumerate", 8) in cells
    again = aggregate(seeds, ("method", "sampling", "B"), ("final_kl_forward", "final_J_gap"))
    means = {(a["method"], a["sampling"], a["B"]): a for a in res.aggregates if a["row_type"] == "mean"}
    for a in again:
        if a["row_type"] != "mean":
            continue
        key = (a["method"], a["sampling"], a["B"])
        members = [r["final_kl_forward"] for r in seeds if (r["method"], r["sampling"], r["B"]) == key]
        assert means[key]["final_kl_forward"] == a["final_kl_forward"] == float(np.mean(members))
        assert means[key]["n"] == 3


def test_consistency_constant_rewards_fixed_point():
    """Exact Z and in-batch Z over full enumeration both leave pi_ref = pi* in place."""
    inst = InstanceSpec(n_prompts=2, n_responses=4, reward_kind="constant", constant=1.0)
    spec = Scenario(name="c", instance=inst, seeds=(0, 1), train=TrainConfig(steps=200, eval_every=1),
                    batch_sizes=(2, 8))
    res = run_consistency(spec)
    for seed in (0, 1):
        assert res.runs[("var-exact_enumerate", seed)].series("kl_forward").max() < 1e-6
    space, rewards = inst.build(0, 0)
    cfg = TrainConfig(loss_kind="var-inbatch", sampling="enumerate", steps=200, eval_every=1)
    assert train(space, rewards, cfg).series("kl_forward").max() < 1e-6


def test_consistency_parallel_matches_serial():
    a = small_consistency()
    b = small_consistency(workers=2)
    assert a.rows == b.rows
    assert a.aggregates == b.aggregates


def test_estimator_study_small():
    spec = Scenario(name="estimator-study", instance=InstanceSpec(n_prompts=2, n_responses=16),
                    seeds=tuple(range(50)), batch_sizes=(2, 16))
    res = run_estimator_study(spec)
    enum = [r for r in res.rows if r["sampling"] == "enumerate"]
    assert len(enum) == 2
    assert all(abs(r["ratio"] - 1) < 1e-12 for r in enum)
    agg = {(a["sampling"], a["B"]): a for a in res.aggregates}
    # Z_hat/Z has mean B/|Y| under uniform sampling
    assert agg[("uniform", 2)]["mean_ratio"] == pytest.approx(2 / 16, rel=0.3)
    assert agg[("uniform", 16)]["mean_unbiased_ratio"] == pytest.approx(1.0, rel=0.2)


def test_gradcheck_scenario():
    res = run_gradcheck(InstanceSpec(n_prompts=3, n_responses=5), seeds=range(2))
    assert res.passed, res.checks
    assert {r["loss"] for r in res.rows} == {"var-inbatch", "var-exact", "wsft", "dpo", "rlol", "rlol-baseline", "bt"}


def test_emit_outputs_layout(tmp_path):
    res = small_consistency()
    written = emit_outputs(res, tmp_path)
    root = tmp_path / "ablate-b"
    assert (root / "summary.csv") in written
    assert (root / "var-inbatch_uniform_B2" / "0.records").exists()
    rows = read_csv(root / "summary.csv")
    assert sum(r["row_type"] == "seed" for r in rows) == 15
    assert sum(r["row_type"] == "mean" for r in rows) == 5
    summary = json.loads((root / "summary.json").read_text())
    assert summary["passed"] == res.passed
    assert not list(root.glob("*.svg"))


def test_emit_clip_table(tmp_path):
    res = run_clip_distinction()
    emit_outputs(res, tmp_path, ("csv",))
    rows = read_csv(tmp_path / "demo-clip" / "summary.csv")
    assert [r["method"] for r in rows] == ["rlol", "var-exact"]
    assert {"target_p1", "achieved_p1", "abs_error"} <= set(rows[0])


def test_emit_plots(tmp_path):
    pytest.importorskip("matplotlib")
    written = emit_outputs(small_consistency(), tmp_path, ("csv", "plots"))
    svgs = [p for p in written if p.suffix == ".svg"]
    assert len(svgs) == 2
    assert all(p.read_text().lstrip().startswith("<?xml") for p in svgs)


def test_emit_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_outputs(run_clip_distinction(steps=5), blocker)


def test_emit_is_byte_identical(tmp_path):
    emit_outputs(small_consistency(), tmp_path / "a")
    emit_outputs(small_consistency(), tmp_path / "b")
    for name in ("summary.csv", "summary.json"):
        assert (tmp_path / "a" / "ablate-b" / name).read_bytes() == (tmp_path / "b" / "ablate-b" / name).read_bytes()
