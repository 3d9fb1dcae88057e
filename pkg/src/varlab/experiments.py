"""Scenario runners: seeded sweeps and demos that emit reproducible tables."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import losses
from .losses import inbatch_partition
from .policy import TabularPolicy
from .oracle import log_partition, optimal_policy, simplex_minimizer_weighted_sft
from .reward import RewardTable, bt_grad, bt_loss, sample_preferences, synth_rewards
from .space import Batch, TaskSpace, derive_seed, enumerate_batch, make_space, sample_batch
from .trainer import RunReport, TrainConfig, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InstanceSpec:
    n_prompts: int = 3
    n_responses: int = 8
    ref_kind: str = "random-dirichlet"
    concentration: float = 1.0
    reward_kind: str = "iid-gaussian"
    sigma: float = 1.0
    gap: float = 1.0
    constant: float = 0.0
    temperature: float = 1.0

    def build(self, root_seed: int, index: int) -> tuple[TaskSpace, RewardTable]:
        space = make_space(
            self.n_prompts, self.n_responses, self.ref_kind,
            seed=derive_seed(root_seed, "space", index), concentration=self.concentration,
        )
        rewards = synth_rewards(
            space, self.reward_kind, sigma=self.sigma, gap=self.gap, c=self.constant,
            temperature=self.temperature, seed=derive_seed(root_seed, "reward", index),
        )
        return space, rewards


@dataclass
class Scenario:
    """A seeded family of instances plus the method settings to compare on them."""

    name: str
    instance: InstanceSpec = field(default_factory=InstanceSpec)
    seeds: Sequence[int] = tuple(range(20))
    root_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    batch_sizes: Sequence[int] = (2, 4, 8, 16)
    sampling_modes: Sequence[str] = ("uniform", "reference")
    workers: int = 1

    def __post_init__(self):
        if len(self.seeds) == 0:
            raise ValueError("scenario needs at least one seed")


@dataclass
class SweepResult:
    name: str
    axes: dict
    rows: list[dict]
    aggregates: list[dict]
    checks: dict[str, bool] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    runs: dict[tuple[str, int], RunReport] = field(default_factory=dict, repr=False)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def aggregate(rows: list[dict], keys: Sequence[str], metrics: Sequence[str]) -> list[dict]:
    """Mean and population std of ``metrics`` for every distinct ``keys`` tuple, in first-seen order."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for cell, members in groups.items():
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            agg = {"row_type": stat, **dict(zip(keys, cell)), "n": len(members)}
            for m in metrics:
                agg[m] = float(fn([r[m] for r in members]))
            out.append(agg)
    return out


def _run_cell(job: tuple) -> tuple[str, int, dict, RunReport]:
    cell, seed, instance, root_seed, config = job
    space, rewards = instance.build(root_seed, seed)
    report = train(space, rewards, config)
    final = report.final
    row = {
        "row_type": "seed",
        "method": config.loss_kind,
        "sampling": config.sampling,
        "B": len(enumerate_batch(space)) if config.sampling == "enumerate" else config.batch_size,
        "seed": seed,
        "final_kl_forward": final["kl_forward"],
        "final_kl_reverse": final["kl_reverse"],
        "final_J_gap": final["J_gap"],
        "final_loss": final["loss"],
        "steps": final["step"],
    }
    return cell, seed, row, report


def _map(jobs: list, workers: int) -> list:
    if workers <= 1:
        return [_run_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell, jobs))


CONSISTENCY_METRICS = ("final_kl_forward", "final_kl_reverse", "final_J_gap", "final_loss")


def run_consistency(spec: Scenario, exact_tol: float = 1e-4) -> SweepResult:
    """Train var-exact (full enumeration) and var-inbatch (sampled, per B and mode) on every seed.

    Every cell gets its own training seed derived from (root seed, cell, seed).
    """
    cells: list[tuple[str, TrainConfig]] = [
        ("var-exact_enumerate", dataclasses.replace(spec.train, loss_kind="var-exact", sampling="enumerate"))
    ]
    for mode in spec.sampling_modes:
        for B in spec.batch_sizes:
            cfg = dataclasses.replace(spec.train, loss_kind="var-inbatch", sampling=mode, batch_size=B)
            cells.append((f"var-inbatch_{mode}_B{B}", cfg))
    jobs = [
        (name, s, spec.instance, spec.root_seed,
         dataclasses.replace(cfg, seed=derive_seed(spec.root_seed, "train", name, s)))
        for name, cfg in cells
        for s in spec.seeds
    ]
    results = _map(jobs, spec.workers)
    rows = [r[2] for r in results]
    runs = {(r[0], r[1]): r[3] for r in results}
    aggs = aggregate(rows, ("method", "sampling", "B"), CONSISTENCY_METRICS)

    checks = {
        f"var-exact final KL < {exact_tol:g} for every seed": all(
            r["final_kl_forward"] < exact_tol for r in rows if r["method"] == "var-exact"
        )
    }
    means = {(a["sampling"], a["B"]): a["final_kl_forward"] for a in aggs
             if a["row_type"] == "mean" and a["method"] == "var-inbatch"}
    lo, hi = min(spec.batch_sizes), max(spec.batch_sizes)
    if lo != hi:
        for mode in spec.sampling_modes:
            checks[f"var-inbatch {mode}: mean final KL at B={hi} <= B={lo}"] = means[(mode, hi)] <= means[(mode, lo)]
    return SweepResult(
        name=spec.name,
        axes={"B": list(spec.batch_sizes), "sampling": list(spec.sampling_modes), "seeds": list(spec.seeds)},
        rows=rows,
        aggregates=aggs,
        checks=checks,
        notes=[
            "batch-size sweep measured as final KL(pi*||pi_theta) and J gap versus B "
            "on synthetic instances (a reinterpretation of a benchmark ablation)",
            "var-exact uses full enumeration of (x, y) pairs each step; var-inbatch draws B pairs per step",
        ],
        runs=runs,
    )


def run_clip_distinction(
    rewards: Sequence[float] = (100.0, 99.0),
    temperature: float = 1.0,
    epsilon: float = 1e-3,
    beta: float = 1e-6,
    lr: float = 0.01,
    steps: int = 3000,
    tol: float = 1e-3,
) -> SweepResult:
    """Two responses, uniform pi_ref: compare converged R-LoL and VAR policies to their targets.

    R-LoL should settle at R_i / sum(R) and VAR at the optimal policy, whose
    odds are exp((R_1 - R_2) / temperature).
    """
    r = np.asarray(rewards, dtype=np.float64)
    if np.any(r <= 0):
        raise ValueError("clip distinction needs positive rewards (targets are R_i / sum R)")
    space = make_space(1, r.size, "uniform")
    table = RewardTable(r[None, :], temperature)
    targets = {
        "rlol": simplex_minimizer_weighted_sft(r),
        "var-exact": optimal_policy(space, table).probs[0],
    }
    base = TrainConfig(optimizer="adam", lr=lr, steps=steps, sampling="enumerate", eval_every=max(1, steps // 100))
    configs = {
        "rlol": dataclasses.replace(base, loss_kind="rlol", clip_epsilon=epsilon, rlol_beta=beta),
        "var-exact": dataclasses.replace(base, loss_kind="var-exact"),
    }
    rows, runs, checks = [], {}, {}
    for method, cfg in configs.items():
        report = train(space, table, cfg)
        achieved = report.policy.probs()[0]
        err = float(np.max(np.abs(achieved - targets[method])))
        row = {"row_type": "method", "method": method}
        for k in range(r.size):
            row[f"target_p{k + 1}"] = float(targets[method][k])
            row[f"achieved_p{k + 1}"] = float(achieved[k])
        row["abs_error"] = err
        row["within_tol"] = err <= tol
        rows.append(row)
        runs[(method, 0)] = report
        checks[f"{method} |achieved - target| <= {tol:g}"] = err <= tol
    return SweepResult(
        name="demo-clip",
        axes={"rewards": r.tolist(), "temperature": temperature, "epsilon": epsilon, "beta": beta},
        rows=rows,
        aggregates=[],
        checks=checks,
        notes=["clipped-ratio objective converges to reward-proportional probabilities; "
               "the variational objective converges to exp-reward odds"],
        runs=runs,
    )


def run_negative_weight_demo(
    n_responses: int = 4,
    lr: float = 100.0,
    steps: int = 5000,
    thresholds: Sequence[float] = (-1e2, -1e4),
    prob_threshold: float = 1e-8,
) -> SweepResult:
    """Weighted SFT with one negative coefficient versus the variational loss on one instance.

    The instance has one prompt, uniform pi_ref and rewards -1 on y0 and +1
    elsewhere. The weighted-SFT run uses the raw rewards as coefficients; the
    variational run uses exp-reward weights. Both use plain gradient descent.
    """
    space = make_space(1, n_responses, "uniform")
    values = np.ones((1, n_responses))
    values[0, 0] = -1.0
    rewards = RewardTable(values, 1.0)

    def probe(policy):
        return {"p_y0": float(policy.as_distribution(0)[0])}

    base = TrainConfig(optimizer="gd", lr=lr, steps=steps, sampling="enumerate", eval_every=1,
                       allow_divergence=True)
    wsft = train(space, rewards, dataclasses.replace(base, loss_kind="wsft-custom"), probe=probe)
    var = train(space, rewards, dataclasses.replace(base, loss_kind="var-exact"), probe=probe)

    wsft_loss_series = wsft.series("loss")
    var_loss_series = var.series("loss")
    final_p0 = wsft.final["p_y0"]
    checks = {f"weighted SFT loss crosses {t:g}": bool(np.any(wsft_loss_series < t)) for t in thresholds}
    checks[f"weighted SFT p(y0) < {prob_threshold:g} at termination"] = final_p0 < prob_threshold
    checks["variational loss never below 0"] = bool(np.min(var_loss_series) >= 0.0)
    rows = []
    for method, rep in (("wsft-custom", wsft), ("var-exact", var)):
        rows.append({
            "row_type": "method",
            "method": method,
            "steps": rep.final["step"],
            "stop_reason": rep.stop_reason,
            "final_loss": rep.final["loss"],
            "min_loss": float(np.min(rep.series("loss"))),
            "final_p_y0": rep.final["p_y0"],
        })
    return SweepResult(
        name="demo-negweight",
        axes={"n_responses": n_responses, "lr": lr, "steps": steps},
        rows=rows,
        aggregates=[],
        checks=checks,
        notes=["a negative coefficient makes weighted SFT unbounded below; exp-reward weights stay positive"],
        runs={("wsft-custom", 0): wsft, ("var-exact", 0): var},
    )


ESTIMATOR_METRICS = ("ratio", "unbiased_ratio")


def estimate_ratio(
    space: TaskSpace, rewards: RewardTable, x: int, responses: np.ndarray, mode: str
) -> tuple[float, float]:
    """In-batch Z_hat(x)/Z(x) for a single-prompt batch, plus the plain importance-sampling ratio.

    The plain estimate divides by B and the sampling probability of each
    response, so it is unbiased for the given mode.
    """
    batch = Batch(np.full(len(responses), x), responses)
    z = float(np.exp(log_partition(space, rewards)[x]))
    ratio = inbatch_partition(space, rewards, batch, 0) / z
    terms = space.ref_policy[x, responses] * np.exp(rewards.scaled()[x, responses])
    if mode == "uniform":
        q = np.full(len(responses), 1.0 / space.n_responses)
    elif mode == "reference":
        q = space.ref_policy[x, responses]
    else:
        return ratio, ratio
    return ratio, float(np.mean(terms / q)) / z


def run_estimator_study(spec: Scenario, n_instances: int = 1) -> SweepResult:
    """Monte-Carlo distribution of Z_hat/Z per (sampling mode, B), plus a full-enumeration row set."""
    rows = []
    for inst in range(n_instances):
        space, rewards = spec.instance.build(spec.root_seed, inst)
        n = space.n_responses
        for x in range(space.n_prompts):
            ratio, unbiased = estimate_ratio(space, rewards, x, np.arange(n), "enumerate")
            rows.append({"row_type": "seed", "sampling": "enumerate", "B": n, "instance": inst,
                         "seed": -1, "prompt": x, "ratio": ratio, "unbiased_ratio": unbiased})
        for mode in spec.sampling_modes:
            for B in spec.batch_sizes:
                for s in spec.seeds:
                    for x in range(space.n_prompts):
                        dist = np.full(n, 1.0 / n) if mode == "uniform" else space.ref_policy[x]
                        rng = np.random.default_rng(derive_seed(spec.root_seed, "estimator", inst, mode, B, s, x))
                        ys = rng.choice(n, size=B, p=dist)
                        ratio, unbiased = estimate_ratio(space, rewards, x, ys, mode)
                        rows.append({"row_type": "seed", "sampling": mode, "B": B, "instance": inst,
                                     "seed": s, "prompt": x, "ratio": ratio, "unbiased_ratio": unbiased})
    aggs = []
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["sampling"], r["B"]), []).append(r)
    for (mode, B), members in groups.items():
        ratios = np.array([m["ratio"] for m in members])
        unb = np.array([m["unbiased_ratio"] for m in members])
        aggs.append({
            "row_type": "aggregate", "sampling": mode, "B": B, "n": len(members),
            "mean_ratio": float(np.mean(ratios)),
            "rmse": float(np.sqrt(np.mean((ratios - 1.0) ** 2))),
            "min_ratio": float(np.min(ratios)),
            "max_ratio": float(np.max(ratios)),
            "mean_unbiased_ratio": float(np.mean(unb)),
            "rmse_unbiased": float(np.sqrt(np.mean((unb - 1.0) ** 2))),
        })
    rmse = {(a["sampling"], a["B"]): a["rmse"] for a in aggs}
    enum_err = max(abs(r["ratio"] - 1.0) for r in rows if r["sampling"] == "enumerate")
    checks = {"full enumeration |Z_hat/Z - 1| < 1e-12": enum_err < 1e-12}
    lo, hi = min(spec.batch_sizes), max(spec.batch_sizes)
    if lo != hi:
        for mode in spec.sampling_modes:
            checks[f"{mode}: RMSE(B={hi}) < RMSE(B={lo})"] = rmse[(mode, hi)] < rmse[(mode, lo)]
    return SweepResult(
        name="estimator-study",
        axes={"B": list(spec.batch_sizes), "sampling": list(spec.sampling_modes),
              "seeds": len(spec.seeds), "instances": n_instances},
        rows=rows,
        aggregates=aggs,
        checks=checks,
        notes=[
            "ratio = in-batch Z_hat(x)/Z(x) for single-prompt batches; its mean is B/|Y| under uniform sampling",
            "unbiased_ratio = plain importance-sampling estimate / Z, shown for comparison",
            "no target is asserted for the mean ratio",
        ],
    )


GRADCHECK_KINDS = ("var-inbatch", "var-exact", "wsft", "dpo", "rlol", "rlol-baseline", "bt")


def gradcheck_closures(space: TaskSpace, rewards: RewardTable, policy: TabularPolicy, seed: int,
                       batch_size: int = 32, n_triples: int = 64) -> dict:
    """One loss closure per kind, evaluated around ``policy``.

    R-LoL coefficients are frozen at ``policy`` before the closure is built.
    The ``bt`` closure differentiates the Bradley-Terry loss with respect to
    a reward table held in the logits slot.
    """
    batch = sample_batch(space, space.ref_policy, batch_size, derive_seed(seed, "batch"))
    triples = sample_preferences(space, rewards, n_triples, derive_seed(seed, "triples"))
    signed = np.random.default_rng(derive_seed(seed, "weights")).normal(size=batch_size)
    frozen = {
        flag: losses.rlol_coefficients(policy, space, rewards, batch, 0.2, 0.01, baseline=flag)
        for flag in (False, True)
    }
    return {
        "var-inbatch": lambda p: losses.var_loss(p, space, rewards, batch, "in-batch"),
        "var-exact": lambda p: losses.var_loss(p, space, rewards, batch, "exact"),
        "wsft": lambda p: losses.wsft_loss(p, batch, signed),
        "dpo": lambda p: losses.dpo_loss(p, space.ref_policy, triples, 0.5),
        "rlol": lambda p: losses.wsft_loss(p, batch, frozen[False]),
        "rlol-baseline": lambda p: losses.wsft_loss(p, batch, frozen[True]),
        "bt": lambda p: losses.LossEval(bt_loss(p.logits, triples), bt_grad(p.logits, triples)),
    }


def run_gradcheck(
    instance: InstanceSpec,
    seeds: Sequence[int] = range(5),
    root_seed: int = 0,
    batch_size: int = 32,
    step: float = 1e-5,
    tolerance: float = 1e-6,
) -> SweepResult:
    """Finite-difference check of every analytic gradient at random logits, per seed."""
    rows = []
    for s in seeds:
        space, rewards = instance.build(root_seed, ("gradcheck", s))
        rng = np.random.default_rng(derive_seed(root_seed, "gradcheck-logits", s))
        policy = TabularPolicy(rng.normal(size=space.shape))
        closures = gradcheck_closures(space, rewards, policy, derive_seed(root_seed, "gradcheck", s), batch_size)
        for kind, fn in closures.items():
            rep = losses.grad_check(fn, policy, tolerance, step=step)
            rows.append({
                "row_type": "seed", "loss": kind, "seed": s, "n_coords": len(rep.coords),
                "max_rel_error": rep.max_rel_error, "passed": rep.passed,
            })
    checks = {}
    for kind in dict.fromkeys(r["loss"] for r in rows):
        mine = [r for r in rows if r["loss"] == kind]
        checks[f"{kind}: max rel error < {tolerance:g} over {sum(r['n_coords'] for r in mine)} coords"] = all(
            r["passed"] for r in mine
        )
    return SweepResult(
        name="gradcheck",
        axes={"losses": list(GRADCHECK_KINDS), "seeds": list(seeds), "step": step},
        rows=rows,
        aggregates=[],
        checks=checks,
        notes=["relative error uses max(|analytic|, |numeric|, 1e-3) as denominator"],
    )


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(path: Path, rows: Iterable[dict]) -> None:
    rows = list(rows)
    columns: list[str] = []
    for r in rows:
        columns.extend(k for k in r if k not in columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) if c in r else "" for c in columns])


def emit_outputs(
    result: SweepResult,
    out_dir: str | os.PathLike,
    formats: Sequence[str] = ("csv", "summary", "records"),
) -> list[Path]:
    """Write ``<out>/<scenario>/summary.csv`` and friends; return the written paths.

    Formats: ``csv`` (per-seed rows then aggregate rows), ``summary``
    (JSON with axes, checks, notes and aggregates), ``records`` (one
    line-delimited run report per ``<grid-cell>/<seed>.records``) and
    ``plots`` (SVG curves; needs matplotlib).

    Raises:
        OSError: if the output directory cannot be created or written.
    """
    root = Path(out_dir) / result.name
    root.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        p = root / "summary.csv"
        write_table(p, result.rows + result.aggregates)
        written.append(p)
    if "summary" in formats:
        p = root / "summary.json"
        doc = {
            "scenario": result.name,
            "axes": result.axes,
            "passed": result.passed,
            "checks": result.checks,
            "notes": result.notes,
            "aggregates": result.aggregates,
        }
        with open(p, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
        written.append(p)
    if "records" in formats:
        for (cell, seed), report in result.runs.items():
            d = root / cell
            d.mkdir(exist_ok=True)
            p = d / f"{seed}.records"
            report.write(p)
            written.append(p)
    if "plots" in formats:
        written.extend(_plots(result, root))
    return written


def _plots(result: SweepResult, root: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    if result.runs:
        fig, ax = plt.subplots(figsize=(6, 4))
        metric = "loss" if result.name == "demo-negweight" else "kl_forward"
        for (cell, seed), rep in list(result.runs.items())[:40]:
            ys = rep.series(metric)
            if metric == "kl_forward":
                ys = np.maximum(ys, 1e-18)
            ax.plot(rep.series("step"), ys, lw=0.8, label=f"{cell}/{seed}")
        if metric == "kl_forward":
            ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel(metric)
        if len(result.runs) <= 8:
            ax.legend(fontsize=6)
        p = root / f"{metric}_vs_step.svg"
        fig.savefig(p, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(p)
    means = [a for a in result.aggregates if a.get("row_type") in ("mean", "aggregate")]
    ykey = "final_kl_forward" if any("final_kl_forward" in a for a in means) else "rmse"
    series: dict[str, list[tuple[int, float]]] = {}
    for a in means:
        if a.get("sampling") == "enumerate" or ykey not in a:
            continue
        series.setdefault(a["sampling"], []).append((a["B"], a[ykey]))
    if series:
        fig, ax = plt.subplots(figsize=(5, 4))
        for mode, pts in series.items():
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("B")
        ax.set_ylabel(ykey)
        ax.legend()
        p = root / f"{ykey}_vs_B.svg"
        fig.savefig(p, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(p)
    return written
