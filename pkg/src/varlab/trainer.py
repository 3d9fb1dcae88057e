"""Optimization loop over a TabularPolicy for every loss in the zoo."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from os import PathLike
from typing import Callable, Sequence

import numpy as np

from . import losses
from .oracle import kl_rows_log, optimal_policy, rlhf_objective
from .policy import TabularPolicy, init_from_reference, init_zeros
from .reward import RewardTable
from .space import Batch, PreferenceTriple, TaskSpace, derive_seed, enumerate_batch, sample_batch

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "varlab.run/1"

LOSS_KINDS = ("var-inbatch", "var-exact", "dpo", "rlol", "wsft-custom")
OPTIMIZERS = ("adam", "gd")
SAMPLING_MODES = ("enumerate", "uniform", "reference")
INIT_KINDS = ("reference", "zeros")


@dataclass
class TrainConfig:
    """One training run.

    ``sampling`` picks how each step's batch is formed: ``enumerate`` uses
    every (x, y) pair once (``batch_size`` is ignored), ``uniform`` and
    ``reference`` draw ``batch_size`` pairs with responses from the uniform
    distribution or from pi_ref. DPO minibatches are drawn from the supplied
    triples instead (all of them under ``enumerate``).
    """

    loss_kind: str = "var-inbatch"
    optimizer: str = "adam"
    lr: float = 0.1
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    adam_grad_floor: float = 1e-14
    dpo_beta: float = 0.1
    clip_epsilon: float = 0.2
    rlol_beta: float = 0.0
    rlol_baseline: bool = False
    sampling: str = "uniform"
    init: str = "reference"
    eval_every: int = 100
    converge_kl: float | None = None
    allow_divergence: bool = False
    divergence_cap: float = -1e6

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("invalid TrainConfig: " + "; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        if self.loss_kind not in LOSS_KINDS:
            errors.append(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.optimizer not in OPTIMIZERS:
            errors.append(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.sampling not in SAMPLING_MODES:
            errors.append(f"sampling must be one of {SAMPLING_MODES}, got {self.sampling!r}")
        if self.init not in INIT_KINDS:
            errors.append(f"init must be one of {INIT_KINDS}, got {self.init!r}")
        if not self.lr > 0:
            errors.append("lr must be > 0")
        if self.steps < 1:
            errors.append("steps must be >= 1")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.eval_every < 1:
            errors.append("eval_every must be >= 1")
        if self.adam_grad_floor < 0:
            errors.append("adam_grad_floor must be >= 0")
        if not self.dpo_beta > 0:
            errors.append("dpo_beta must be > 0")
        if not 0 < self.clip_epsilon < 1:
            errors.append("clip_epsilon must lie in (0, 1)")
        if self.rlol_beta < 0:
            errors.append("rlol_beta must be >= 0")
        return errors

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class GradientDescent:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        params -= self.lr * grad


class Adam:
    """Adam with bias correction.

    Gradient entries with magnitude at most ``grad_floor`` are treated as 0.
    At an exact stationary point the computed gradient is pure round-off
    (~1e-17), which plain Adam would rescale into steps of size ~lr.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 grad_floor: float = 0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.grad_floor = grad_floor
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self.grad_floor > 0:
            grad = np.where(np.abs(grad) <= self.grad_floor, 0.0, grad)
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "gd":
        return GradientDescent(config.lr)
    return Adam(config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps, config.adam_grad_floor)


@dataclass
class RunReport:
    config: dict
    records: list[dict] = field(default_factory=list)
    policy: TabularPolicy | None = None
    diverged: bool = False
    converged: bool = False
    stop_reason: str = "budget"
    checkpoint: str | None = None

    METRICS = ("loss", "kl_forward", "kl_reverse", "J", "J_gap", "grad_norm")

    @property
    def final(self) -> dict:
        return self.records[-1]

    def series(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def metric_rows(self) -> list[tuple]:
        """Records without wall time; identical across reruns of the same config."""
        return [(r["step"],) + tuple(r[m] for m in self.METRICS) for r in self.records]

    def summary(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "type": "summary",
            "config": self.config,
            "n_records": len(self.records),
            "final": {k: v for k, v in self.final.items() if k != "wall_time"} if self.records else None,
            "diverged": self.diverged,
            "converged": self.converged,
            "stop_reason": self.stop_reason,
            "checkpoint": self.checkpoint,
        }

    def write(self, path: str | PathLike, include_wall_time: bool = True) -> None:
        """Line-delimited JSON: one record per eval point, then a summary line."""
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                rec = {"schema": REPORT_SCHEMA, "type": "record"}
                rec.update(r if include_wall_time else {k: v for k, v in r.items() if k != "wall_time"})
                fh.write(json.dumps(rec) + "\n")
            fh.write(json.dumps(self.summary()) + "\n")


def read_report(path: str | PathLike) -> tuple[list[dict], dict]:
    records, summary = [], None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            doc = json.loads(line)
            if doc.get("schema") != REPORT_SCHEMA:
                raise ValueError(f"{path}: unknown schema {doc.get('schema')!r}")
            if doc["type"] == "record":
                records.append(doc)
            else:
                summary = doc
    return records, summary


class TrainingError(RuntimeError):
    def __init__(self, message: str, report: RunReport):
        super().__init__(message)
        self.report = report


def evaluate(space: TaskSpace, rewards: RewardTable, policy: TabularPolicy) -> dict:
    """KL(pi*||pi), KL(pi||pi*), J(pi) and J(pi*) - J(pi); KLs averaged over prompts."""
    opt = optimal_policy(space, rewards)
    logp = policy.log_probs()
    log_opt = opt.log_probs
    j = rlhf_objective(space, policy, rewards)
    j_opt = rlhf_objective(space, opt.probs, rewards)
    return {
        "kl_forward": float(np.mean(kl_rows_log(log_opt, logp))),
        "kl_reverse": float(np.mean(kl_rows_log(logp, log_opt))),
        "J": j,
        "J_gap": j_opt - j,
    }


def _batch_for_step(space: TaskSpace, config: TrainConfig, step: int) -> Batch:
    if config.sampling == "enumerate":
        return enumerate_batch(space)
    if config.sampling == "uniform":
        dist = np.full(space.shape, 1.0 / space.n_responses)
    else:
        dist = space.ref_policy
    return sample_batch(space, dist, config.batch_size, derive_seed(config.seed, "batch", step))


def _loss_closure(space, rewards, config, triples, weights):
    """Return f(policy, step) -> LossEval for the configured loss."""
    kind = config.loss_kind
    if kind == "dpo":
        if not triples:
            raise ValueError("dpo training needs preference triples")
        triples = list(triples)

        def dpo(policy, step):
            if config.sampling == "enumerate":
                chunk = triples
            else:
                rng = np.random.default_rng(derive_seed(config.seed, "triples", step))
                chunk = [triples[i] for i in rng.integers(0, len(triples), size=config.batch_size)]
            return losses.dpo_loss(policy, space.ref_policy, chunk, config.dpo_beta)

        return dpo

    if kind == "wsft-custom":
        table = rewards.values if weights is None else np.asarray(weights, dtype=np.float64)
        if table.shape != space.shape:
            raise ValueError(f"weight table shape {table.shape} != space shape {space.shape}")

    def batched(policy, step):
        batch = _batch_for_step(space, config, step)
        if kind == "var-inbatch":
            return losses.var_loss(policy, space, rewards, batch, "in-batch")
        if kind == "var-exact":
            return losses.var_loss(policy, space, rewards, batch, "exact")
        if kind == "rlol":
            return losses.rlol_loss(
                policy, None, space, rewards, batch,
                config.clip_epsilon, config.rlol_beta, config.rlol_baseline,
            )
        return losses.wsft_loss(policy, batch, table[batch.prompts, batch.responses])

    return batched


def train(
    space: TaskSpace,
    rewards: RewardTable,
    config: TrainConfig,
    triples: Sequence[PreferenceTriple] | None = None,
    weights: np.ndarray | None = None,
    policy: TabularPolicy | None = None,
    probe: Callable[[TabularPolicy], dict] | None = None,
) -> RunReport:
    """Run ``config.steps`` optimizer updates and record metrics every ``eval_every`` steps.

    Step 0 and the final iterate are always recorded. ``weights`` is the
    per-(x, y) coefficient table for ``wsft-custom`` (defaults to the raw
    rewards). ``probe`` adds extra fields to every record.

    A non-finite loss or gradient raises TrainingError unless
    ``allow_divergence`` is set, in which case the run stops and is flagged.
    Divergence runs also stop once the loss falls to ``divergence_cap``.
    """
    if rewards.shape != space.shape:
        raise ValueError(f"reward shape {rewards.shape} != space shape {space.shape}")
    if policy is None:
        policy = init_from_reference(space) if config.init == "reference" else init_zeros(space)
    else:
        policy = policy.copy()
    loss_fn = _loss_closure(space, rewards, config, triples, weights)
    opt = make_optimizer(config)
    report = RunReport(config=config.to_dict(), policy=policy)
    start = time.perf_counter()

    for step in range(config.steps + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            ev = loss_fn(policy, step)
        finite = np.isfinite(ev.value) and np.all(np.isfinite(ev.grad))
        capped = config.allow_divergence and ev.value <= config.divergence_cap
        if step % config.eval_every == 0 or step == config.steps or not finite or capped:
            rec = {"step": step, "loss": float(ev.value)}
            with np.errstate(over="ignore", invalid="ignore"):
                rec.update(evaluate(space, rewards, policy))
            rec["grad_norm"] = float(np.linalg.norm(ev.grad))
            if probe is not None:
                rec.update(probe(policy))
            rec["wall_time"] = time.perf_counter() - start
            report.records.append(rec)
            if config.converge_kl is not None and rec["kl_forward"] < config.converge_kl:
                report.converged = True
                report.stop_reason = "converged"
                break
        if not finite:
            report.diverged = True
            report.stop_reason = "non-finite"
            if not config.allow_divergence:
                raise TrainingError(
                    f"non-finite loss/gradient at step {step} (loss={ev.value}, "
                    f"loss_kind={config.loss_kind}, lr={config.lr})",
                    report,
                )
            break
        if capped:
            report.diverged = True
            report.stop_reason = "divergence-cap"
            break
        if step == config.steps:
            break
        opt.step(policy.logits, ev.grad)

    logger.debug("train %s: %s after %d records", config.loss_kind, report.stop_reason, len(report.records))
    return report
