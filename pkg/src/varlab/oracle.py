"""Exact quantities on finite spaces.

Everything here is computed by enumeration in double precision and serves as
ground truth for the approximate losses and for training diagnostics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from os import PathLike

import numpy as np

from ._math import logsumexp
from .policy import TabularPolicy
from .reward import RewardTable
from .space import TaskSpace


class SupportError(ValueError):
    """q vanishes somewhere p has mass."""


@dataclass(frozen=True)
class OptimalPolicy:
    probs: np.ndarray
    partition: np.ndarray
    log_partition: np.ndarray

    @property
    def log_probs(self) -> np.ndarray:
        return np.log(self.probs)


def _check_shapes(space: TaskSpace, rewards: RewardTable) -> None:
    if rewards.shape != space.shape:
        raise ValueError(f"reward shape {rewards.shape} != space shape {space.shape}")


def log_partition(space: TaskSpace, rewards: RewardTable) -> np.ndarray:
    """log Z(x) = logsumexp_y(log pi_ref(y|x) + r(x,y)/lambda) for every prompt."""
    _check_shapes(space, rewards)
    return logsumexp(space.log_ref + rewards.scaled(), axis=1)


def exact_partition(space: TaskSpace, rewards: RewardTable, x: int) -> float:
    space.check_prompt(x)
    return float(np.exp(log_partition(space, rewards)[x]))


def optimal_policy(space: TaskSpace, rewards: RewardTable) -> OptimalPolicy:
    """pi*(y|x) proportional to pi_ref(y|x) exp(r(x,y)/lambda)."""
    logits = space.log_ref + rewards.scaled()
    logz = logsumexp(logits, axis=1)
    probs = np.exp(logits - logz[:, None])
    # exp(log Z) overflows for large rewards; the normalized probs never do.
    with np.errstate(over="ignore"):
        z = np.exp(logz)
    return OptimalPolicy(probs, z, logz)


def kl(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats, with 0 log 0 = 0.

    Raises:
        SupportError: naming the first index where p > 0 but q == 0.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    mask = p > 0
    bad = np.flatnonzero(mask & (q <= 0))
    if bad.size:
        raise SupportError(f"q has no mass at index {int(bad[0])} where p = {p[bad[0]]}")
    return max(0.0, float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask])))))


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL for strictly positive matrices (round-off clamped at 0)."""
    return np.maximum(np.sum(p * (np.log(p) - np.log(q)), axis=1), 0.0)


def kl_rows_log(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    return np.maximum(np.sum(np.exp(logp) * (logp - logq), axis=1), 0.0)


def rlhf_objective(space: TaskSpace, policy: TabularPolicy | np.ndarray, rewards: RewardTable) -> float:
    """mean_x [ E_{pi}[r] - lambda * KL(pi(.|x) || pi_ref(.|x)) ]."""
    _check_shapes(space, rewards)
    if isinstance(policy, TabularPolicy):
        logp = policy.log_probs()
    else:
        logp = np.log(np.asarray(policy, dtype=np.float64))
    p = np.exp(logp)
    expected = np.sum(p * rewards.values, axis=1)
    penalty = rewards.temperature * kl_rows_log(logp, space.log_ref)
    return float(np.mean(expected - penalty))


def rlhf_objective_batch(space: TaskSpace, probs: np.ndarray, rewards: RewardTable) -> np.ndarray:
    """Vectorized J for a stack of policies shaped (k, n_prompts, n_responses)."""
    probs = np.asarray(probs, dtype=np.float64)
    logp = np.log(probs)
    expected = np.sum(probs * rewards.values, axis=2)
    penalty = rewards.temperature * np.sum(probs * (logp - space.log_ref), axis=2)
    return np.mean(expected - penalty, axis=1)


def simplex_minimizer_weighted_sft(weights: np.ndarray) -> np.ndarray:
    """argmin over the simplex of -sum_y w_y log p_y, which is w / sum(w)."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights must not all be zero")
    return w / total


def oracle_report(space: TaskSpace, rewards: RewardTable) -> dict:
    opt = optimal_policy(space, rewards)
    return {
        "kind": "varlab.oracle",
        "version": 1,
        "shape": list(space.shape),
        "temperature": rewards.temperature,
        "log_partition": opt.log_partition.tolist(),
        "partition": opt.partition.tolist(),
        "optimal_policy": opt.probs.tolist(),
        "J_optimal": rlhf_objective(space, opt.probs, rewards),
        "J_reference": rlhf_objective(space, space.ref_policy, rewards),
        "kl_optimal_to_reference": kl_rows(opt.probs, space.ref_policy).tolist(),
        "kl_reference_to_optimal": kl_rows(space.ref_policy, opt.probs).tolist(),
    }


def write_oracle_report(path: str | PathLike, space: TaskSpace, rewards: RewardTable) -> dict:
    report = oracle_report(space, rewards)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    return report
