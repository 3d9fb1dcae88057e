"""Losses over a TabularPolicy, each returning a value and d(loss)/d(logits).

All losses are means over the batch. Coefficients multiplying log pi_theta
(variational weights, R-LoL clipped-ratio coefficients) are constants with
respect to the logits they are differentiated against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
from scipy.special import expit

from ._math import logsumexp
from .oracle import optimal_policy
from .policy import TabularPolicy
from .reward import RewardTable
from .space import Batch, PreferenceTriple, TaskSpace

ZMode = Literal["in-batch", "exact"]


@dataclass
class LossEval:
    value: float
    grad: np.ndarray


@dataclass(frozen=True)
class WeightedBatch:
    batch: Batch
    weights: np.ndarray
    z_estimates: np.ndarray
    z_mode: ZMode
    log_z: np.ndarray = field(repr=False, default=None)


def inbatch_log_partition(space: TaskSpace, rewards: RewardTable, batch: Batch) -> np.ndarray:
    """log Z_hat(x_i) for every i: logsumexp_j(log pi_ref(y_j|x_i) + r(x_i,y_j)/lambda).

    The sum runs over every response in the batch, including those paired
    with other prompts, and counts duplicates with multiplicity.
    """
    xs, ys = batch.prompts, batch.responses
    terms = space.log_ref[np.ix_(xs, ys)] + rewards.scaled()[np.ix_(xs, ys)]
    return logsumexp(terms, axis=1)


def inbatch_partition(space: TaskSpace, rewards: RewardTable, batch: Batch, i: int) -> float:
    if not 0 <= i < len(batch):
        raise IndexError(f"batch index {i} out of range for batch of {len(batch)}")
    xi = int(batch.prompts[i])
    terms = space.log_ref[xi, batch.responses] + rewards.scaled()[xi, batch.responses]
    return float(np.exp(logsumexp(terms)))


def var_weights(
    space: TaskSpace, rewards: RewardTable, batch: Batch, z_mode: ZMode = "in-batch"
) -> WeightedBatch:
    """w_i = pi_ref(y_i|x_i) exp(r(x_i,y_i)/lambda) / Z(x_i), Z exact or in-batch."""
    batch.check(space)
    xs, ys = batch.prompts, batch.responses
    log_num = space.log_ref[xs, ys] + rewards.scaled()[xs, ys]
    if z_mode == "in-batch":
        log_z = inbatch_log_partition(space, rewards, batch)
    elif z_mode == "exact":
        log_z = optimal_policy(space, rewards).log_partition[xs]
    else:
        raise ValueError(f"unknown z_mode {z_mode!r}")
    weights = np.exp(log_num - log_z)
    with np.errstate(over="ignore"):
        z = np.exp(log_z)
    return WeightedBatch(batch, weights, z, z_mode, log_z)


def wsft_loss(policy: TabularPolicy, batch: Batch, weights: np.ndarray) -> LossEval:
    """-(1/B) sum_i w_i log pi_theta(y_i|x_i), weights held constant."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(batch),):
        raise ValueError(f"expected {len(batch)} weights, got shape {w.shape}")
    xs, ys = batch.prompts, batch.responses
    B = len(batch)
    logp = policy.log_probs()
    value = -float(np.dot(w, logp[xs, ys])) / B
    # d/dtheta[x,y'] of -log pi(y|x) is pi(y'|x) - 1[y'=y]
    row_mass = np.zeros(policy.shape[0])
    np.add.at(row_mass, xs, w)
    grad = row_mass[:, None] * np.exp(logp)
    np.add.at(grad, (xs, ys), -w)
    grad /= B
    return LossEval(value, grad)


def var_loss(
    policy: TabularPolicy,
    space: TaskSpace,
    rewards: RewardTable,
    batch: Batch,
    z_mode: ZMode = "in-batch",
) -> LossEval:
    return wsft_loss(policy, batch, var_weights(space, rewards, batch, z_mode).weights)


def dpo_loss(
    policy: TabularPolicy,
    ref_policy: np.ndarray,
    triples: Sequence[PreferenceTriple],
    beta: float = 0.1,
) -> LossEval:
    """Mean of -log sigmoid(beta * (chosen log-ratio - rejected log-ratio))."""
    if len(triples) == 0:
        raise ValueError("DPO needs at least one preference triple")
    if beta <= 0:
        raise ValueError("beta must be positive")
    arr = np.array([(t.prompt, t.chosen, t.rejected) for t in triples], dtype=np.int64)
    xs, yw, yl = arr[:, 0], arr[:, 1], arr[:, 2]
    logp = policy.log_probs()
    log_ref = np.log(np.asarray(ref_policy, dtype=np.float64))
    margin = beta * ((logp[xs, yw] - log_ref[xs, yw]) - (logp[xs, yl] - log_ref[xs, yl]))
    n = xs.size
    value = float(np.mean(np.logaddexp(0.0, -margin)))
    # the softmax normalizer cancels in the log-ratio difference
    coef = -beta * expit(-margin) / n
    grad = np.zeros(policy.shape)
    np.add.at(grad, (xs, yw), coef)
    np.add.at(grad, (xs, yl), -coef)
    return LossEval(value, grad)


def rlol_coefficients(
    policy: TabularPolicy,
    space: TaskSpace,
    rewards: RewardTable,
    batch: Batch,
    epsilon: float = 0.2,
    beta: float = 0.0,
    baseline: bool = False,
) -> np.ndarray:
    """eta_i = R_i * clip(pi_theta / pi_ref, 1 - eps, 1 + eps) - beta at the current iterate.

    With ``baseline`` the reward is replaced by the advantage
    r(x,y) - E_{pi_ref}[r(x,.)] (the A-LoL variant).
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    xs, ys = batch.prompts, batch.responses
    values = rewards.values
    if baseline:
        values = values - np.sum(space.ref_policy * values, axis=1, keepdims=True)
    ratio = np.exp(policy.log_probs()[xs, ys] - space.log_ref[xs, ys])
    return values[xs, ys] * np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) - beta


def rlol_loss(
    policy: TabularPolicy,
    ref_policy: np.ndarray | None,
    space: TaskSpace,
    rewards: RewardTable,
    batch: Batch,
    epsilon: float = 0.2,
    beta: float = 0.0,
    baseline: bool = False,
) -> LossEval:
    """Clipped R-LoL with the ratio frozen at the current iterate.

    ``ref_policy`` overrides the space's reference distribution when given.
    """
    if ref_policy is not None:
        space = TaskSpace(ref_policy)
    coef = rlol_coefficients(policy, space, rewards, batch, epsilon, beta, baseline)
    return wsft_loss(policy, batch, coef)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    coords: list[tuple[int, int]]
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def worst(self, k: int = 5) -> list[tuple[tuple[int, int], float, float, float]]:
        order = np.argsort(-self.rel_errors)[:k]
        return [
            (self.coords[i], float(self.analytic[i]), float(self.numeric[i]), float(self.rel_errors[i]))
            for i in order
        ]

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAILED"
        lines = [
            f"grad check {status}: max rel error {self.max_rel_error:.3e} "
            f"(tol {self.tolerance:.1e}) over {len(self.coords)} coords"
        ]
        if not self.passed:
            for c, a, n, e in self.worst():
                lines.append(f"  theta{list(c)}: analytic {a:.10e} numeric {n:.10e} rel {e:.3e}")
        return "\n".join(lines)


def grad_check(
    loss_fn: Callable[[TabularPolicy], LossEval],
    policy: TabularPolicy,
    tolerance: float = 1e-6,
    *,
    step: float = 1e-5,
    n_coords: int | None = None,
    seed: int = 0,
    scale_floor: float = 1e-3,
) -> GradCheckReport:
    """Central finite differences against the analytic gradient.

    The relative error at a coordinate is ``|a - n| / max(|a|, |n|, scale_floor)``;
    the floor keeps round-off on near-zero gradient entries from dominating.
    Loss closures with frozen coefficients must compute them once, outside
    ``loss_fn``.
    """
    base = policy.logits
    analytic_full = loss_fn(policy).grad
    all_coords = [(i, j) for i in range(base.shape[0]) for j in range(base.shape[1])]
    if n_coords is not None and n_coords < len(all_coords):
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(all_coords), size=n_coords, replace=False))
        coords = [all_coords[k] for k in pick]
    else:
        coords = all_coords
    analytic = np.array([analytic_full[c] for c in coords])
    numeric = np.empty(len(coords))
    for k, c in enumerate(coords):
        plus = base.copy()
        plus[c] += step
        minus = base.copy()
        minus[c] -= step
        numeric[k] = (loss_fn(TabularPolicy(plus)).value - loss_fn(TabularPolicy(minus)).value) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale_floor)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(float(rel.max()), tolerance, coords, analytic, numeric, rel)
