"""Reward tables: synthetic generation and Bradley-Terry fitting."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from os import PathLike
from typing import Sequence

import numpy as np
from scipy.special import expit

from .space import PreferenceTriple, TaskSpace

logger = logging.getLogger(__name__)

TABLE_KIND = "varlab.rewards"


@dataclass(frozen=True)
class RewardTable:
    """Reward matrix r[x][y] plus the temperature used in exp(r / temperature)."""

    values: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"reward values must be a matrix, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("reward values must be finite")
        if not (self.temperature > 0 and np.isfinite(self.temperature)):
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "temperature", float(self.temperature))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def scaled(self) -> np.ndarray:
        """r / temperature."""
        return self.values / self.temperature

    def with_temperature(self, temperature: float) -> RewardTable:
        return RewardTable(self.values, temperature)


def synth_rewards(
    space: TaskSpace,
    kind: str = "iid-gaussian",
    *,
    sigma: float = 1.0,
    gap: float = 1.0,
    c: float = 0.0,
    temperature: float = 1.0,
    seed: int = 0,
) -> RewardTable:
    """Synthetic rewards.

    ``iid-gaussian`` draws N(0, sigma^2) entries; ``planted-best`` puts ``gap``
    on one seeded response per prompt and 0 elsewhere; ``constant`` fills ``c``.
    """
    shape = space.shape
    rng = np.random.default_rng(seed)
    if kind == "iid-gaussian":
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        values = rng.normal(0.0, sigma, size=shape)
    elif kind == "planted-best":
        if gap < 0:
            raise ValueError("gap must be non-negative")
        values = np.zeros(shape)
        best = rng.integers(0, shape[1], size=shape[0])
        values[np.arange(shape[0]), best] = gap
    elif kind == "constant":
        values = np.full(shape, float(c))
    else:
        raise ValueError(f"unknown reward kind {kind!r}")
    return RewardTable(values, temperature)


def _triple_arrays(data: Sequence[PreferenceTriple]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(data) == 0:
        raise ValueError("preference data is empty")
    arr = np.array([(t.prompt, t.chosen, t.rejected) for t in data], dtype=np.int64)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def _bt_value_and_grad(values: np.ndarray, xs, yw, yl) -> tuple[float, np.ndarray]:
    margin = values[xs, yw] - values[xs, yl]
    loss = float(np.mean(np.logaddexp(0.0, -margin)))
    coef = -expit(-margin) / margin.size
    grad = np.zeros_like(values)
    np.add.at(grad, (xs, yw), coef)
    np.add.at(grad, (xs, yl), -coef)
    return loss, grad


def bt_loss(rewards: RewardTable | np.ndarray, data: Sequence[PreferenceTriple]) -> float:
    """Mean Bradley-Terry negative log-likelihood -log sigmoid(r_w - r_l)."""
    values = rewards.values if isinstance(rewards, RewardTable) else np.asarray(rewards)
    xs, yw, yl = _triple_arrays(data)
    return float(np.mean(np.logaddexp(0.0, -(values[xs, yw] - values[xs, yl]))))


def bt_grad(rewards: RewardTable | np.ndarray, data: Sequence[PreferenceTriple]) -> np.ndarray:
    values = rewards.values if isinstance(rewards, RewardTable) else np.asarray(rewards)
    return _bt_value_and_grad(values, *_triple_arrays(data))[1]


def bt_fit(
    space: TaskSpace,
    data: Sequence[PreferenceTriple],
    l2: float = 1e-3,
    steps: int = 2000,
    lr: float = 1.0,
    seed: int = 0,
    *,
    batch_size: int | None = None,
    temperature: float = 1.0,
) -> RewardTable:
    """Fit a reward table by gradient descent on bt_loss + l2 * ||r||^2.

    Starts from zeros. With ``batch_size`` set, each step uses a seeded
    minibatch of triples; otherwise full-batch. The iterate with the lowest
    full-data objective is returned, so the result never scores worse than
    the zero table.

    Raises:
        FloatingPointError: if the loss or gradient becomes non-finite.
    """
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    if lr <= 0:
        raise ValueError("lr must be positive")
    xs, yw, yl = _triple_arrays(data)
    for t in data:
        t.check(space)
    rng = np.random.default_rng(seed)

    def objective(v):
        loss, grad = _bt_value_and_grad(v, xs, yw, yl)
        return loss + l2 * float(np.sum(v * v)), grad + 2.0 * l2 * v

    values = np.zeros(space.shape)
    best_obj, _ = objective(values)
    best = values.copy()
    for step in range(steps):
        if batch_size is None:
            obj, grad = objective(values)
        else:
            idx = rng.integers(0, xs.size, size=batch_size)
            _, g = _bt_value_and_grad(values, xs[idx], yw[idx], yl[idx])
            grad = g + 2.0 * l2 * values
            obj = objective(values)[0]
        if not (np.isfinite(obj) and np.all(np.isfinite(grad))):
            raise FloatingPointError(f"bt_fit: non-finite objective {obj} at step {step} (lr={lr})")
        if obj < best_obj:
            best_obj, best = obj, values.copy()
        values = values - lr * grad
    final_obj, _ = objective(values)
    if np.isfinite(final_obj) and final_obj < best_obj:
        best_obj, best = final_obj, values
    logger.debug("bt_fit: objective %.6g after %d steps", best_obj, steps)
    return RewardTable(best, temperature)


def sample_preferences(
    space: TaskSpace, rewards: RewardTable, n: int, seed: int
) -> list[PreferenceTriple]:
    """Draw n triples: uniform prompt, two distinct uniform responses, BT-sampled winner."""
    rng = np.random.default_rng(seed)
    xs = rng.integers(0, space.n_prompts, size=n)
    a = rng.integers(0, space.n_responses, size=n)
    b = (a + rng.integers(1, space.n_responses, size=n)) % space.n_responses
    p_a = expit(rewards.values[xs, a] - rewards.values[xs, b])
    a_wins = rng.random(n) < p_a
    return [
        PreferenceTriple(int(x), int(ya if w else yb), int(yb if w else ya))
        for x, ya, yb, w in zip(xs, a, b, a_wins)
    ]


def save_rewards(path: str | PathLike, rewards: RewardTable) -> None:
    doc = {
        "kind": TABLE_KIND,
        "version": 1,
        "shape": list(rewards.shape),
        "temperature": rewards.temperature,
        "values": rewards.values.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_rewards(path: str | PathLike) -> RewardTable:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("kind") != TABLE_KIND:
        raise ValueError(f"{path}: not a reward table")
    values = np.array(doc["values"], dtype=np.float64)
    if list(values.shape) != doc["shape"]:
        raise ValueError(f"{path}: shape header {doc['shape']} != data shape {list(values.shape)}")
    return RewardTable(values, doc["temperature"])
