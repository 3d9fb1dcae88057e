"""Tabular softmax policy pi_theta(y|x) = softmax(theta[x])[y]."""

from __future__ import annotations

import json
from dataclasses import dataclass
from os import PathLike

import numpy as np

from ._math import log_softmax
from .space import TaskSpace

CHECKPOINT_KIND = "varlab.policy"


@dataclass
class TabularPolicy:
    """Logit matrix theta[x][y] in nats. Mutable: the trainer owns updates."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.array(self.logits, dtype=np.float64)
        if self.logits.ndim != 2:
            raise ValueError(f"logits must be a matrix, got shape {self.logits.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape

    def log_probs(self) -> np.ndarray:
        """Row-wise log-softmax of the whole logit matrix."""
        return log_softmax(self.logits, axis=1)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def log_prob(self, x: int, y: int) -> float:
        if not (0 <= x < self.shape[0] and 0 <= y < self.shape[1]):
            raise IndexError(f"({x}, {y}) out of range for policy shape {self.shape}")
        return float(log_softmax(self.logits[x])[y])

    def as_distribution(self, x: int) -> np.ndarray:
        if not 0 <= x < self.shape[0]:
            raise IndexError(f"prompt {x} out of range for policy shape {self.shape}")
        return np.exp(log_softmax(self.logits[x]))

    def copy(self) -> TabularPolicy:
        return TabularPolicy(self.logits.copy())


def init_from_reference(space: TaskSpace) -> TabularPolicy:
    return TabularPolicy(np.log(space.ref_policy))


def init_zeros(space: TaskSpace) -> TabularPolicy:
    return TabularPolicy(np.zeros(space.shape))


def save_policy(path: str | PathLike, policy: TabularPolicy) -> None:
    """Write the logit matrix as JSON. Float reprs round-trip exactly."""
    doc = {
        "kind": CHECKPOINT_KIND,
        "version": 1,
        "shape": list(policy.shape),
        "logits": policy.logits.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_policy(path: str | PathLike) -> TabularPolicy:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path}: not a policy checkpoint")
    logits = np.array(doc["logits"], dtype=np.float64)
    if list(logits.shape) != doc["shape"]:
        raise ValueError(f"{path}: shape header {doc['shape']} != data shape {list(logits.shape)}")
    return TabularPolicy(logits)
