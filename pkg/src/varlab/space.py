"""Finite prompt/response universes, preference data and batch sampling."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from os import PathLike
from typing import Iterable, Literal

import numpy as np

REF_FLOOR = 1e-8

RefKind = Literal["uniform", "random-dirichlet"]


def derive_seed(root: int, *coords: object) -> int:
    """Derive a 64-bit child seed from a root seed and cell coordinates.

    The child is the first 8 bytes of ``blake2b(repr((root, *coords)))``, so
    it depends only on the values and never on scheduling order.
    """
    key = repr((int(root),) + tuple(coords)).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TaskSpace:
    """Prompt set X, response set Y and a reference policy pi_ref(y|x)."""

    ref_policy: np.ndarray

    def __post_init__(self):
        ref = np.array(self.ref_policy, dtype=np.float64)
        if ref.ndim != 2 or ref.shape[0] < 1 or ref.shape[1] < 1:
            raise ValueError(f"ref_policy must be a non-empty matrix, got shape {ref.shape}")
        if not np.all(np.isfinite(ref)) or np.any(ref <= 0):
            raise ValueError("ref_policy entries must be finite and strictly positive")
        err = np.max(np.abs(ref.sum(axis=1) - 1.0))
        if err > 1e-12:
            raise ValueError(f"ref_policy rows must sum to 1 (max deviation {err:.3g})")
        object.__setattr__(self, "ref_policy", _frozen(ref))

    @property
    def n_prompts(self) -> int:
        return self.ref_policy.shape[0]

    @property
    def n_responses(self) -> int:
        return self.ref_policy.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.ref_policy.shape

    @property
    def log_ref(self) -> np.ndarray:
        return np.log(self.ref_policy)

    def check_prompt(self, x: int) -> None:
        if not 0 <= x < self.n_prompts:
            raise IndexError(f"prompt index {x} out of range [0, {self.n_prompts})")

    def check_response(self, y: int) -> None:
        if not 0 <= y < self.n_responses:
            raise IndexError(f"response index {y} out of range [0, {self.n_responses})")


@dataclass(frozen=True)
class PreferenceTriple:
    prompt: int
    chosen: int
    rejected: int

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise ValueError(f"chosen == rejected in {self}")

    def check(self, space: TaskSpace) -> None:
        space.check_prompt(self.prompt)
        space.check_response(self.chosen)
        space.check_response(self.rejected)


@dataclass(frozen=True)
class Batch:
    """Ordered (prompt, response) pairs. Duplicates are allowed."""

    prompts: np.ndarray
    responses: np.ndarray

    def __post_init__(self):
        xs = np.array(self.prompts, dtype=np.int64).reshape(-1)
        ys = np.array(self.responses, dtype=np.int64).reshape(-1)
        if xs.shape != ys.shape:
            raise ValueError("prompts and responses must have equal length")
        if xs.size < 1:
            raise ValueError("a batch holds at least one pair")
        object.__setattr__(self, "prompts", _frozen(xs))
        object.__setattr__(self, "responses", _frozen(ys))

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int]]) -> Batch:
        pairs = list(pairs)
        return cls([p[0] for p in pairs], [p[1] for p in pairs])

    def __len__(self) -> int:
        return self.prompts.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Batch):
            return NotImplemented
        return np.array_equal(self.prompts, other.prompts) and np.array_equal(
            self.responses, other.responses
        )

    __hash__ = None

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.prompts.tolist(), self.responses.tolist()))

    def check(self, space: TaskSpace) -> None:
        if self.prompts.min() < 0 or self.prompts.max() >= space.n_prompts:
            raise IndexError("batch prompt index out of range")
        if self.responses.min() < 0 or self.responses.max() >= space.n_responses:
            raise IndexError("batch response index out of range")


def make_space(
    n_prompts: int,
    n_responses: int,
    ref_kind: RefKind = "uniform",
    seed: int = 0,
    concentration: float = 1.0,
) -> TaskSpace:
    """Build a TaskSpace with a uniform or Dirichlet-random reference policy.

    Dirichlet rows are floored at ``REF_FLOOR`` and renormalized so that
    importance ratios against pi_ref stay finite.
    """
    if n_prompts < 1:
        raise ValueError("n_prompts must be >= 1")
    if n_responses < 2:
        raise ValueError("n_responses must be >= 2 (preference pairs need two responses)")
    if ref_kind == "uniform":
        ref = np.full((n_prompts, n_responses), 1.0 / n_responses)
    elif ref_kind == "random-dirichlet":
        if concentration <= 0:
            raise ValueError("Dirichlet concentration must be positive")
        rng = np.random.default_rng(seed)
        ref = rng.dirichlet(np.full(n_responses, concentration), size=n_prompts)
        ref = np.maximum(ref, REF_FLOOR)
        ref /= ref.sum(axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown ref_kind {ref_kind!r}")
    return TaskSpace(ref)


def sample_batch(
    space: TaskSpace, policy_for_responses: np.ndarray, batch_size: int, seed: int
) -> Batch:
    """Draw prompts uniformly, then responses from the given row distribution."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    probs = np.asarray(policy_for_responses, dtype=np.float64)
    if probs.shape != space.shape:
        raise ValueError(f"response distribution shape {probs.shape} != space shape {space.shape}")
    rng = np.random.default_rng(seed)
    xs = rng.integers(0, space.n_prompts, size=batch_size)
    cdf = np.cumsum(probs[xs], axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random(batch_size)
    ys = (cdf <= u[:, None]).sum(axis=1)
    return Batch(xs, np.minimum(ys, space.n_responses - 1))


def enumerate_batch(space: TaskSpace, prompts: Iterable[int] | None = None) -> Batch:
    """Every response of every listed prompt exactly once, prompt-major."""
    xs = np.arange(space.n_prompts) if prompts is None else np.asarray(list(prompts))
    return Batch(np.repeat(xs, space.n_responses), np.tile(np.arange(space.n_responses), xs.size))


class DatasetError(ValueError):
    pass


def _parse_ints(path, expected: int) -> list[tuple[int, list[int], str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = [f.strip() for f in line.split(",")]
            if len(fields) != expected:
                raise DatasetError(
                    f"{path}:{lineno}: expected {expected} comma-separated fields, got {len(fields)}: {line!r}"
                )
            try:
                values = [int(f, 10) for f in fields]
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-integer field in {line!r}") from None
            out.append((lineno, values, line))
    return out


def load_dataset(path: str | PathLike, space: TaskSpace | None = None) -> list[PreferenceTriple]:
    """Read ``prompt,chosen,rejected`` records in file order.

    Raises:
        DatasetError: on malformed lines, chosen == rejected, or (when
            ``space`` is given) indices outside the space. The message carries
            the line number and the offending record.
    """
    triples = []
    for lineno, (x, yw, yl), line in _parse_ints(path, 3):
        if min(x, yw, yl) < 0:
            raise DatasetError(f"{path}:{lineno}: negative index in record {line!r}")
        if yw == yl:
            raise DatasetError(f"{path}:{lineno}: chosen == rejected in record {line!r}")
        t = PreferenceTriple(x, yw, yl)
        if space is not None:
            try:
                t.check(space)
            except IndexError as e:
                raise DatasetError(f"{path}:{lineno}: {e} in record {line!r}") from None
        triples.append(t)
    return triples


def save_dataset(path: str | PathLike, triples: Iterable[PreferenceTriple]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# prompt,chosen,rejected\n")
        for t in triples:
            fh.write(f"{t.prompt},{t.chosen},{t.rejected}\n")


def save_batch(path: str | PathLike, batch: Batch) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# prompt,response\n")
        for x, y in batch.pairs:
            fh.write(f"{x},{y}\n")


def load_batch(path: str | PathLike) -> Batch:
    rows = _parse_ints(path, 2)
    if not rows:
        raise DatasetError(f"{path}: batch file holds no pairs")
    return Batch.from_pairs((v[0], v[1]) for _, v, _ in rows)
