"""Numeric primitives: softmax, sampling, losses, RNG, and gradient checking.

Everything runs in double precision. Parameters live in a ParamStore that
pairs every named tensor with a gradient buffer of identical shape;
analytic backward passes accumulate into those buffers and are verified
against central finite differences by ``grad_check``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

EPS_LOG = 1e-12


class NonFiniteError(FloatingPointError):
    """A value that must be finite came out NaN or infinite."""


def check_finite(value, context: str = "value"):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite {context}: {value!r}")
    return value


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over a rank-1 vector; rejects NaN input."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < 1:
        raise ValueError(f"softmax expects a non-empty rank-1 vector, got shape {z.shape}")
    if np.any(np.isnan(z)):
        raise ValueError("softmax input contains NaN")
    e = np.exp(z - z.max())
    return e / e.sum()


def cross_entropy(pred: np.ndarray, label_id: int) -> float:
    """Negative log likelihood of ``label_id`` under ``pred``."""
    if not 0 <= label_id < len(pred):
        raise ValueError(f"label {label_id} out of range for {len(pred)} classes")
    return float(-np.log(pred[label_id] + EPS_LOG))


def entropy(probs: np.ndarray) -> float:
    p = np.asarray(probs, dtype=np.float64)
    return float(-np.sum(p * np.log(p + EPS_LOG)))


class Rng:
    """Seeded PCG64 wrapper with splittable per-episode derivation.

    The same seed always yields the same draw sequence on the same build.
    ``for_episode`` hashes (global seed, document index, epoch) through a
    SeedSequence so evaluation order cannot change any episode's draws.
    """

    __slots__ = ("_gen",)

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=spawn_key)))

    @classmethod
    def for_episode(cls, global_seed: int, doc_index: int, epoch: int) -> "Rng":
        return cls(global_seed, spawn_key=(epoch, doc_index))

    def uniform(self) -> float:
        return float(self._gen.random())

    def uniform_array(self, *shape: int) -> np.ndarray:
        return self._gen.random(shape)

    def integers(self, low: int, high: int) -> int:
        # high is inclusive
        return int(self._gen.integers(low, high + 1))

    def shuffle(self, seq: list) -> None:
        self._gen.shuffle(seq)


def sample_categorical(dist: np.ndarray, rng: Rng) -> int:
    """Draw an index with probability ``dist[i]``, consuming one uniform.

    ``dist`` must be non-negative and sum to 1 within 1e-9.
    """
    d = np.asarray(dist, dtype=np.float64)
    total = d.sum()
    if np.any(d < -1e-12) or abs(total - 1.0) > 1e-9:
        raise ValueError(f"not a probability vector (sum={total!r}): {d!r}")
    u = rng.uniform() * total
    acc = 0.0
    last_positive = 0
    for i, p in enumerate(d):
        if p > 0.0:
            last_positive = i
        acc += p
        if u < acc:
            return i
    return last_positive  # u landed on the rounding tail


class ParamStore:
    """Named float64 parameter tensors with matching gradient buffers."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy_grads(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.grads.items()}

    def check_finite(self) -> None:
        for name, p in self.params.items():
            if not np.all(np.isfinite(p)):
                raise NonFiniteError(f"parameter {name!r} has non-finite entries")


@dataclass(frozen=True, slots=True)
class GradCheckResult:
    max_rel_error: float
    worst_param: str  # name of the parameter holding the worst entry

    def __str__(self) -> str:
        return f"max relative error {self.max_rel_error:.3e} at {self.worst_param!r}"


def grad_check(
    f: Callable[[ParamStore], float],
    store: ParamStore,
    eps: float = 1e-5,
) -> GradCheckResult:
    """Compare f's analytic gradients against central finite differences.

    ``f`` must be pure and deterministic (any stochastic choices frozen),
    return a scalar loss, and accumulate analytic gradients into
    ``store.grads``. For each parameter entry the relative error is
    |analytic - numeric| / max(1, |numeric|); the maximum over all entries
    is returned together with the offending parameter's name.
    """
    store.zero_grads()
    f(store)
    analytic = store.copy_grads()

    worst = 0.0
    worst_name = ""
    for name, p in store.params.items():
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            store.zero_grads()
            up = f(store)
            flat[i] = orig - eps
            store.zero_grads()
            down = f(store)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic[name].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
                worst_name = name
    store.zero_grads()
    return GradCheckResult(worst, worst_name)
