"""Deterministic dense linear algebra and randomness primitives.

All matrices are dense row-major float64 numpy arrays. Randomness flows
exclusively through :class:`RngStream`, a keyed counter-based stream: two
streams with the same (seed, stream_id) produce identical values on every
platform, and derived child streams are reproducible regardless of the
order in which callers use them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DecompositionError",
    "NumericalError",
    "RngStream",
    "cholesky",
    "log_sum_exp",
    "softmax",
    "std_normal",
]

_MASK64 = (1 << 64) - 1


class NumericalError(ArithmeticError):
    """A numerical operation produced or detected a non-finite/invalid value."""


class DecompositionError(NumericalError):
    """A matrix factorization could not proceed (e.g. non-PD input)."""


@dataclass(frozen=True)
class RngStream:
    """Keyed random stream. Pure data: (seed, stream_id) determine everything.

    Child streams are derived by hashing, so parallel callers can derive
    disjoint streams from integer or string labels without coordination.
    """

    seed: int
    stream_id: int = 0

    def derive(self, *parts: int | str) -> "RngStream":
        """Return a child stream keyed by this stream plus `parts`."""
        h = hashlib.sha256()
        h.update((self.seed & _MASK64).to_bytes(8, "little"))
        h.update((self.stream_id & _MASK64).to_bytes(8, "little"))
        for part in parts:
            if isinstance(part, str):
                h.update(b"s")
                h.update(part.encode("utf-8"))
                h.update(b"\x00")
            else:
                h.update(b"i")
                h.update(int(part).to_bytes(16, "little", signed=True))
        return RngStream(self.seed, int.from_bytes(h.digest()[:8], "little"))

    def generator(self) -> np.random.Generator:
        """Fresh numpy Generator over a Philox counter-based bit generator."""
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def cholesky(a: np.ndarray, *, sym_tol: float = 1e-10) -> np.ndarray:
    """Lower-triangular L with L @ L.T == a for symmetric positive-definite a.

    Raises DecompositionError naming the failing pivot when `a` is not PD,
    and ValueError when `a` is not square/symmetric/finite.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"cholesky needs a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("cholesky input contains non-finite entries")
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > sym_tol:
        raise ValueError(f"cholesky input is not symmetric (max |a - a.T| = {asym:.3e})")

    n = a.shape[0]
    lower = np.zeros_like(a)
    for k in range(n):
        pivot = a[k, k] - lower[k, :k] @ lower[k, :k]
        if not np.isfinite(pivot) or pivot <= 0.0:
            raise DecompositionError(
                f"matrix is not positive definite: pivot {k} evaluates to {pivot:.6e}"
            )
        lower[k, k] = np.sqrt(pivot)
        if k + 1 < n:
            lower[k + 1 :, k] = (a[k + 1 :, k] - lower[k + 1 :, :k] @ lower[k, :k]) / lower[k, k]
    return lower


def log_sum_exp(v) -> float:
    """Shift-stable log(sum(exp(v))). Entries may be -inf; +inf/NaN are rejected."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty vector is undefined")
    if np.any(np.isnan(v)) or np.any(v == np.inf):
        raise ValueError("log_sum_exp entries must be finite or -inf")
    m = np.max(v)
    if m == -np.inf:
        return -np.inf
    return float(m + np.log(np.sum(np.exp(v - m))))


def softmax(v) -> np.ndarray:
    """exp(v - log_sum_exp(v)); rows of 2-d input are treated independently."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        return np.exp(v - log_sum_exp(v))
    m = np.max(v, axis=-1, keepdims=True)
    e = np.exp(v - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def std_normal(stream: RngStream, n: int) -> np.ndarray:
    """n standard-normal draws, a pure function of `stream`."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    return stream.generator().standard_normal(n)
