"""Binary sampling operator: plans, noisy observation, gather and scatter.

The operator is stored as an ordered set of flat (row-major) cell indices;
its dense ``N x H*W`` matrix is never materialized.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SamplingPlan:
    indices: tuple[int, ...]
    height: int
    width: int
    kind: str = "custom"
    seed: int | None = None

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        size = self.height * self.width
        if not 1 <= len(idx) <= size:
            raise ValueError(f"plan needs 1..{size} samples, got {len(idx)}")
        if len(set(idx)) != len(idx):
            raise ValueError("sample indices must be distinct")
        if min(idx) < 0 or max(idx) >= size:
            raise ValueError("sample index outside the grid")

    @property
    def n(self) -> int:
        return len(self.indices)

    @property
    def ratio(self) -> float:
        return self.n / (self.height * self.width)

    @property
    def index_array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.height * self.width)
        m[self.index_array] = 1.0
        return m.reshape(self.height, self.width)

    def dense(self) -> np.ndarray:
        """Explicit N x H*W one-hot matrix (testing only)."""
        phi = np.zeros((self.n, self.height * self.width))
        phi[np.arange(self.n), self.index_array] = 1.0
        return phi

    def to_dict(self) -> dict:
        return {"H": self.height, "W": self.width, "kind": self.kind, "seed": self.seed,
                "indices": list(self.indices)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingPlan":
        return cls(tuple(d["indices"]), d["H"], d["W"], d.get("kind", "custom"), d.get("seed"))

    @classmethod
    def from_json(cls, text: str) -> "SamplingPlan":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class SparseObservation:
    values: np.ndarray
    plan: SamplingPlan

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.plan.n:
            raise ValueError(f"observation length {v.shape[0]} != plan size {self.plan.n}")
        object.__setattr__(self, "values", v)


def lattice_positions(t: int, size: int) -> np.ndarray:
    """1-based positions of ``t`` evenly spaced, bin-centered samples along an axis.

    Position k (1..t) is ``round((2k - 1) * size / (2t))`` with halves rounded up.
    """
    k = np.arange(1, t + 1)
    return np.floor((2 * k - 1) * size / (2 * t) + 0.5).astype(np.int64)


def build_plan(kind: str, n: int, height: int, width: int, seed: int | None = None) -> SamplingPlan:
    size = height * width
    if not 1 <= n <= size:
        raise ValueError(f"need 1 <= N <= H*W = {size}, got {n}")
    if kind == "grid":
        t = math.isqrt(n)
        if t * t != n:
            raise ValueError(f"grid sampling needs a perfect-square N, got {n}")
        if t > height or t > width:
            raise ValueError(f"a {t}x{t} lattice does not fit a {height}x{width} grid")
        rows = lattice_positions(t, height) - 1
        cols = lattice_positions(t, width) - 1
        idx = (rows[:, None] * width + cols[None, :]).reshape(-1)
    elif kind == "uniform_random":
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(size, size=n, replace=False))
    else:
        raise ValueError(f"unknown sampling kind {kind!r}")
    return SamplingPlan(tuple(idx.tolist()), height, width, kind, seed)


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def _check_dims(arr: np.ndarray, plan: SamplingPlan):
    if arr.shape != (plan.height, plan.width):
        raise ValueError(f"map shape {arr.shape} does not match plan grid {(plan.height, plan.width)}")


def apply_forward(x, plan: SamplingPlan) -> np.ndarray:
    """Noise-free gather of the sampled cells."""
    arr = _as_array(x)
    _check_dims(arr, plan)
    return arr.reshape(-1)[plan.index_array].copy()


def sample(x, plan: SamplingPlan, noise_sigma: float = 0.0, seed: int | None = None) -> SparseObservation:
    """Observe ``x`` through ``plan`` with optional additive Gaussian noise."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    y = apply_forward(x, plan)
    if noise_sigma > 0:
        y = y + noise_sigma * np.random.default_rng(seed).standard_normal(plan.n)
    return SparseObservation(y, plan)


def adjoint(y, plan: SamplingPlan) -> np.ndarray:
    """Scatter observations back onto a zero-filled H x W map."""
    values = np.asarray(getattr(y, "values", y), dtype=np.float64).reshape(-1)
    if values.shape[0] != plan.n:
        raise ValueError(f"observation length {values.shape[0]} != plan size {plan.n}")
    out = np.zeros(plan.height * plan.width)
    out[plan.index_array] = values
    return out.reshape(plan.height, plan.width)
