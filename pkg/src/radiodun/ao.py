"""Classical alternating optimization over the factor decomposition.

Each iteration updates the factors ``s_0 .. s_m`` in order with a gradient
step on ``0.5 * ||Phi sum(s) - y||^2`` followed by soft thresholding.  Factor
``i`` sees the already-updated factors ``j < i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from skimage.restoration import denoise_tv_chambolle

from .sampling import SamplingPlan, adjoint, apply_forward
from .scene import RadioMap, normalize_map


@dataclass
class FactorStack:
    factors: list[np.ndarray]

    def __post_init__(self):
        self.factors = [np.asarray(f, dtype=np.float64) for f in self.factors]
        if not self.factors:
            raise ValueError("factor stack is empty")
        shape = self.factors[0].shape
        if any(f.shape != shape for f in self.factors):
            raise ValueError("factors disagree on shape")

    @property
    def m(self) -> int:
        return len(self.factors) - 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.factors[0].shape

    def composed(self) -> np.ndarray:
        return np.sum(self.factors, axis=0)

    def copy(self) -> "FactorStack":
        return FactorStack([f.copy() for f in self.factors])

    @classmethod
    def zeros(cls, m: int, height: int, width: int) -> "FactorStack":
        return cls([np.zeros((height, width)) for _ in range(m + 1)])


@dataclass
class AOConfig:
    beta: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    epsilon: float = 1e-4
    max_iters: int = 200
    tol: float = 1e-6
    prior: str = "none"  # "none" | "total_variation"
    tv_weight: float = 0.05

    def __post_init__(self):
        errors = []
        if any(b <= 0 for b in self.beta):
            errors.append("beta entries must be > 0")
        if self.epsilon < 0:
            errors.append("epsilon must be >= 0")
        if self.max_iters < 1:
            errors.append("max_iters must be >= 1")
        if self.tol < 0:
            errors.append("tol must be >= 0")
        if self.prior not in ("none", "total_variation"):
            errors.append(f"unknown prior {self.prior!r}")
        if errors:
            raise ValueError("; ".join(errors))

    def betas_for(self, m: int) -> list[float]:
        if len(self.beta) == m + 1:
            return list(self.beta)
        if len(self.beta) == 1:
            return list(self.beta) * (m + 1)
        raise ValueError(f"need 1 or {m + 1} step sizes, got {len(self.beta)}")


def soft_threshold(z, epsilon: float):
    """``sign(z) * max(|z| - epsilon, 0)``, elementwise."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    z = np.asarray(z, dtype=np.float64)
    out = np.sign(z) * np.maximum(np.abs(z) - epsilon, 0.0)
    return float(out) if out.ndim == 0 else out


def ao_step(stack: FactorStack, y, plan: SamplingPlan, beta, epsilon: float) -> FactorStack:
    """One sequential sweep over all factors.

    ``beta`` holds one step size per factor.  Step sizes are not range-checked
    here so that degenerate values (e.g. zero) can be exercised directly.
    """
    if stack.shape != (plan.height, plan.width):
        raise ValueError("factor shape does not match the sampling plan")
    beta = list(beta)
    if len(beta) != stack.m + 1:
        raise ValueError(f"need {stack.m + 1} step sizes, got {len(beta)}")
    y = np.asarray(getattr(y, "values", y), dtype=np.float64)
    new = stack.copy()
    for i in range(stack.m + 1):
        total = np.sum(new.factors, axis=0)  # s_j^k for j < i, s_l^{k-1} for l >= i
        grad = adjoint(apply_forward(total, plan) - y, plan)
        new.factors[i] = soft_threshold(new.factors[i] - beta[i] * grad, epsilon)
    return new


def tv_prox(x: np.ndarray, weight: float) -> np.ndarray:
    return denoise_tv_chambolle(x, weight=weight)


def initial_stack(y, plan: SamplingPlan, m: int, distance: np.ndarray | None = None) -> FactorStack:
    """Start from an affine fit of the distance map to the observations.

    The distance factor gets ``a * distance + b`` fitted on the sampled cells;
    obstacle factors start at zero.  Without a distance map everything is zero.
    """
    stack = FactorStack.zeros(m, plan.height, plan.width)
    if distance is None:
        return stack
    y = np.asarray(getattr(y, "values", y), dtype=np.float64)
    p = apply_forward(distance, plan)
    if plan.n >= 2 and np.ptp(p) > 0:
        a, b = np.polyfit(p, y, 1)
    else:
        a, b = 0.0, float(np.mean(y))
    stack.factors[0] = a * np.asarray(distance, dtype=np.float64) + b
    return stack


class AOResult(NamedTuple):
    radio_map: RadioMap
    iterations: int
    converged: bool
    stack: FactorStack


def ao_solve(scene_inputs, y, plan: SamplingPlan, config: AOConfig, m: int | None = None) -> AOResult:
    """Run sweeps until ``max_iters`` or the composed map's relative change drops below ``tol``.

    ``scene_inputs`` is either None or a sequence whose first element is the
    distance map; its length fixes ``m`` unless given explicitly.  With the
    total-variation prior, the composed map is passed through a TV proximal
    step each sweep and the correction is folded into the distance factor.
    """
    if scene_inputs is not None and len(scene_inputs) > 0:
        distance = np.asarray(scene_inputs[0], dtype=np.float64)
        m = len(scene_inputs) - 1 if m is None else m
    else:
        distance = None
        m = 0 if m is None else m
    betas = config.betas_for(m)
    stack = initial_stack(y, plan, m, distance)
    current = stack.composed()
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        stack = ao_step(stack, y, plan, betas, config.epsilon)
        composed = stack.composed()
        if config.prior == "total_variation":
            smoothed = tv_prox(composed, config.tv_weight)
            stack.factors[0] = stack.factors[0] + (smoothed - composed)
            composed = smoothed
        change = np.linalg.norm(composed - current) / max(np.linalg.norm(current), 1e-12)
        current = composed
        if change < config.tol:
            converged = True
            break
    if not np.isfinite(current).all():
        raise FloatingPointError("alternating optimization diverged")
    return AOResult(normalize_map(current), it, converged, stack)
