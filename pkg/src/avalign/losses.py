"""Contrastive objectives between an audio and a visual feature sequence.

All losses accept either a single (N, D) pair or a batch (B, N, D); batched
inputs are evaluated per item and averaged over B. Index ``i`` runs over the
rows of the first sequence, ``j``/``k`` over the second.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import numgrad as ng
from .numgrad import Tensor

LITERAL = "literal"
SQUARED = "squared"
FULL = "full"
PART = "part"


@dataclass(frozen=True)
class TimeLagKernel:
    """K(i, j) = F(j - i) / |i - j|**p off the diagonal, ``diagonal_value`` on it."""

    exponent: float = 5.0
    diagonal_value: float = 1.0
    outer: Optional[Callable[[int], float]] = field(default=None, compare=False)

    def __call__(self, i: int, j: int) -> float:
        if i < 0 or j < 0:
            raise ValueError("time indices must be non-negative")
        if i == j:
            return float(self.diagonal_value)
        f = 1.0 if self.outer is None else float(self.outer(j - i))
        return f / abs(i - j) ** self.exponent

    def matrix(self, n: int) -> np.ndarray:
        return np.array([[self(i, j) for j in range(n)] for i in range(n)])


def time_lag_kernel(i: int, j: int, kernel: TimeLagKernel = TimeLagKernel()) -> float:
    return kernel(i, j)


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.5
    mode: str = SQUARED
    scope: str = FULL
    kernel: TimeLagKernel = TimeLagKernel()

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.mode not in (LITERAL, SQUARED):
            raise ValueError(f"mode must be literal or squared, got {self.mode!r}")
        if self.scope not in (FULL, PART):
            raise ValueError(f"scope must be full or part, got {self.scope!r}")


@dataclass
class LossReport:
    loss: float
    grad_1: np.ndarray
    grad_2: np.ndarray


def _batched(x: Tensor) -> Tensor:
    return ng.reshape(x, (1,) + x.shape) if x.ndim == 2 else x


def _check_pair(z1: Tensor, z2: Tensor, min_rows: int) -> None:
    if z1.shape != z2.shape or z1.ndim not in (2, 3):
        raise ValueError(f"expected matching (N, D) or (B, N, D) inputs, got {z1.shape} and {z2.shape}")
    if z1.shape[-2] < min_rows:
        raise ValueError(f"need at least {min_rows} rows, got {z1.shape[-2]}")


def nt_xent_loss(z1, z2, temperature: float = 0.5) -> Tensor:
    """NT-Xent with the positive pair excluded from the denominator.

    l_i = -s_ii / tau + log sum_{k != i} exp(s_ik / tau), L = mean_i l_i.
    """
    z1, z2 = ng.as_tensor(z1), ng.as_tensor(z2)
    _check_pair(z1, z2, 2)
    return _weighted_nt_xent(_batched(z1), _batched(z2), temperature, None)


def weighted_nt_xent_loss(z1, z2, temperature: float = 0.5, kernel: TimeLagKernel = TimeLagKernel()) -> Tensor:
    """As ``nt_xent_loss`` but each negative similarity is scaled by K(i, k) inside the exponent."""
    z1, z2 = ng.as_tensor(z1), ng.as_tensor(z2)
    _check_pair(z1, z2, 2)
    return _weighted_nt_xent(_batched(z1), _batched(z2), temperature, kernel.matrix(z1.shape[-2]))


def _weighted_nt_xent(z1: Tensor, z2: Tensor, temperature: float, weights: np.ndarray | None) -> Tensor:
    n = z1.shape[-2]
    sims = ng.similarity_matrix(z1, z2)
    idx = np.arange(n)
    positive = sims[:, idx, idx] * (1.0 / temperature)
    scaled = sims if weights is None else sims * weights
    off_diag = 1.0 - np.eye(n)
    denom = ng.tsum(ng.exp(scaled * (1.0 / temperature)) * off_diag, axis=-1)
    return ng.mean(ng.log(denom) - positive)


def mtsc_loss(phi1, phi2, config: LossConfig = LossConfig()) -> Tensor:
    """Cross-modal similarity regressed onto the time-decayed intra-modal target.

    residual(i, j) = sim(phi1_i, phi2_j) - K(i, j) * detach(sim(phi1_i, phi1_j))
    The full scope averages over all T*T pairs, the part scope over the T
    same-time pairs only. Squared mode squares each residual.
    """
    phi1, phi2 = ng.as_tensor(phi1), ng.as_tensor(phi2)
    _check_pair(phi1, phi2, 1)
    phi1, phi2 = _batched(phi1), _batched(phi2)
    n = phi1.shape[-2]
    if config.scope == PART:
        # detach(sim(phi1_i, phi1_i)) == 1, but keep the rows validated
        ng._row_norms(phi1)
        cross = ng.tsum(ng.similarity_matrix(phi1, phi2) * np.eye(n), axis=-1)
        target = config.kernel.diagonal_value
        residual = cross - target
    else:
        cross = ng.similarity_matrix(phi1, phi2)
        target = ng.detach(ng.similarity_matrix(phi1, phi1)) * config.kernel.matrix(n)
        residual = cross - target
    if config.mode == SQUARED:
        residual = residual * residual
    per_item = residual.mean(axis=tuple(range(1, residual.ndim)))
    return per_item.mean()


def _report(fn, z1, z2) -> LossReport:
    t1, t2 = ng.parameter(z1), ng.parameter(z2)
    out = fn(t1, t2)
    out.backward()
    zeros = np.zeros_like
    return LossReport(
        loss=float(out.value),
        grad_1=t1.grad if t1.grad is not None else zeros(t1.value),
        grad_2=t2.grad if t2.grad is not None else zeros(t2.value),
    )


def nt_xent(z1, z2, temperature: float = 0.5) -> LossReport:
    return _report(lambda a, b: nt_xent_loss(a, b, temperature), z1, z2)


def weighted_nt_xent(z1, z2, temperature: float = 0.5, kernel: TimeLagKernel = TimeLagKernel()) -> LossReport:
    return _report(lambda a, b: weighted_nt_xent_loss(a, b, temperature, kernel), z1, z2)


def mtsc(phi1, phi2, config: LossConfig = LossConfig()) -> LossReport:
    return _report(lambda a, b: mtsc_loss(a, b, config), phi1, phi2)
