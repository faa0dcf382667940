"""Randomized finite-difference checks of every loss and of the full model."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numgrad as ng
from .losses import FULL, LITERAL, PART, SQUARED, LossConfig, mtsc_loss, nt_xent_loss, weighted_nt_xent_loss
from .model import ModelDims, init_model
from .trainer import TrainConfig, batch_loss

TOLERANCE = 1e-5
LOSS_CASES = (
    "nt_xent",
    "weighted_nt_xent",
    "mtsc_literal_full",
    "mtsc_literal_part",
    "mtsc_squared_full",
    "mtsc_squared_part",
)
MODEL_CASES = ("model_bce", "model_bce_mtsc")


@dataclass
class GradCase:
    name: str
    instance: int
    max_rel_error: float
    worst_param: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


@dataclass
class GradSuiteResult:
    cases: list[GradCase] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.cases) and all(c.passed for c in self.cases)

    @property
    def max_rel_error(self) -> float:
        return max(c.max_rel_error for c in self.cases)

    def summary(self) -> dict:
        by_name = {}
        for c in self.cases:
            entry = by_name.setdefault(c.name, {"instances": 0, "max_rel_error": 0.0, "failures": 0})
            entry["instances"] += 1
            entry["max_rel_error"] = max(entry["max_rel_error"], c.max_rel_error)
            entry["failures"] += int(not c.passed)
        return {"instances": len(self.cases), "tolerance": TOLERANCE, "passed": self.passed, "cases": by_name}


def _loss_fn(name: str, temperature: float):
    if name == "nt_xent":
        return lambda p: nt_xent_loss(p["z1"], p["z2"], temperature)
    if name == "weighted_nt_xent":
        return lambda p: weighted_nt_xent_loss(p["z1"], p["z2"], temperature)
    _, mode, scope = name.split("_")
    cfg = LossConfig(temperature, {"literal": LITERAL, "squared": SQUARED}[mode], {"full": FULL, "part": PART}[scope])
    return lambda p: mtsc_loss(p["z1"], p["z2"], cfg)


def check_loss(name: str, rng: np.random.Generator, instance: int) -> GradCase:
    n, d = int(rng.integers(2, 6)), int(rng.integers(2, 5))
    shape = (n, d) if rng.random() < 0.5 else (int(rng.integers(2, 4)), n, d)
    params = {"z1": rng.standard_normal(shape), "z2": rng.standard_normal(shape)}
    report = ng.grad_check(_loss_fn(name, float(rng.uniform(0.2, 1.0))), params, eps=1e-4, order=4, numeric_dtype=np.longdouble)
    key, err = report.worst
    return GradCase(name, instance, err, key)


def check_model(name: str, rng: np.random.Generator, instance: int) -> GradCase:
    B, T, H, C = 2, 3, 4, 2
    dims = ModelDims(D_audio=3, D_visual=2, H=H, C=C)
    params = init_model(dims, seed=int(rng.integers(2**31)))
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
    if name == "model_bce":
        # the projection head only feeds the contrastive term
        params = {k: v for k, v in params.items() if not k.startswith("proj")}
    xa = rng.standard_normal((B, T, 3))
    xv = rng.standard_normal((B, T, 2))
    y = (rng.random((B, C)) < 0.5).astype(float)
    cfg = TrainConfig(objective="mtsc" if name == "model_bce_mtsc" else "none", lambda_mtsc=0.7, hidden=H)
    report = ng.grad_check(lambda p: batch_loss(p, xa, xv, y, cfg)[0], params, eps=1e-4, order=4, numeric_dtype=np.longdouble)
    key, err = report.worst
    return GradCase(name, instance, err, key)


def run_gradient_suite(instances_per_loss: int = 16, model_instances: int = 6, seed: int = 0) -> GradSuiteResult:
    start = time.perf_counter()
    result = GradSuiteResult()
    for k, name in enumerate(LOSS_CASES):
        for i in range(instances_per_loss):
            result.cases.append(check_loss(name, np.random.default_rng([seed, k, i]), i))
    for k, name in enumerate(MODEL_CASES):
        for i in range(model_instances):
            result.cases.append(check_model(name, np.random.default_rng([seed, 100 + k, i]), i))
    result.seconds = time.perf_counter() - start
    return result
