"""Ranking extractor collocations by a full traversal or by a cheap overfit run.

The traversal protocol trains on the train split, keeps the epoch with the best
eval-split score and reports the test-split score of that epoch. The upper-bound
protocol trains directly on the test split until the loss plateaus and reports
the score it reaches there. If the two orderings agree, the second is a much
cheaper way to pick a collocation.
"""
from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .core import Dataset, split_dataset
from .datagen import Collocation, ExtractorFamily, GenConfig, divergence_angle, family_divergence, generate_dataset, make_family
from .model import init_model
from .trainer import TrainConfig, evaluate, predict, train

TRAVERSAL = "traversal"
UPPER_BOUND = "upper_bound"
PROTOCOLS = (TRAVERSAL, UPPER_BOUND)
DEFAULT_METRIC = "segment.type_av"
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class Splits:
    train: Dataset | None = None
    eval: Dataset | None = None
    test: Dataset | None = None


@dataclass(frozen=True)
class ProtocolResult:
    collocation: str
    audio_family: str
    visual_family: str
    protocol: str
    seed: int
    score: float
    seconds: float
    epochs_run: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Rank correlation using average ranks for ties."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise SelectionError(f"expected two equal-length score vectors, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise SelectionError("undefined correlation: need at least two scores")
    rx, ry = rankdata(x) - (len(x) + 1) / 2, rankdata(y) - (len(y) + 1) / 2
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    if denom == 0:
        raise SelectionError("undefined correlation: a score vector has zero rank variance")
    return float(np.clip(np.sum(rx * ry) / denom, -1.0, 1.0))


def score_model(params: Mapping[str, np.ndarray], dataset: Dataset, metric: str = DEFAULT_METRIC, pooling: str = "attention") -> float:
    """``segment.*``/``event.*``/``average_score`` parsing keys or ``alignment.<field>``."""
    if metric.startswith("alignment."):
        _, alignment = evaluate(params, dataset, pooling)
        if alignment is None:
            raise SelectionError("alignment metric requested on a split without labeled segments")
        return float(getattr(alignment, metric.split(".", 1)[1]))
    from .metrics import parsing_report

    probs, _, _ = predict(params, dataset, pooling)
    return float(parsing_report(probs, dataset.label_masks()).get(metric))


def run_protocol(
    collocation: Collocation,
    splits: Splits,
    protocol: str,
    config: TrainConfig,
    seed: int,
    metric: str = DEFAULT_METRIC,
) -> ProtocolResult:
    if protocol not in PROTOCOLS:
        raise SelectionError(f"unknown protocol {protocol!r}")
    needed = ("train", "eval", "test") if protocol == TRAVERSAL else ("test",)
    for name in needed:
        ds = getattr(splits, name)
        if ds is None or len(ds) == 0:
            raise SelectionError(f"{protocol} protocol needs a non-empty {name} split")
    config = replace(config, seed=seed)

    start = time.perf_counter()
    if protocol == TRAVERSAL:
        best = {"score": -np.inf, "params": init_model(config.dims(splits.train), seed)}

        def keep_best(epoch, params):
            s = score_model(params, splits.eval, metric, config.pooling)
            if s > best["score"]:
                best["score"], best["params"] = s, {k: v.copy() for k, v in params.items()}

        _, history = train(splits.train, config, params=best["params"], on_epoch=keep_best)
        score = score_model(best["params"], splits.test, metric, config.pooling)
    else:
        params, history = train(splits.test, replace(config, early_stop=True), params=init_model(config.dims(splits.test), seed))
        score = score_model(params, splits.test, metric, config.pooling)
    seconds = time.perf_counter() - start
    return ProtocolResult(
        collocation.id, collocation.audio.name, collocation.visual.name, protocol, seed, score, seconds, len(history)
    )


@dataclass
class CollocationReport:
    results: list[ProtocolResult]
    collocations: list[str]
    divergences: dict[str, float] = field(default_factory=dict)
    metric: str = DEFAULT_METRIC

    @property
    def protocols(self) -> tuple[str, ...]:
        present = {r.protocol for r in self.results}
        return tuple(p for p in PROTOCOLS if p in present)

    def mean_scores(self, protocol: str) -> list[float]:
        out = []
        for cid in self.collocations:
            scores = [r.score for r in self.results if r.collocation == cid and r.protocol == protocol]
            if not scores:
                raise SelectionError(f"no {protocol} results for collocation {cid!r}")
            out.append(float(np.mean(scores)))
        return out

    @property
    def rho(self) -> float:
        """Raises ``SelectionError`` when the correlation is undefined."""
        return spearman(self.mean_scores(TRAVERSAL), self.mean_scores(UPPER_BOUND))

    def total_seconds(self, protocol: str) -> float:
        return float(sum(r.seconds for r in self.results if r.protocol == protocol))

    @property
    def time_ratio(self) -> float:
        traversal = self.total_seconds(TRAVERSAL)
        if traversal == 0:
            raise SelectionError("no traversal time recorded")
        return self.total_seconds(UPPER_BOUND) / traversal

    def to_csv(self, with_seconds: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["collocation_id", "audio_family", "visual_family", "protocol", "seed", "score"] + (["seconds"] if with_seconds else []))
        for r in self.results:
            row = [r.collocation, r.audio_family, r.visual_family, r.protocol, r.seed, f"{r.score:.9g}"]
            w.writerow(row + ([f"{r.seconds:.3f}"] if with_seconds else []))
        return buf.getvalue()

    def summary(self, with_seconds: bool = True) -> dict:
        protocols = self.protocols
        both = protocols == PROTOCOLS
        rho, rho_error = None, None
        if both:
            try:
                rho = self.rho
            except SelectionError as exc:
                rho_error = str(exc)
        else:
            rho_error = "undefined correlation: only one protocol was run"
        means = {p: self.mean_scores(p) for p in protocols}
        blob = {
            "metric": self.metric,
            "collocations": [
                {"id": cid, "divergence": self.divergences.get(cid), **{p: means[p][k] for p in protocols}}
                for k, cid in enumerate(self.collocations)
            ],
            "spearman": rho,
            "spearman_error": rho_error,
        }
        if with_seconds:
            blob["seconds"] = {p: self.total_seconds(p) for p in protocols}
            blob["time_ratio"] = self.time_ratio if both else None
        return blob

    def summary_json(self, with_seconds: bool = True) -> str:
        return json.dumps(self.summary(with_seconds), indent=2, sort_keys=True) + "\n"


def _seed_splits(collocation: Collocation, gen: GenConfig, seed: int) -> Splits:
    dataset = generate_dataset(replace(gen, seed=seed), collocation.audio, collocation.visual)
    return Splits(*split_dataset(dataset, SPLIT_FRACTIONS, seed=seed))


def _run_task(args) -> ProtocolResult:
    collocation, gen, config, seed, protocol, metric = args
    return run_protocol(collocation, _seed_splits(collocation, gen, seed), protocol, config, seed, metric)


def compare_collocations(
    collocations: Sequence[Collocation],
    gen: GenConfig,
    config: TrainConfig,
    seeds: Sequence[int],
    metric: str = DEFAULT_METRIC,
    protocols: Sequence[str] = PROTOCOLS,
    jobs: int = 1,
) -> CollocationReport:
    """Both protocols per collocation per seed.

    Every collocation sees the same latent videos for a given seed, so score
    differences come from the extractor families alone.
    """
    if len(collocations) < 2:
        raise SelectionError("need at least two collocations to compare")
    if not seeds:
        raise SelectionError("need at least one seed")
    tasks = [(c, gen, config, s, p, metric) for c in collocations for p in protocols for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]
    return CollocationReport(
        results,
        [c.id for c in collocations],
        {c.id: family_divergence(c.audio, c.visual) for c in collocations},
        metric,
    )


@dataclass(frozen=True)
class LadderSpec:
    """Audio and visual families placed along one rotation path."""

    audio_divergences: tuple[float, ...] = (0.0, 0.1)
    visual_divergences: tuple[float, ...] = (0.0, 0.4, 1.0)
    family_seed: int = 4242
    rho: float = 0.5


def family_ladder(gen: GenConfig, spec: LadderSpec = LadderSpec()) -> list[Collocation]:
    """Every audio family paired with every visual family, at graded divergences.

    Audio members rotate one way and visual members the other along a shared
    path, so the pairwise divergence grows with the visual member's offset.
    """
    if gen.D_audio != gen.D_visual:
        raise SelectionError("a shared rotation path needs D_audio == D_visual")

    def member(prefix, k, div, sign):
        return make_family(f"{prefix}{k}", gen.D_audio, gen.L, spec.family_seed, angle=sign * divergence_angle(div), rho=spec.rho)

    audio = [member("audio-", k, d, -1.0) for k, d in enumerate(spec.audio_divergences)]
    visual = [member("visual-", k, d, 1.0) for k, d in enumerate(spec.visual_divergences)]
    return [Collocation(a, v) for a in audio for v in visual]


def collocation_families(collocations: Sequence[Collocation]) -> list[ExtractorFamily]:
    seen = {}
    for c in collocations:
        seen.setdefault(c.audio.name, c.audio)
        seen.setdefault(c.visual.name, c.visual)
    return list(seen.values())


def result_dicts(report: CollocationReport) -> list[dict]:
    return [asdict(r) for r in report.results]
