"""Parsing F-scores and cross-modal alignment statistics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .core import AUDIO, AUDIO_VISUAL, TRACKS, VISUAL, EventInterval, extract_events

PRED_THRESHOLD = 0.5
_TIE_DECIMALS = 12


def f_score(tp: int, fp: int, fn: int) -> float:
    """Micro F1; an empty prediction against an empty truth scores 1."""
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


@dataclass
class TrackCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other: "TrackCounts"):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    @property
    def f(self) -> float:
        return f_score(self.tp, self.fp, self.fn)


@dataclass
class LevelScores:
    audio: float
    visual: float
    audio_visual: float
    type_av: float
    event_av: float

    def __getitem__(self, key: str) -> float:
        return getattr(self, key)


def _aggregate(counts: dict[str, TrackCounts]) -> LevelScores:
    pooled = TrackCounts()
    pooled += counts[AUDIO]
    pooled += counts[VISUAL]
    fs = {k: counts[k].f for k in TRACKS}
    return LevelScores(
        audio=fs[AUDIO],
        visual=fs[VISUAL],
        audio_visual=fs[AUDIO_VISUAL],
        type_av=(fs[AUDIO] + fs[VISUAL] + fs[AUDIO_VISUAL]) / 3.0,
        event_av=pooled.f,
    )


def _track_masks(masks: np.ndarray) -> dict[str, np.ndarray]:
    """(V, T, C, 2) boolean masks -> per-track (V, T, C) masks."""
    return {AUDIO: masks[..., 0], VISUAL: masks[..., 1], AUDIO_VISUAL: masks[..., 0] & masks[..., 1]}


def _check_masks(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 4 or pred.shape[-1] != 2:
        raise ValueError(f"expected matching (video, T, C, 2) masks, got {pred.shape} and {gt.shape}")
    if pred.dtype != bool:
        pred = pred >= PRED_THRESHOLD
    return pred, gt.astype(bool)


def segment_f_scores(pred, gt) -> LevelScores:
    pred, gt = _check_masks(pred, gt)
    counts = {}
    for track, (p, g) in zip(TRACKS, zip(_track_masks(pred).values(), _track_masks(gt).values())):
        counts[track] = TrackCounts(int(np.sum(p & g)), int(np.sum(p & ~g)), int(np.sum(~p & g)))
    return _aggregate(counts)


def iou(a: EventInterval, b: EventInterval) -> float:
    inter = max(0, min(a.end, b.end) - max(a.start, b.start) + 1)
    return inter / (a.length + b.length - inter)


def match_events(pred: Sequence[EventInterval], gt: Sequence[EventInterval], threshold: float = 0.5) -> TrackCounts:
    """Greedy one-to-one matching by descending IoU, ties to the earlier start."""
    pairs = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            score = iou(p, g)
            if score >= threshold:
                pairs.append((-score, p.start, g.start, i, j))
    pairs.sort()
    used_p, used_g = set(), set()
    for _, _, _, i, j in pairs:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
    tp = len(used_p)
    return TrackCounts(tp, len(pred) - tp, len(gt) - tp)


def event_f_scores(pred, gt, miou_threshold: float = 0.5) -> LevelScores:
    pred, gt = _check_masks(pred, gt)
    counts = {k: TrackCounts() for k in TRACKS}
    ptracks, gtracks = _track_masks(pred), _track_masks(gt)
    V, _, C = pred.shape[:3]
    for track in TRACKS:
        for v in range(V):
            for c in range(C):
                pe = extract_events(ptracks[track][v, :, c], c, track)
                ge = extract_events(gtracks[track][v, :, c], c, track)
                counts[track] += match_events(pe, ge, miou_threshold)
    return _aggregate(counts)


def average_score(segment: float, event: float) -> float:
    return 0.5 * (segment + event)


@dataclass
class ParsingReport:
    segment: LevelScores
    event: LevelScores

    @property
    def average_score(self) -> float:
        return average_score(self.segment.type_av, self.event.type_av)

    def get(self, key: str) -> float:
        """Look up ``segment.type_av``-style keys, or ``average_score``."""
        if key == "average_score":
            return self.average_score
        level, field = key.split(".")
        return getattr(self, level)[field]

    def to_json(self) -> dict:
        return {"segment": asdict(self.segment), "event": asdict(self.event), "average_score": self.average_score}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["type", "segment_f", "event_f"])
        for key in ("audio", "visual", "audio_visual", "type_av", "event_av"):
            w.writerow([key, f"{self.segment[key]:.6f}", f"{self.event[key]:.6f}"])
        return buf.getvalue()


def parsing_report(pred, gt, miou_threshold: float = 0.5) -> ParsingReport:
    return ParsingReport(segment_f_scores(pred, gt), event_f_scores(pred, gt, miou_threshold))


# --- alignment ---------------------------------------------------------------

@dataclass
class AlignmentReport:
    recall_top1_cross: float
    recall_top1_uni_audio: float
    recall_top1_uni_visual: float
    distinguish: float
    distinguish_alt: float
    precision: float
    queries: int
    labeled_queries: int

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Segments:
    """Flattened corpus segments for one modality, ordered by (video id, index)."""

    features: np.ndarray  # (N, H)
    labels: list[frozenset]

    @property
    def labeled(self) -> np.ndarray:
        return np.array([bool(s) for s in self.labels])


def flatten_corpus(ids: Sequence[str], features: Sequence[np.ndarray], labels: Sequence[Sequence[frozenset]]) -> Segments:
    order = sorted(range(len(ids)), key=lambda k: ids[k])
    feats = np.concatenate([np.asarray(features[k], dtype=np.float64) for k in order])
    labs = [frozenset(s) for k in order for s in labels[k]]
    return Segments(feats, labs)


def _cosine_table(q: np.ndarray, r: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    rn = np.linalg.norm(r, axis=1, keepdims=True)
    if np.any(qn == 0) or np.any(rn == 0):
        raise ValueError("zero-norm segment feature")
    # rounding makes near-identical scores exact ties, resolved by corpus order
    return np.round((q / qn) @ (r / rn).T, _TIE_DECIMALS)


def _multi_hot(labels: Sequence[frozenset], C: int) -> np.ndarray:
    out = np.zeros((len(labels), C), dtype=bool)
    for n, s in enumerate(labels):
        out[n, sorted(s)] = True
    return out


def _shared_table(a: Segments, b: Segments) -> np.ndarray:
    """(Na, Nb) boolean: segment pair shares at least one class."""
    C = 1 + max((c for s in a.labels + b.labels for c in s), default=0)
    ha = _multi_hot(a.labels, C).astype(np.int64)
    hb = _multi_hot(b.labels, C).astype(np.int64)
    return (ha @ hb.T) > 0


def _top1(queries: Segments, refs: Segments, exclude_self: bool) -> tuple[np.ndarray, np.ndarray]:
    sims = _cosine_table(queries.features, refs.features)
    if exclude_self:
        np.fill_diagonal(sims, -np.inf)
    # argmax returns the first maximum, i.e. the earliest (video id, index)
    return np.argmax(sims, axis=1), sims


def _directional(queries: Segments, refs: Segments) -> dict[str, float | int]:
    top, sims = _top1(queries, refs, exclude_self=False)
    shared = _shared_table(queries, refs)
    q_lab, r_lab = queries.labeled, refs.labeled
    labeled_idx = np.flatnonzero(q_lab)

    precisions = []
    for q in labeled_idx:
        m = int(shared[q].sum())
        if m == 0:
            continue
        ranked = np.argsort(-sims[q], kind="stable")[:m]
        precisions.append(shared[q, ranked].mean())
    return {
        "hits": int(shared[labeled_idx, top[labeled_idx]].sum()),
        "labeled": len(labeled_idx),
        "same_status": int(np.sum(q_lab == r_lab[top])),
        "all": len(queries.labels),
        "alt": int(r_lab[top[labeled_idx]].sum()),
        "precision_sum": float(np.sum(precisions)),
        "precision_n": len(precisions),
    }


def _uni_recall(segs: Segments) -> float:
    idx = np.flatnonzero(segs.labeled)
    if len(idx) == 0 or len(segs.labels) < 2:
        return 0.0
    top, _ = _top1(segs, segs, exclude_self=True)
    shared = _shared_table(segs, segs)
    return float(shared[idx, top[idx]].mean())


def alignment_metrics(audio: Segments, visual: Segments, symmetric: bool = False) -> AlignmentReport:
    """Nearest-neighbour label agreement between and within modalities.

    Cross-modal queries are audio segments searched against every visual
    segment of the corpus (both directions pooled when ``symmetric``).
    """
    if not audio.labeled.any():
        raise ValueError("no labeled query segments")
    parts = [_directional(audio, visual)]
    if symmetric:
        parts.append(_directional(visual, audio))
    total = {k: sum(p[k] for p in parts) for k in parts[0]}
    return AlignmentReport(
        recall_top1_cross=total["hits"] / total["labeled"],
        recall_top1_uni_audio=_uni_recall(audio),
        recall_top1_uni_visual=_uni_recall(visual),
        distinguish=total["same_status"] / total["all"],
        distinguish_alt=total["alt"] / total["labeled"],
        precision=total["precision_sum"] / total["precision_n"] if total["precision_n"] else 0.0,
        queries=total["all"],
        labeled_queries=total["labeled"],
    )


def reports_json(parsing: ParsingReport | None, alignment: AlignmentReport | None) -> str:
    blob = {}
    if parsing is not None:
        blob["parsing"] = parsing.to_json()
    if alignment is not None:
        blob["alignment"] = alignment.to_json()
    return json.dumps(blob, indent=2, sort_keys=True) + "\n"
