"""Domain types, dataset files, splitting and run extraction."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

AUDIO = "audio"
VISUAL = "visual"
AUDIO_VISUAL = "audio_visual"
MODALITIES = (AUDIO, VISUAL)
TRACKS = (AUDIO, VISUAL, AUDIO_VISUAL)

LabelSet = frozenset  # frozenset[int]; empty means background

RECORD_KEYS = ("id", "audio", "visual", "seg_labels_audio", "seg_labels_visual", "video_labels")
MANIFEST = "manifest.json"


class DatasetFormatError(ValueError):
    """A dataset record could not be parsed."""


class ValidationError(ValueError):
    """A value violates a dimension or label contract."""


@dataclass(frozen=True)
class ModalSequence:
    modality: str
    embeddings: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValidationError(f"unknown modality {self.modality!r}")
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2:
            raise ValidationError(f"{self.modality} embeddings must be T x D, got shape {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise ValidationError(f"{self.modality} embeddings contain non-finite values")
        emb.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)

    @property
    def T(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class VideoSample:
    id: str
    audio: ModalSequence
    visual: ModalSequence
    seg_labels_audio: tuple[LabelSet, ...]
    seg_labels_visual: tuple[LabelSet, ...]
    video_labels: LabelSet

    def __post_init__(self):
        object.__setattr__(self, "seg_labels_audio", tuple(frozenset(s) for s in self.seg_labels_audio))
        object.__setattr__(self, "seg_labels_visual", tuple(frozenset(s) for s in self.seg_labels_visual))
        object.__setattr__(self, "video_labels", frozenset(self.video_labels))
        T = self.audio.T
        if self.visual.T != T:
            raise ValidationError(f"{self.id}: audio has {T} segments, visual has {self.visual.T}")
        if len(self.seg_labels_audio) != T or len(self.seg_labels_visual) != T:
            raise ValidationError(f"{self.id}: segment label tracks must have {T} entries")
        union = frozenset().union(*self.seg_labels_audio, *self.seg_labels_visual)
        if union != self.video_labels:
            raise ValidationError(f"{self.id}: video labels {sorted(self.video_labels)} != union {sorted(union)}")

    @property
    def T(self) -> int:
        return self.audio.T

    def label_mask(self, C: int) -> np.ndarray:
        """Boolean (T, C, 2) ground-truth mask, last axis = (audio, visual)."""
        mask = np.zeros((self.T, C, 2), dtype=bool)
        for m, track in enumerate((self.seg_labels_audio, self.seg_labels_visual)):
            for t, labels in enumerate(track):
                for c in labels:
                    mask[t, c, m] = True
        return mask

    def video_target(self, C: int) -> np.ndarray:
        y = np.zeros(C)
        y[sorted(self.video_labels)] = 1.0
        return y


@dataclass(frozen=True)
class EventInterval:
    cls: int
    modality: str
    start: int
    end: int  # inclusive

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ValidationError(f"bad interval [{self.start}, {self.end}]")

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass
class Dataset:
    samples: list[VideoSample]
    C: int
    T: int
    D_audio: int
    D_visual: int
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.samples)

    def validate(self) -> None:
        for s in self.samples:
            if s.T != self.T:
                raise ValidationError(f"{s.id}: expected T={self.T}, got {s.T}")
            if s.audio.dim != self.D_audio or s.visual.dim != self.D_visual:
                raise ValidationError(
                    f"{s.id}: expected dims ({self.D_audio}, {self.D_visual}), got ({s.audio.dim}, {s.visual.dim})"
                )
            bad = [c for c in s.video_labels if not 0 <= c < self.C]
            if bad:
                raise ValidationError(f"{s.id}: class indices {bad} outside [0, {self.C})")

    def subset(self, samples: Iterable[VideoSample]) -> "Dataset":
        return Dataset(list(samples), self.C, self.T, self.D_audio, self.D_visual, dict(self.meta))

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (N, T, D) audio and visual embeddings."""
        xa = np.stack([s.audio.embeddings for s in self.samples])
        xv = np.stack([s.visual.embeddings for s in self.samples])
        return xa, xv

    def label_masks(self) -> np.ndarray:
        return np.stack([s.label_mask(self.C) for s in self.samples])

    def video_targets(self) -> np.ndarray:
        return np.stack([s.video_target(self.C) for s in self.samples])


def extract_events(mask: Sequence[bool], cls: int, modality: str) -> list[EventInterval]:
    """Maximal runs of consecutive true entries, in order."""
    events = []
    start = None
    for t, on in enumerate(mask):
        if on and start is None:
            start = t
        elif not on and start is not None:
            events.append(EventInterval(cls, modality, start, t - 1))
            start = None
    if start is not None:
        events.append(EventInterval(cls, modality, start, len(mask) - 1))
    return events


def events_to_mask(events: Iterable[EventInterval], T: int) -> np.ndarray:
    mask = np.zeros(T, dtype=bool)
    for ev in events:
        mask[ev.start:ev.end + 1] = True
    return mask


# --- files ------------------------------------------------------------------

def fmt_float(x: float) -> str:
    return f"{x:.9g}"


def quantize(a: np.ndarray) -> np.ndarray:
    """Round to the 9 significant digits the file format keeps."""
    a = np.asarray(a, dtype=np.float64)
    flat = [float(fmt_float(v)) for v in a.ravel()]
    return np.array(flat, dtype=np.float64).reshape(a.shape)


def _matrix_json(a: np.ndarray) -> str:
    return "[" + ",".join("[" + ",".join(fmt_float(v) for v in row) + "]" for row in a) + "]"


def _labels_json(track: Sequence[LabelSet]) -> str:
    return json.dumps([sorted(s) for s in track], separators=(",", ":"))


def sample_to_line(s: VideoSample) -> str:
    parts = [
        f'"id":{json.dumps(s.id)}',
        f'"audio":{_matrix_json(s.audio.embeddings)}',
        f'"visual":{_matrix_json(s.visual.embeddings)}',
        f'"seg_labels_audio":{_labels_json(s.seg_labels_audio)}',
        f'"seg_labels_visual":{_labels_json(s.seg_labels_visual)}',
        f'"video_labels":{json.dumps(sorted(s.video_labels), separators=(",", ":"))}',
    ]
    return "{" + ",".join(parts) + "}"


def _field(record: dict, key: str, where: str):
    if key not in record:
        raise DatasetFormatError(f"{where}: missing field {key!r}")
    return record[key]


def sample_from_record(record: dict, where: str) -> VideoSample:
    if not isinstance(record, dict):
        raise DatasetFormatError(f"{where}: record is not a JSON object")
    try:
        audio = ModalSequence(AUDIO, np.array(_field(record, "audio", where), dtype=np.float64))
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{where}: field 'audio': {exc}") from exc
    try:
        visual = ModalSequence(VISUAL, np.array(_field(record, "visual", where), dtype=np.float64))
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{where}: field 'visual': {exc}") from exc
    tracks = {}
    for key in ("seg_labels_audio", "seg_labels_visual", "video_labels"):
        raw = _field(record, key, where)
        try:
            tracks[key] = [frozenset(int(c) for c in s) for s in raw] if key != "video_labels" else frozenset(int(c) for c in raw)
        except (TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{where}: field {key!r}: {exc}") from exc
    return VideoSample(
        id=str(_field(record, "id", where)),
        audio=audio,
        visual=visual,
        seg_labels_audio=tuple(tracks["seg_labels_audio"]),
        seg_labels_visual=tuple(tracks["seg_labels_visual"]),
        video_labels=tracks["video_labels"],
    )


def write_split(path: str | Path, samples: Sequence[VideoSample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(sample_to_line(s))
            fh.write("\n")


def read_split(path: str | Path) -> list[VideoSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{where}: invalid JSON: {exc.msg}") from exc
            samples.append(sample_from_record(record, where))
    return samples


def save_splits(directory: str | Path, splits: dict[str, Dataset], extra: dict[str, Any] | None = None) -> Path:
    """Write one ``<split>.jsonl`` per split plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    first = next(iter(splits.values()))
    manifest = {
        "C": first.C,
        "T": first.T,
        "D_audio": first.D_audio,
        "D_visual": first.D_visual,
        "splits": {name: len(ds) for name, ds in splits.items()},
    }
    manifest.update(extra or {})
    for name, ds in splits.items():
        if (ds.C, ds.T, ds.D_audio, ds.D_visual) != (first.C, first.T, first.D_audio, first.D_visual):
            raise ValidationError(f"split {name!r} does not match the manifest dimensions")
        write_split(directory / f"{name}.jsonl", ds.samples)
    with open(directory / MANIFEST, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=False)
        fh.write("\n")
    return directory


def load_splits(directory: str | Path) -> dict[str, Dataset]:
    directory = Path(directory)
    with open(directory / MANIFEST, encoding="utf-8") as fh:
        manifest = json.load(fh)
    out = {}
    for name in manifest["splits"]:
        samples = read_split(directory / f"{name}.jsonl")
        out[name] = Dataset(samples, manifest["C"], manifest["T"], manifest["D_audio"], manifest["D_visual"], dict(manifest))
    return out


def save_dataset(dataset: Dataset, directory: str | Path, split: str = "all") -> Path:
    return save_splits(directory, {split: dataset})


def load_dataset(directory: str | Path, split: str | None = None) -> Dataset:
    splits = load_splits(directory)
    if split is None:
        if len(splits) != 1:
            raise ValueError(f"{directory} holds splits {sorted(splits)}; name one")
        return next(iter(splits.values()))
    if split not in splits:
        raise KeyError(f"split {split!r} not in {sorted(splits)}")
    return splits[split]


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if (a.C, a.T, a.D_audio, a.D_visual, len(a)) != (b.C, b.T, b.D_audio, b.D_visual, len(b)):
        return False
    for x, y in zip(a.samples, b.samples):
        if x.id != y.id or x.seg_labels_audio != y.seg_labels_audio or x.seg_labels_visual != y.seg_labels_visual:
            return False
        if x.video_labels != y.video_labels:
            return False
        if not (np.array_equal(x.audio.embeddings, y.audio.embeddings) and np.array_equal(x.visual.embeddings, y.visual.embeddings)):
            return False
    return True


def split_dataset(dataset: Dataset, fractions: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0) -> tuple[Dataset, ...]:
    """Shuffle under ``seed`` and cut into consecutive parts of the given sizes.

    Sizes are floored and the remainder goes to the parts with the largest
    fractional remainders (ties to the earlier part).
    """
    if any(f <= 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must be positive and sum to 1, got {tuple(fractions)}")
    n, k = len(dataset), len(fractions)
    if n < k:
        raise ValueError(f"cannot split {n} samples into {k} non-empty parts")
    raw = [f * n for f in fractions]
    sizes = [int(math.floor(r + 1e-9)) for r in raw]
    order = sorted(range(k), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    # every part non-empty: borrow from the largest
    for i in range(k):
        while sizes[i] == 0:
            j = max(range(k), key=lambda m: sizes[m])
            sizes[j] -= 1
            sizes[i] += 1
    perm = np.random.default_rng(seed).permutation(n)
    parts, lo = [], 0
    for size in sizes:
        idx = sorted(perm[lo:lo + size])
        parts.append(dataset.subset(dataset.samples[i] for i in idx))
        lo += size
    return tuple(parts)
