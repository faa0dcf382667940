"""Synthetic audio-visual corpora with controllable extractor families.

Each video is driven by latent event timelines. Audio-visual events put one
shared latent into both modalities; audio-only and visual-only events draw
their own. An extractor family maps latents to embeddings and stamps a
family-specific fingerprint on every output, so two families can be made
more or less mutually "compatible" through their divergence.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import AUDIO, VISUAL, Dataset, ModalSequence, VideoSample, fmt_float, quantize

IDENTITY = "identity"
TANH = "tanh"

_PROTO_STREAM = 7_919  # seed-sequence key for class prototypes


@dataclass(frozen=True)
class GenConfig:
    videos: int = 100
    T: int = 10
    C: int = 5
    L: int = 16
    D_audio: int = 32
    D_visual: int = 32
    density_audio: float = 0.5
    density_visual: float = 0.5
    av_fraction: float = 0.8
    background_fraction: float = 0.2
    noise: float = 0.1
    event_length: float = 3.0
    event_jitter: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("videos", "T", "C", "L", "D_audio", "D_visual"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("density_audio", "density_visual", "av_fraction", "background_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.noise < 0 or self.event_jitter < 0:
            raise ValueError("noise scales must be non-negative")
        if self.event_length < 1:
            raise ValueError("event_length must be at least 1")
        for name in ("density_audio", "density_visual"):
            if self.background_fraction > 0 and getattr(self, name) > 1.0 - self.background_fraction:
                raise ValueError(
                    f"{name}={getattr(self, name)} leaves less than the required "
                    f"background fraction {self.background_fraction}"
                )


@dataclass(frozen=True)
class ExtractorFamily:
    name: str
    transform: np.ndarray  # D x L, orthonormal columns
    bias: np.ndarray  # D
    nonlinearity: str
    fingerprint: np.ndarray  # D, unit norm
    rho: float

    def __post_init__(self):
        W = np.asarray(self.transform, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] < W.shape[1]:
            raise ValueError(f"{self.name}: transform must be D x L with D >= L, got {W.shape}")
        if not np.allclose(W.T @ W, np.eye(W.shape[1]), atol=1e-9):
            raise ValueError(f"{self.name}: transform columns are not orthonormal")
        if self.nonlinearity not in (IDENTITY, TANH):
            raise ValueError(f"{self.name}: unknown nonlinearity {self.nonlinearity!r}")
        if self.rho < 0:
            raise ValueError(f"{self.name}: rho must be non-negative")
        if np.shape(self.bias) != (W.shape[0],) or np.shape(self.fingerprint) != (W.shape[0],):
            raise ValueError(f"{self.name}: bias and fingerprint must have length {W.shape[0]}")

    @property
    def D(self) -> int:
        return self.transform.shape[0]

    @property
    def L(self) -> int:
        return self.transform.shape[1]

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "nonlinearity": self.nonlinearity,
            "rho": self.rho,
            "transform": [[float(fmt_float(v)) for v in row] for row in self.transform],
            "bias": [float(fmt_float(v)) for v in self.bias],
            "fingerprint": [float(fmt_float(v)) for v in self.fingerprint],
        }


@dataclass(frozen=True)
class Collocation:
    audio: ExtractorFamily
    visual: ExtractorFamily

    def __post_init__(self):
        if self.audio.L != self.visual.L:
            raise ValueError("collocated families must share the latent dimension")

    @property
    def id(self) -> str:
        return f"{self.audio.name}+{self.visual.name}"


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    # fix the sign convention so the factorization is unique
    return q * np.sign(np.diag(r))


def make_family(
    name: str,
    D: int,
    L: int,
    seed: int,
    angle: float = 0.0,
    rho: float = 0.5,
    nonlinearity: str = IDENTITY,
    bias_scale: float = 0.1,
) -> ExtractorFamily:
    """Family on a seeded great-circle path; ``angle`` rotates away from the base.

    The transform is cos(a) * W0 + sin(a) * W1 with W0, W1 mutually orthogonal
    orthonormal blocks, and the fingerprint rotates the same way, so the
    divergence from the ``angle=0`` member of the same seed is 1 - cos(a).
    """
    rng = np.random.default_rng(seed)
    if D >= 2 * L:
        block = _orthonormal(rng, D, 2 * L)
        W0, W1 = block[:, :L], block[:, L:]
    else:
        W0 = _orthonormal(rng, D, L)
        W1 = W0
        if angle != 0.0:
            raise ValueError(f"rotated families need D >= 2L, got D={D}, L={L}")
    fp = _orthonormal(rng, D, 2)
    bias = bias_scale * rng.standard_normal(D)
    c, s = np.cos(angle), np.sin(angle)
    return ExtractorFamily(
        name=name,
        transform=c * W0 + s * W1,
        bias=bias,
        nonlinearity=nonlinearity,
        fingerprint=c * fp[:, 0] + s * fp[:, 1],
        rho=rho,
    )


def divergence_angle(divergence: float) -> float:
    """Rotation angle giving ``divergence`` from the base member of a family path."""
    if not 0.0 <= divergence <= 1.0:
        raise ValueError("divergence must lie in [0, 1]")
    return float(np.arccos(1.0 - divergence))


def apply_extractor_family(latents: np.ndarray, family: ExtractorFamily) -> np.ndarray:
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[1] != family.L:
        raise ValueError(f"{family.name}: expected (T, {family.L}) latents, got {latents.shape}")
    pre = latents @ family.transform.T + family.bias
    if family.nonlinearity == TANH:
        pre = np.tanh(pre)
    return pre + family.rho * family.fingerprint


def family_divergence(f1: ExtractorFamily, f2: ExtractorFamily) -> float:
    """Average of column-wise and fingerprint-direction divergence, each 1 - |cos|."""
    if f1.transform.shape != f2.transform.shape:
        raise ValueError(f"families live in different spaces: {f1.transform.shape} vs {f2.transform.shape}")

    def abs_cos(u, v):
        return abs(float(u @ v)) / (np.linalg.norm(u) * np.linalg.norm(v))

    cols = np.mean([abs_cos(f1.transform[:, k], f2.transform[:, k]) for k in range(f1.L)])
    fp = abs_cos(f1.fingerprint, f2.fingerprint)
    return float(np.clip(0.5 * (1.0 - cols) + 0.5 * (1.0 - fp), 0.0, 1.0))


def _two_state_chain(rng: np.random.Generator, T: int, density: float, mean_len: float) -> np.ndarray:
    """Stationary on/off Markov chain whose marginal on-probability is ``density``."""
    if density <= 0.0:
        return np.zeros(T, dtype=bool)
    if density >= 1.0:
        return np.ones(T, dtype=bool)
    p_off = 1.0 / mean_len
    p_on = p_off * density / (1.0 - density)
    if p_on > 1.0:
        p_on, p_off = 1.0, (1.0 - density) / density
    state = rng.random() < density
    out = np.empty(T, dtype=bool)
    for t in range(T):
        out[t] = state
        u = rng.random()
        state = (u >= p_off) if state else (u < p_on)
    return out


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    runs, start = [], None
    for t, on in enumerate(mask):
        if on and start is None:
            start = t
        if not on and start is not None:
            runs.append((start, t))
            start = None
    if start is not None:
        runs.append((start, len(mask)))
    return runs


def class_prototypes(cfg: GenConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, _PROTO_STREAM])
    protos = rng.standard_normal((cfg.C, cfg.L))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


@dataclass
class LatentVideo:
    audio: np.ndarray  # T x L
    visual: np.ndarray
    labels_audio: list[frozenset]
    labels_visual: list[frozenset]


def sample_latent_video(cfg: GenConfig, index: int, protos: np.ndarray) -> LatentVideo:
    rng = np.random.default_rng([cfg.seed, index])
    T, L = cfg.T, cfg.L
    d_av = cfg.av_fraction * min(cfg.density_audio, cfg.density_visual)
    lat = {AUDIO: np.zeros((T, L)), VISUAL: np.zeros((T, L))}
    labels = {AUDIO: [set() for _ in range(T)], VISUAL: [set() for _ in range(T)]}

    def event_latent(c: int) -> np.ndarray:
        return protos[c] + cfg.event_jitter * rng.standard_normal(L) / np.sqrt(L)

    for start, stop in _runs(_two_state_chain(rng, T, d_av, cfg.event_length)):
        c = int(rng.integers(cfg.C))
        e = event_latent(c)
        for m in (AUDIO, VISUAL):
            lat[m][start:stop] += e
            for t in range(start, stop):
                labels[m][t].add(c)
    for m, density in ((AUDIO, cfg.density_audio), (VISUAL, cfg.density_visual)):
        d_ex = 1.0 - (1.0 - density) / (1.0 - d_av) if d_av < 1.0 else 0.0
        for start, stop in _runs(_two_state_chain(rng, T, max(d_ex, 0.0), cfg.event_length)):
            c = int(rng.integers(cfg.C))
            lat[m][start:stop] += event_latent(c)
            for t in range(start, stop):
                labels[m][t].add(c)
    for m in (AUDIO, VISUAL):
        lat[m] += cfg.noise * rng.standard_normal((T, L))
    return LatentVideo(
        lat[AUDIO], lat[VISUAL],
        [frozenset(s) for s in labels[AUDIO]], [frozenset(s) for s in labels[VISUAL]],
    )


def generate_dataset(cfg: GenConfig, audio_family: ExtractorFamily, visual_family: ExtractorFamily) -> Dataset:
    if audio_family.L != cfg.L or visual_family.L != cfg.L:
        raise ValueError(f"families must map from the latent dimension L={cfg.L}")
    if audio_family.D != cfg.D_audio or visual_family.D != cfg.D_visual:
        raise ValueError("family output dims must match D_audio / D_visual")
    protos = class_prototypes(cfg)
    width = len(str(cfg.videos - 1))
    samples = []
    for i in range(cfg.videos):
        v = sample_latent_video(cfg, i, protos)
        ea = quantize(apply_extractor_family(v.audio, audio_family))
        ev = quantize(apply_extractor_family(v.visual, visual_family))
        samples.append(VideoSample(
            id=f"v{i:0{width}d}",
            audio=ModalSequence(AUDIO, ea),
            visual=ModalSequence(VISUAL, ev),
            seg_labels_audio=tuple(v.labels_audio),
            seg_labels_visual=tuple(v.labels_visual),
            video_labels=frozenset().union(*v.labels_audio, *v.labels_visual),
        ))
    meta = {"generator": asdict(cfg), "families": {"audio": audio_family.name, "visual": visual_family.name}}
    return Dataset(samples, cfg.C, cfg.T, cfg.D_audio, cfg.D_visual, meta)


def save_families(path: str | Path, families: Sequence[ExtractorFamily]) -> None:
    blob = [f.to_json() for f in families]
    Path(path).write_text(json.dumps(blob, indent=1) + "\n", encoding="utf-8")


def load_families(path: str | Path) -> list[ExtractorFamily]:
    blob = json.loads(Path(path).read_text(encoding="utf-8"))
    out = []
    for f in blob:
        W = np.array(f["transform"], dtype=np.float64)
        # 9-digit storage perturbs orthonormality slightly; re-orthonormalize
        q, r = np.linalg.qr(W)
        W = q * np.sign(np.diag(r))
        out.append(ExtractorFamily(f["name"], W, np.array(f["bias"]), f["nonlinearity"], np.array(f["fingerprint"]), f["rho"]))
    return out
