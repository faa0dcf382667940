"""Toy audio-visual parsing network.

adapters -> shared self-attention encoder t -> projection heads g (for the
contrastive term) and one cross-attention block per direction -> per-modality
segment classifiers -> attention MIL pooling over the 2T segment slots.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numgrad as ng
from .core import VideoSample, fmt_float
from .numgrad import Tensor

FORMAT_VERSION = "avalign-model/1"

ATTENTION = "attention"
MAX = "max"


@dataclass(frozen=True)
class ModelDims:
    D_audio: int
    D_visual: int
    H: int = 32
    C: int = 5
    P: int | None = None  # projection dim, defaults to H
    shared_projection: bool = True
    tied_adapters: bool = False

    def __post_init__(self):
        for name in ("D_audio", "D_visual", "H", "C"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.P is not None and self.P <= 0:
            raise ValueError(f"P must be positive, got {self.P}")

    @property
    def proj(self) -> int:
        return self.H if self.P is None else self.P


def _shapes(d: ModelDims) -> dict[str, tuple[int, ...]]:
    H, P, C = d.H, d.proj, d.C
    shapes = {
        "adapter_audio.W": (d.D_audio, H),
        "adapter_audio.b": (H,),
        "adapter_visual.W": (d.D_visual, H),
        "adapter_visual.b": (H,),
        "encoder.Wq": (H, H),
        "encoder.Wk": (H, H),
        "encoder.Wv": (H, H),
    }
    if d.shared_projection:
        shapes.update({"proj.W": (H, P), "proj.b": (P,)})
    else:
        shapes.update({"proj_audio.W": (H, P), "proj_audio.b": (P,), "proj_visual.W": (H, P), "proj_visual.b": (P,)})
    for direction in ("a_from_v", "v_from_a"):
        for m in ("Wq", "Wk", "Wv"):
            shapes[f"fusion_{direction}.{m}"] = (H, H)
    shapes.update({
        "classifier_audio.W": (H, C),
        "classifier_audio.b": (C,),
        "classifier_visual.W": (H, C),
        "classifier_visual.b": (C,),
        "mil.w": (H, 1),
    })
    return shapes


def init_model(dims: ModelDims, seed: int = 0) -> dict[str, np.ndarray]:
    """Glorot-uniform maps, zero biases, drawn in a fixed name order.

    With ``tied_adapters`` and equal input dims both adapters start from the
    same matrix, so similar extractor outputs land close together in the
    shared encoder space before any training.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _shapes(dims).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-a, a, size=shape)
    if dims.tied_adapters and dims.D_audio == dims.D_visual:
        params["adapter_visual.W"] = params["adapter_audio.W"].copy()
    return params


@dataclass
class ForwardOutput:
    encoded_audio: Tensor
    encoded_visual: Tensor
    projected_audio: Tensor | None
    projected_visual: Tensor | None
    fused_audio: Tensor
    fused_visual: Tensor
    segment_probs_audio: Tensor
    segment_probs_visual: Tensor
    video_probs: Tensor
    attention: dict[str, np.ndarray]


def _attend(query_src: Tensor, key_src: Tensor, wq, wk, wv) -> tuple[Tensor, Tensor]:
    q = query_src @ wq
    k = key_src @ wk
    v = key_src @ wv
    scale = 1.0 / np.sqrt(q.shape[-1])
    weights = ng.softmax((q @ ng.swapaxes(k)) * scale, axis=-1)
    return weights @ v, weights


def forward_batch(params: Mapping[str, Tensor | np.ndarray], xa, xv, pooling: str = ATTENTION) -> ForwardOutput:
    """Run the network on (B, T, D_audio) and (B, T, D_visual) inputs."""
    p = {k: ng.as_tensor(v) for k, v in params.items()}
    xa, xv = ng.as_tensor(xa), ng.as_tensor(xv)
    if xa.ndim != 3 or xv.ndim != 3 or xa.shape[:2] != xv.shape[:2]:
        raise ValueError(f"expected (B, T, D) inputs with shared B and T, got {xa.shape} and {xv.shape}")
    if xa.shape[-1] != p["adapter_audio.W"].shape[0] or xv.shape[-1] != p["adapter_visual.W"].shape[0]:
        raise ValueError(
            f"input dims ({xa.shape[-1]}, {xv.shape[-1]}) do not match model "
            f"({p['adapter_audio.W'].shape[0]}, {p['adapter_visual.W'].shape[0]})"
        )
    attn = {}

    ha0 = xa @ p["adapter_audio.W"] + p["adapter_audio.b"]
    hv0 = xv @ p["adapter_visual.W"] + p["adapter_visual.b"]

    encoded = []
    for name, h0 in (("audio", ha0), ("visual", hv0)):
        ctx, w = _attend(h0, h0, p["encoder.Wq"], p["encoder.Wk"], p["encoder.Wv"])
        attn[f"self_{name}"] = w.value
        encoded.append(ng.tanh(h0 + ctx))
    ha, hv = encoded

    def project(h, key):
        return h @ p[key + ".W"] + p[key + ".b"] if key + ".W" in p else None

    if "proj.W" in p:
        za, zv = project(ha, "proj"), project(hv, "proj")
    else:
        za, zv = project(ha, "proj_audio"), project(hv, "proj_visual")

    f = "fusion_a_from_v."
    ctx_a, w = _attend(ha, hv, p[f + "Wq"], p[f + "Wk"], p[f + "Wv"])
    attn["cross_a_from_v"] = w.value
    f = "fusion_v_from_a."
    ctx_v, w = _attend(hv, ha, p[f + "Wq"], p[f + "Wk"], p[f + "Wv"])
    attn["cross_v_from_a"] = w.value
    fa = ha + ctx_a
    fv = hv + ctx_v

    pa = ng.sigmoid(fa @ p["classifier_audio.W"] + p["classifier_audio.b"])
    pv = ng.sigmoid(fv @ p["classifier_visual.W"] + p["classifier_visual.b"])

    slot_probs = ng.concat([pa, pv], axis=1)  # (B, 2T, C)
    if pooling == ATTENTION:
        slots = ng.concat([fa, fv], axis=1)
        weights = ng.softmax(slots @ p["mil.w"], axis=1)  # (B, 2T, 1)
        attn["mil"] = weights.value[..., 0]
        video = ng.tsum(weights * slot_probs, axis=1)
    elif pooling == MAX:
        video = ng.amax(slot_probs, axis=1)
    else:
        raise ValueError(f"unknown pooling {pooling!r}")

    return ForwardOutput(ha, hv, za, zv, fa, fv, pa, pv, video, attn)


def forward(params, sample: VideoSample, pooling: str = ATTENTION) -> ForwardOutput:
    xa = sample.audio.embeddings[None]
    xv = sample.visual.embeddings[None]
    out = forward_batch(params, xa, xv, pooling)
    squeeze = lambda t: None if t is None else ng.reshape(t, t.shape[1:])
    return ForwardOutput(
        squeeze(out.encoded_audio), squeeze(out.encoded_visual),
        squeeze(out.projected_audio), squeeze(out.projected_visual),
        squeeze(out.fused_audio), squeeze(out.fused_visual),
        squeeze(out.segment_probs_audio), squeeze(out.segment_probs_visual),
        squeeze(out.video_probs),
        {k: v[0] for k, v in out.attention.items()},
    )


def finalize_projection(params: Mapping[str, np.ndarray], preserve_audio: bool = False) -> dict[str, np.ndarray]:
    """Keep g for the visual branch only, unless ``preserve_audio``.

    A shared head is split into per-branch copies so saved models always use
    the ``proj_<modality>`` names.
    """
    out = {k: v for k, v in params.items() if not k.startswith("proj")}
    for suffix in ("W", "b"):
        shared = params.get(f"proj.{suffix}")
        visual = params.get(f"proj_visual.{suffix}", shared)
        audio = params.get(f"proj_audio.{suffix}", shared)
        if visual is not None:
            out[f"proj_visual.{suffix}"] = visual
        if preserve_audio and audio is not None:
            out[f"proj_audio.{suffix}"] = audio
    return out


def bce_loss(video_probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over batch and classes."""
    y = np.asarray(targets, dtype=np.float64)
    return -ng.mean(ng.log(video_probs) * y + ng.log(1.0 - video_probs) * (1.0 - y))


def save_model(path: str | Path, params: Mapping[str, np.ndarray], dims: ModelDims, extra: dict | None = None) -> None:
    lines = ["{", f'  "version": {json.dumps(FORMAT_VERSION)},', f'  "dims": {json.dumps(asdict(dims))},']
    if extra:
        lines.append(f'  "extra": {json.dumps(extra, sort_keys=True)},')
    lines.append('  "params": {')
    names = list(params)
    for n, name in enumerate(names):
        a = np.asarray(params[name])
        data = ",".join(fmt_float(v) for v in a.ravel())
        tail = "," if n < len(names) - 1 else ""
        lines.append(f'    {json.dumps(name)}: {{"shape": {list(a.shape)}, "data": [{data}]}}{tail}')
    lines += ["  }", "}"]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> tuple[dict[str, np.ndarray], ModelDims]:
    blob = json.loads(Path(path).read_text(encoding="utf-8"))
    if blob.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported model version {blob.get('version')!r}")
    dims = ModelDims(**blob["dims"])
    params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in blob["params"].items()}
    return params, dims
