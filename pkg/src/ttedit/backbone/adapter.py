"""Adapter contract for pretrained latent-diffusion backbones.

Weights are never bundled. A manifest (JSON) names every external tensor
the adapter expects, grouped by component, plus the geometry the engine
needs up front::

    {
      "format": "ttedit-adapter-manifest",
      "version": 1,
      "latent_shape": [4, 64, 64],
      "embedding_shape": [77, 768],
      "scheduler": {"train_steps": 1000, "beta_start": 0.00085, "beta_end": 0.012},
      "codec_downsample": 8,
      "attention_layers": [{"id": "down.0.attn1", "kind": "self"}, ...],
      "tensors": {"unet/conv_in.weight": {"shape": [320, 4, 3, 3], "file": "unet.safetensors"}, ...}
    }

Tensor names are prefixed with one of ``unet/``, ``text_encoder/`` or
``vae/``; all three groups must be present. Loading the tensors into an
actual network is the caller's job: the adapter receives callables for the
denoiser, text encoder and codec and wires them into the ``Backbone``
surface. The denoiser callable must accept ``control``, a function
``(layer_id, kind, probs) -> probs`` applied to every attention softmax,
for capture and injection to work.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from ..errors import ConfigError, NumericError, ShapeError, UnsupportedError
from .base import CROSS, SELF, AttentionCapture, Backbone, LayerInfo, TextEmbedding
from .toy import AttentionControl

MANIFEST_FORMAT = "ttedit-adapter-manifest"
REQUIRED_GROUPS = ("unet", "text_encoder", "vae")


@dataclass
class AdapterManifest:
    latent_shape: tuple
    embedding_shape: tuple
    train_steps: int
    beta_start: float
    beta_end: float
    codec_downsample: int
    attention_layers: tuple
    tensors: dict
    root: Optional[Path] = None


def parse_manifest(data: dict, root=None) -> AdapterManifest:
    if data.get("format") != MANIFEST_FORMAT:
        raise ConfigError(f"manifest format must be {MANIFEST_FORMAT!r}")
    if data.get("version") != 1:
        raise ConfigError(f"unsupported manifest version {data.get('version')!r}")
    try:
        sched = data["scheduler"]
        layers = tuple(LayerInfo(l["id"], l["kind"]) for l in data["attention_layers"])
        tensors = dict(data["tensors"])
        manifest = AdapterManifest(
            latent_shape=tuple(data["latent_shape"]),
            embedding_shape=tuple(data["embedding_shape"]),
            train_steps=int(sched["train_steps"]),
            beta_start=float(sched["beta_start"]),
            beta_end=float(sched["beta_end"]),
            codec_downsample=int(data.get("codec_downsample", 8)),
            attention_layers=layers,
            tensors=tensors,
            root=Path(root) if root else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed adapter manifest: {exc}") from exc
    if len(manifest.latent_shape) != 3 or len(manifest.embedding_shape) != 2:
        raise ConfigError("latent_shape is (C, H, W) and embedding_shape is (L, D)")
    kinds = {l.kind for l in layers}
    if kinds - {SELF, CROSS} or not {SELF, CROSS} <= kinds:
        raise ConfigError("attention_layers need both 'self' and 'cross' entries and no other kinds")
    groups = {name.split("/", 1)[0] for name in tensors}
    missing = [g for g in REQUIRED_GROUPS if g not in groups]
    if missing:
        raise ConfigError(f"manifest lacks tensor groups: {missing}")
    for name, spec in tensors.items():
        if "shape" not in spec or "file" not in spec:
            raise ConfigError(f"tensor {name!r} needs 'shape' and 'file'")
    return manifest


def load_manifest(path) -> AdapterManifest:
    path = Path(path)
    return parse_manifest(json.loads(path.read_text()), root=path.parent)


def missing_weight_files(manifest: AdapterManifest) -> list:
    root = manifest.root or Path(".")
    files = sorted({spec["file"] for spec in manifest.tensors.values()})
    return [f for f in files if not (root / f).exists()]


class AdapterBackbone(Backbone):
    """``Backbone`` over externally loaded networks described by a manifest."""

    def __init__(
        self,
        manifest: AdapterManifest,
        denoiser: Callable,
        text_encoder: Callable,
        encode: Callable,
        decode: Callable,
        differentiable: bool = True,
    ):
        self.manifest = manifest
        self._denoiser = denoiser
        self._text_encoder = text_encoder
        self._encode = encode
        self._decode = decode
        self._null = None
        self.latent_shape = manifest.latent_shape
        self.attention_layers = manifest.attention_layers
        self.train_steps = manifest.train_steps
        self.beta_start = manifest.beta_start
        self.beta_end = manifest.beta_end
        self.supports_gradient_wrt_embedding = differentiable
        self.supports_attention_capture = True
        self.supports_attention_injection = True
        self._shapes = None

    def encode_text(self, prompt) -> TextEmbedding:
        tokens = self._text_encoder(prompt)
        if tuple(tokens.shape) != tuple(self.manifest.embedding_shape):
            raise ShapeError(f"text encoder returned {tuple(tokens.shape)}, manifest says {self.manifest.embedding_shape}")
        empty = (isinstance(prompt, str) and not prompt.strip()) or (not isinstance(prompt, str) and not list(prompt))
        return TextEmbedding(tokens.detach(), is_null=empty)

    def _map_shapes(self, z, t, tokens):
        if self._shapes is None:
            control = AttentionControl(capture=True)
            with torch.no_grad():
                self._denoiser(z.unsqueeze(0), t, tokens.unsqueeze(0), control)
            self._shapes = {k: tuple(m.shape[1:]) for k, m in control.maps.items()}
        return self._shapes

    def predict_noise(self, z, t, embedding, capture=False, directive=None):
        if tuple(z.shape) != tuple(self.latent_shape):
            raise ShapeError(f"latent shape {tuple(z.shape)} does not match {self.latent_shape}")
        tokens = embedding.tokens if isinstance(embedding, TextEmbedding) else embedding
        if directive:
            self.check_directive(directive, self._map_shapes(z, t, tokens))
        control = AttentionControl(capture, directive) if (capture or directive) else None
        eps = self._denoiser(z.unsqueeze(0), t, tokens.unsqueeze(0), control)[0]
        if not torch.isfinite(eps).all():
            raise NumericError(f"non-finite noise prediction at timestep {t}")
        cap = AttentionCapture({k: m[0] for k, m in control.maps.items()}, dict(control.kinds)) if capture else None
        return eps, cap

    def encode_image(self, image):
        image = np.asarray(image)
        f = self.manifest.codec_downsample
        if image.ndim != 3 or image.shape[0] % f or image.shape[1] % f:
            raise ShapeError(f"image sides must be divisible by {f}")
        return self._encode(image)

    def decode_image(self, latent):
        return self._decode(latent)


def require_toy(backbone, what: str):
    if isinstance(backbone, AdapterBackbone):
        raise UnsupportedError(f"{what} runs on the toy backbone only")
