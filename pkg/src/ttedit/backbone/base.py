"""Backbone surface shared by the toy model and pretrained adapters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import torch

from ..errors import InjectionError, ShapeError, UnsupportedError

SELF = "self"
CROSS = "cross"


@dataclass
class TextEmbedding:
    tokens: torch.Tensor  # (sequence_length, embed_dim)
    is_null: bool = False

    def __post_init__(self):
        if self.tokens.dim() != 2 or self.tokens.shape[0] < 1:
            raise ShapeError(f"embedding tokens must be (L, D) with L >= 1, got {tuple(self.tokens.shape)}")

    @property
    def shape(self):
        return tuple(self.tokens.shape)

    def with_tokens(self, tokens: torch.Tensor) -> "TextEmbedding":
        return TextEmbedding(tokens, is_null=False)

    def detach(self) -> "TextEmbedding":
        return TextEmbedding(self.tokens.detach().clone(), self.is_null)


@dataclass(frozen=True)
class LayerInfo:
    layer_id: str
    kind: str  # SELF or CROSS


@dataclass
class AttentionCapture:
    """Softmax probability maps of one forward pass, ``(heads, queries, keys)`` per layer."""

    maps: dict = field(default_factory=dict)
    kinds: dict = field(default_factory=dict)
    step_index: int = 0

    def of_kind(self, kind: str) -> dict:
        return {k: m for k, m in self.maps.items() if self.kinds[k] == kind}


@dataclass
class InjectionDirective:
    """Replacement probability maps for named layers of the receiving forward.

    ``provenance`` records which process each map came from
    (``"reconstruction"`` or ``"transition"``).
    """

    maps: dict = field(default_factory=dict)
    kinds: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def merge(self, other: "InjectionDirective") -> "InjectionDirective":
        return InjectionDirective(
            {**self.maps, **other.maps},
            {**self.kinds, **other.kinds},
            {**self.provenance, **other.provenance},
        )

    @classmethod
    def from_capture(cls, capture: AttentionCapture, kind: str, provenance: str, layer_filter=None):
        maps = {
            k: m for k, m in capture.of_kind(kind).items() if layer_filter is None or layer_filter(k)
        }
        return cls(maps, {k: kind for k in maps}, {k: provenance for k in maps})

    def __bool__(self):
        return bool(self.maps)


class Backbone:
    """Denoiser, text encoder and latent codec behind one handle.

    Subclasses provide ``encode_text``, ``predict_noise`` and the codec; the
    gradient helper and the capability self-test are shared.
    """

    latent_shape: tuple = ()
    attention_layers: tuple = ()
    train_steps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    supports_gradient_wrt_embedding = False
    supports_attention_capture = False
    supports_attention_injection = False

    _null: Optional[TextEmbedding] = None

    @property
    def null_embedding(self) -> TextEmbedding:
        if self._null is None:
            self._null = self.encode_text([])
        return self._null

    def encode_text(self, prompt) -> TextEmbedding:
        raise NotImplementedError

    def predict_noise(self, z, t, embedding, capture=False, directive=None):
        raise NotImplementedError

    def encode_image(self, image):
        raise NotImplementedError

    def decode_image(self, latent):
        raise NotImplementedError

    def layer_kinds(self) -> dict:
        return {info.layer_id: info.kind for info in self.attention_layers}

    def check_directive(self, directive: Optional[InjectionDirective], expected_shapes: dict):
        if not directive:
            return
        if not self.supports_attention_injection:
            raise UnsupportedError("backbone does not support attention injection")
        kinds = self.layer_kinds()
        for layer_id, m in directive.maps.items():
            if layer_id not in kinds:
                raise InjectionError(f"unknown attention layer {layer_id!r}")
            if directive.kinds.get(layer_id, kinds[layer_id]) != kinds[layer_id]:
                raise InjectionError(f"layer {layer_id!r} is {kinds[layer_id]}-attention")
            if tuple(m.shape) != tuple(expected_shapes[layer_id]):
                raise InjectionError(
                    f"map for {layer_id!r} has shape {tuple(m.shape)}, layer expects {tuple(expected_shapes[layer_id])}"
                )

    def gradient_wrt_embedding(self, loss_evaluator: Callable, z, t, embedding: TextEmbedding) -> torch.Tensor:
        """Exact gradient of ``loss_evaluator(eps)`` w.r.t. the embedding entries."""
        if not self.supports_gradient_wrt_embedding:
            raise UnsupportedError("backbone cannot differentiate w.r.t. the text embedding")
        tokens = embedding.tokens.detach().clone().requires_grad_(True)
        with torch.enable_grad():
            eps, _ = self.predict_noise(z, t, TextEmbedding(tokens, embedding.is_null))
            loss = loss_evaluator(eps)
            if not torch.is_tensor(loss) or not loss.requires_grad:
                return torch.zeros_like(tokens)
            (grad,) = torch.autograd.grad(loss, tokens, allow_unused=True)
        return torch.zeros_like(tokens) if grad is None else grad

    def self_test(self) -> dict:
        """Probe advertised capabilities; returns the verified flags."""
        kinds = [info.kind for info in self.attention_layers]
        if SELF not in kinds or CROSS not in kinds:
            raise UnsupportedError("backbone needs at least one self- and one cross-attention layer")
        emb = self.null_embedding
        z = torch.zeros(self.latent_shape)
        result = {}
        if self.supports_attention_capture:
            _, cap = self.predict_noise(z, self.train_steps // 2, emb, capture=True)
            result["capture"] = cap is not None and set(cap.maps) == {i.layer_id for i in self.attention_layers}
        if self.supports_gradient_wrt_embedding:
            g = self.gradient_wrt_embedding(lambda e: e.square().sum(), z, self.train_steps // 2, emb)
            result["gradient"] = bool(torch.isfinite(g).all()) and g.shape == emb.tokens.shape
        if self.supports_attention_injection and self.supports_attention_capture:
            eps, cap = self.predict_noise(z, self.train_steps // 2, emb, capture=True)
            directive = InjectionDirective(dict(cap.maps), dict(cap.kinds), {k: "self-test" for k in cap.maps})
            eps2, _ = self.predict_noise(z, self.train_steps // 2, emb, directive=directive)
            result["injection"] = bool(torch.equal(eps, eps2))
        bad = [k for k, ok in result.items() if not ok]
        if bad:
            raise UnsupportedError(f"backbone capability self-test failed: {bad}")
        return result
