"""Desk-trainable toy latent-diffusion backbone.

A two-level convolutional encoder/decoder with one self- and one
cross-attention block per level, conditioned on a learned token-embedding
text encoder. Every attention block routes its softmax probabilities
through an optional controller, which is how maps are captured from one
process and injected into another.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..diffusion import make_schedule
from ..errors import NumericError, ShapeError, TrainingError
from . import shapes
from .base import CROSS, SELF, AttentionCapture, Backbone, InjectionDirective, LayerInfo, TextEmbedding

log = logging.getLogger(__name__)


@dataclass
class ToyBackboneConfig:
    latent_size: int = 16
    latent_channels: int = 4
    widths: tuple = (32, 64)
    heads: int = 4
    embed_dim: int = 32
    seq_len: int = 8
    # Exposed text embeddings are the internal token vectors divided by this
    # gain; the denoiser multiplies it back. A power of two keeps the round
    # trip exact, so training is unaffected while a fixed optimizer step on
    # the embedding moves the prediction about as much as it does on a
    # large pretrained model.
    context_gain: float = 128.0
    vocab: tuple = shapes.VOCAB
    seed: int = 0
    # training
    train_steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 2e-3
    cond_drop: float = 0.15

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.vocab = tuple(self.vocab)
        if min(self.latent_size, self.latent_channels, self.heads, self.embed_dim, self.seq_len, *self.widths) <= 0:
            raise ValueError("toy backbone sizes must be positive")
        if self.latent_channels < 3:
            raise ValueError("the toy codec stores RGB in the first three latent channels")
        if self.latent_size % 2:
            raise ValueError("latent_size must be even (one downsampling level)")
        if not self.context_gain > 0:
            raise ValueError("context_gain must be positive")
        if any(w % self.heads for w in self.widths):
            raise ValueError("every width must be divisible by the head count")

    @property
    def latent_shape(self):
        return (self.latent_channels, self.latent_size, self.latent_size)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyBackboneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class AttentionControl:
    """Per-forward hook state: records maps and/or substitutes injected ones."""

    def __init__(self, capture: bool = False, directive: Optional[InjectionDirective] = None):
        self.capture = capture
        self.directive = directive
        self.maps = {}
        self.kinds = {}

    def __call__(self, layer_id, kind, probs):
        if self.directive is not None and layer_id in self.directive.maps:
            m = self.directive.maps[layer_id].to(probs.dtype)
            probs = m.unsqueeze(0).expand_as(probs) if m.dim() == probs.dim() - 1 else m
        if self.capture:
            self.maps[layer_id] = probs.detach()
            self.kinds[layer_id] = kind
        return probs


class Attention(nn.Module):
    def __init__(self, layer_id, kind, channels, heads, context_dim=None):
        super().__init__()
        self.layer_id = layer_id
        self.kind = kind
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        kv_dim = channels if kind == SELF else context_dim
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(kv_dim, channels, bias=False)
        self.to_v = nn.Linear(kv_dim, channels, bias=False)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x, context=None, control=None):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        source = tokens if self.kind == SELF else context
        q = self.to_q(tokens).view(b, -1, self.heads, c // self.heads).transpose(1, 2) / math.sqrt(c // self.heads)
        k = self.to_k(source).view(b, -1, self.heads, c // self.heads).transpose(1, 2)
        v = self.to_v(source).view(b, -1, self.heads, c // self.heads).transpose(1, 2)
        probs = torch.softmax(q @ k.transpose(-1, -2), dim=-1)
        if control is not None:
            probs = control(self.layer_id, self.kind, probs)
        out = (probs @ v).transpose(1, 2).reshape(b, h * w, c)
        return x + self.proj(out).transpose(1, 2).view(b, c, h, w)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, tdim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, 2 * cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.temb(temb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class ToyDenoiser(nn.Module):
    def __init__(self, cfg: ToyBackboneConfig):
        super().__init__()
        c1, c2 = cfg.widths
        tdim = 4 * c1
        d = cfg.embed_dim
        self.tdim = tdim
        self.context_gain = float(cfg.context_gain)
        self.token_table = nn.Embedding(len(cfg.vocab), d)
        self.positions = nn.Parameter(torch.randn(cfg.seq_len, d) * 0.1)
        self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.pooled = nn.Linear(d, tdim)
        self.inp = nn.Conv2d(cfg.latent_channels, c1, 3, padding=1)
        self.enc = ResBlock(c1, c1, tdim)
        self.down = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.mid1 = ResBlock(c2, c2, tdim)
        self.mid_self = Attention("mid.self", SELF, c2, cfg.heads)
        self.mid_cross = Attention("mid.cross", CROSS, c2, cfg.heads, d)
        self.mid2 = ResBlock(c2, c2, tdim)
        self.up = nn.Conv2d(c2, c1, 3, padding=1)
        self.dec = ResBlock(2 * c1, c1, tdim)
        self.dec_self = Attention("dec.self", SELF, c1, cfg.heads)
        self.dec_cross = Attention("dec.cross", CROSS, c1, cfg.heads, d)
        self.out_norm = nn.GroupNorm(8, c1)
        self.out = nn.Conv2d(c1, cfg.latent_channels, 3, padding=1)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return (self.token_table(ids) + self.positions) / self.context_gain

    def forward(self, z, t, context, control=None):
        context = context * self.context_gain
        temb = timestep_embedding(t, self.tdim).to(z.dtype)
        temb = self.time_mlp(temb) + self.pooled(context.mean(dim=1))
        h1 = self.enc(self.inp(z), temb)
        h = self.mid1(self.down(h1), temb)
        h = self.mid_self(h, control=control)
        h = self.mid_cross(h, context, control=control)
        h = self.mid2(h, temb)
        h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec(torch.cat([h, h1], dim=1), temb)
        h = self.dec_self(h, control=control)
        h = self.dec_cross(h, context, control=control)
        return self.out(F.silu(self.out_norm(h)))


def _build_model(cfg: ToyBackboneConfig) -> ToyDenoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = ToyDenoiser(cfg)
    return model


class ToyBackbone(Backbone):
    """Immutable handle over a (trained) toy denoiser."""

    supports_gradient_wrt_embedding = True
    supports_attention_capture = True
    supports_attention_injection = True

    def __init__(self, config: ToyBackboneConfig, model: Optional[ToyDenoiser] = None, loss_curve=None):
        self.config = config
        self.model = model if model is not None else _build_model(config)
        self.model.eval()
        self.model.requires_grad_(False)
        self.loss_curve = list(loss_curve or [])
        self.latent_shape = config.latent_shape
        self.attention_layers = tuple(
            LayerInfo(m.layer_id, m.kind) for m in self.model.modules() if isinstance(m, Attention)
        )
        self._token_index = {tok: i for i, tok in enumerate(config.vocab)}
        self._null = None
        s, c = config.latent_size, config.widths
        hw = {"mid": (s // 2) ** 2, "dec": s**2}
        self._map_shapes = {
            info.layer_id: (
                config.heads,
                hw[info.layer_id.split(".")[0]],
                hw[info.layer_id.split(".")[0]] if info.kind == SELF else config.seq_len,
            )
            for info in self.attention_layers
        }

    @property
    def dtype(self):
        return self.model.inp.weight.dtype

    def to(self, dtype) -> "ToyBackbone":
        """Copy of this handle with weights cast to ``dtype`` (e.g. float64 for gradient checks)."""
        return ToyBackbone(self.config, copy.deepcopy(self.model).to(dtype), self.loss_curve)

    def map_shape(self, layer_id):
        return self._map_shapes[layer_id]

    def encode_text(self, prompt) -> TextEmbedding:
        tokens = shapes.tokenize(prompt)
        if len(tokens) > self.config.seq_len:
            raise ShapeError(f"prompt longer than {self.config.seq_len} tokens")
        ids = [self._token_index[t] for t in tokens]
        ids += [self._token_index[shapes.PAD]] * (self.config.seq_len - len(ids))
        with torch.no_grad():
            emb = self.model.embed_tokens(torch.tensor(ids))
        return TextEmbedding(emb.detach().clone(), is_null=not tokens)

    def predict_noise(self, z, t, embedding, capture=False, directive=None):
        if tuple(z.shape) != tuple(self.latent_shape):
            raise ShapeError(f"latent shape {tuple(z.shape)} does not match backbone {self.latent_shape}")
        tokens = embedding.tokens if isinstance(embedding, TextEmbedding) else embedding
        if tuple(tokens.shape) != (self.config.seq_len, self.config.embed_dim):
            raise ShapeError(f"embedding shape {tuple(tokens.shape)} does not match backbone")
        self.check_directive(directive, self._map_shapes)
        control = AttentionControl(capture, directive) if (capture or directive) else None
        tt = torch.tensor([int(t)])
        eps = self.model(z.unsqueeze(0).to(self.dtype), tt, tokens.unsqueeze(0).to(self.dtype), control)[0]
        if not torch.isfinite(eps).all():
            raise NumericError(f"non-finite noise prediction at timestep {t}")
        cap = None
        if capture:
            cap = AttentionCapture({k: m[0] for k, m in control.maps.items()}, dict(control.kinds))
        return eps, cap

    def encode_image(self, image) -> torch.Tensor:
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"expected an RGB array (H, W, 3), got {image.shape}")
        h, w, _ = image.shape
        rgb = torch.from_numpy(image.astype(np.float32) / 255.0).permute(2, 0, 1)
        pad = torch.zeros(self.config.latent_channels - 3, h, w)
        return torch.cat([rgb, pad]).contiguous()

    def decode_float(self, latent) -> np.ndarray:
        return latent[:3].detach().to(torch.float32).permute(1, 2, 0).numpy()

    def decode_image(self, latent) -> np.ndarray:
        if latent.dim() != 3 or latent.shape[0] != self.config.latent_channels:
            raise ShapeError(f"expected a latent with {self.config.latent_channels} channels")
        return np.clip(np.round(self.decode_float(latent) * 255.0), 0, 255).astype(np.uint8)

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().to(torch.float32).numpy().astype("<f4").tobytes())
        return h.hexdigest()


def _batch(rng, cfg: ToyBackboneConfig, n: int):
    tok = {t: i for i, t in enumerate(cfg.vocab)}
    images, ids = [], []
    for _ in range(n):
        scene = shapes.random_scene(rng)
        images.append(shapes.render(scene, cfg.latent_size))
        prompt = shapes.training_prompt(scene, rng, cfg.cond_drop)
        ids.append([tok[t] for t in prompt] + [tok[shapes.PAD]] * (cfg.seq_len - len(prompt)))
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2)
    pad = torch.zeros(n, cfg.latent_channels - 3, cfg.latent_size, cfg.latent_size)
    return torch.cat([x, pad], dim=1), torch.tensor(ids)


def _dsm_loss(model, x0, ids, t, noise, alpha_bar):
    ab = alpha_bar[t].to(x0.dtype)[:, None, None, None]
    zt = ab.sqrt() * x0 + (1 - ab).sqrt() * noise
    return F.mse_loss(model(zt, t, model.embed_tokens(ids)), noise)


def validation_loss(model, cfg: ToyBackboneConfig, n: int = 128) -> float:
    """Denoising loss on a fixed held-out batch (fixed scenes, timesteps and noise)."""
    rng = np.random.default_rng(cfg.seed + 7919)
    x0, ids = _batch(rng, cfg, n)
    g = torch.Generator().manual_seed(cfg.seed + 7919)
    alpha_bar = torch.from_numpy(make_schedule().alpha_bar).float()
    t = torch.randint(1, 1001, (n,), generator=g)
    noise = torch.randn(x0.shape, generator=g)
    with torch.no_grad():
        return float(_dsm_loss(model, x0, ids, t, noise, alpha_bar))


def train_toy_backbone(config: Optional[ToyBackboneConfig] = None, steps: Optional[int] = None, log_every: int = 100):
    """Denoising-score-matching training on synthetic scenes.

    Returns the trained handle; ``handle.loss_curve`` holds ``(step, loss)``
    pairs every ``log_every`` steps. Deterministic for a given seed.
    """
    cfg = config or ToyBackboneConfig()
    steps = cfg.train_steps if steps is None else steps
    model = _build_model(cfg)
    if steps == 0:
        return ToyBackbone(cfg, model, [])

    rng = np.random.default_rng(cfg.seed + 1)
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    schedule = make_schedule()
    alpha_bar = torch.from_numpy(schedule.alpha_bar).float()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=0.0)
    warmup = max(1, steps // 20)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda i: min(1.0, (i + 1) / warmup) * 0.5 * (1 + math.cos(math.pi * min(i, steps) / steps))
    )

    curve = []
    running = 0.0
    model.train()
    for step in range(1, steps + 1):
        x0, ids = _batch(rng, cfg, cfg.batch_size)
        t = torch.randint(1, schedule.train_steps + 1, (cfg.batch_size,), generator=gen)
        noise = torch.randn(x0.shape, generator=gen)
        loss = _dsm_loss(model, x0, ids, t, noise, alpha_bar)
        if not torch.isfinite(loss):
            raise TrainingError(f"training diverged at step {step}", step=step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        running += loss.item()
        if step % log_every == 0 or step == steps:
            n = log_every if step % log_every == 0 else step % log_every
            curve.append((step, running / n))
            log.info("toy training step %d loss %.4f", step, running / n)
            running = 0.0
    model.eval()
    return ToyBackbone(cfg, model, curve)


def state_arrays(backbone: ToyBackbone) -> dict:
    return {name: p.detach().to(torch.float32).numpy() for name, p in backbone.model.state_dict().items()}


def from_state_arrays(config: ToyBackboneConfig, arrays: dict, loss_curve=None) -> ToyBackbone:
    model = _build_model(config)
    state = {k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in arrays.items()}
    model.load_state_dict(state)
    return ToyBackbone(config, model, loss_curve)
