"""Synthetic scenes for the toy backbone: one colored shape on a colored
background, described by a short token prompt such as
``red circle standing on blue``.

``standing``/``lying`` swap the shape's aspect (tall vs. wide), which gives
the toy world a structural, non-rigid edit alongside color and shape swaps.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import VocabularyError

COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.25),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.90, 0.15),
    "white": (0.95, 0.95, 0.95),
    "purple": (0.60, 0.20, 0.80),
}
SHAPES = ("square", "circle", "triangle")
POSES = ("standing", "lying")
PAD = "<pad>"
VOCAB = (PAD, *COLORS, *SHAPES, *POSES, "on")


@dataclass(frozen=True)
class Scene:
    color: str
    shape: str
    pose: str
    background: str
    dx: float = 0.0
    dy: float = 0.0
    scale: float = 1.0

    def prompt(self, pose=True, background=True) -> list:
        tokens = [self.color, self.shape]
        if pose:
            tokens.append(self.pose)
        if background:
            tokens += ["on", self.background]
        return tokens


def tokenize(prompt) -> list:
    """Split a prompt string (or pass through a token list) and validate it."""
    tokens = prompt.split() if isinstance(prompt, str) else list(prompt)
    for tok in tokens:
        if tok not in VOCAB or tok == PAD:
            raise VocabularyError(f"unknown token {tok!r}; vocabulary: {' '.join(VOCAB[1:])}")
    return tokens


def parse_scene(prompt, dx=0.0, dy=0.0, scale=1.0) -> Scene:
    """Build a scene from a full prompt ``<color> <shape> [<pose>] [on <color>]``."""
    tokens = tokenize(prompt)
    colors = [t for t in tokens if t in COLORS]
    shapes = [t for t in tokens if t in SHAPES]
    poses = [t for t in tokens if t in POSES]
    if not colors or len(shapes) != 1:
        raise VocabularyError(f"prompt {prompt!r} needs a color and exactly one shape")
    fg = colors[0]
    bg = colors[1] if len(colors) > 1 else ("white" if fg != "white" else "blue")
    return Scene(fg, shapes[0], poses[0] if poses else "standing", bg, dx, dy, scale)


def random_scene(rng: np.random.Generator) -> Scene:
    names = list(COLORS)
    fg = names[rng.integers(len(names))]
    bg = [c for c in names if c != fg][rng.integers(len(names) - 1)]
    return Scene(
        color=fg,
        shape=SHAPES[rng.integers(len(SHAPES))],
        pose=POSES[rng.integers(len(POSES))],
        background=bg,
        dx=float(rng.uniform(-1.5, 1.5)),
        dy=float(rng.uniform(-1.5, 1.5)),
        scale=float(rng.uniform(0.85, 1.15)),
    )


def _mask(scene: Scene, size: int, supersample: int) -> np.ndarray:
    n = size * supersample
    coords = (np.arange(n) + 0.5) / supersample
    y, x = np.meshgrid(coords, coords, indexing="ij")
    cx = size / 2 + scene.dx
    cy = size / 2 + scene.dy
    long_, short = 5.5 * scene.scale * size / 16, 3.0 * scene.scale * size / 16
    hw, hh = (short, long_) if scene.pose == "standing" else (long_, short)
    u, v = x - cx, y - cy
    if scene.shape == "square":
        inside = (np.abs(u) <= hw) & (np.abs(v) <= hh)
    elif scene.shape == "circle":
        inside = (u / hw) ** 2 + (v / hh) ** 2 <= 1.0
    elif scene.pose == "standing":
        # apex up
        frac = (v + hh) / (2 * hh)
        inside = (frac >= 0) & (frac <= 1) & (np.abs(u) <= hw * frac)
    else:
        # apex left
        frac = (u + hw) / (2 * hw)
        inside = (frac >= 0) & (frac <= 1) & (np.abs(v) <= hh * frac)
    m = inside.astype(np.float64).reshape(size, supersample, size, supersample)
    return m.mean(axis=(1, 3))


def render(scene: Scene, size: int = 16, supersample: int = 4) -> np.ndarray:
    """Anti-aliased float image ``(size, size, 3)`` with values in [0, 1]."""
    m = _mask(scene, size, supersample)[..., None]
    fg = np.asarray(COLORS[scene.color])
    bg = np.asarray(COLORS[scene.background])
    return (m * fg + (1 - m) * bg).astype(np.float32)


def render_uint8(scene: Scene, size: int = 16) -> np.ndarray:
    return np.round(render(scene, size) * 255).astype(np.uint8)


def training_prompt(scene: Scene, rng: np.random.Generator, cond_drop: float) -> list:
    r = rng.random()
    if r < cond_drop:
        return []
    return scene.prompt(pose=rng.random() > 0.15, background=rng.random() > 0.15)


_EDITS = ("shape", "pose", "color", "background")


def mismatch_case(index: int, seed: int = 1234):
    """Deterministic editing case: a source scene plus a target scene that
    differs in exactly one attribute (cycled over shape, pose, color and
    background)."""
    rng = np.random.default_rng(seed + index)
    src = random_scene(rng)
    attr = _EDITS[index % len(_EDITS)]
    if attr == "shape":
        options = [s for s in SHAPES if s != src.shape]
        tgt = replace(src, shape=options[rng.integers(len(options))])
    elif attr == "pose":
        tgt = replace(src, pose="lying" if src.pose == "standing" else "standing")
    elif attr == "color":
        options = [c for c in COLORS if c not in (src.color, src.background)]
        tgt = replace(src, color=options[rng.integers(len(options))])
    else:
        options = [c for c in COLORS if c not in (src.color, src.background)]
        tgt = replace(src, background=options[rng.integers(len(options))])
    return src, tgt
