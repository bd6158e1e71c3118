"""Synthetic captioned clips, frame masking and the bag-of-words text embedder."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ValidationError

COLORS = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "cyan": (0.1, 0.85, 0.9),
    "magenta": (0.85, 0.1, 0.8),
    "white": (0.95, 0.95, 0.95),
    "orange": (0.95, 0.55, 0.05),
}
SHAPES = ("square", "circle", "diamond", "bar", "cross", "ring")
MOTIONS = ("static", "left", "right", "up", "down", "diagonal")
_FILLER = (
    "a", "an", "the", "and", "with", "on", "in", "is", "of", "at",
    "moving", "moves", "slides", "drifts", "stays", "object", "shape", "thing",
    "near", "far", "top", "bottom", "center", "corner", "frame", "scene",
    "video", "clip", "appears", "disappears", "jumps", "spins", "bright",
    "dark", "fast", "slow", "one", "two", "three", "small", "large", "tiny", "huge",
)
VOCABULARY: tuple[str, ...] = ("background", *COLORS, *SHAPES, *MOTIONS, *_FILLER)
assert len(VOCABULARY) == 64 and len(set(VOCABULARY)) == 64
WORD_INDEX = {w: i for i, w in enumerate(VOCABULARY)}

BACKGROUND_LEVEL = 0.1
TEXT_DIM = 32


@dataclass
class SceneObject:
    id: int
    shape: str
    color: str
    size: int
    y: float
    x: float
    vy: float = 0.0
    vx: float = 0.0
    t_start: int = 0
    t_end: int | None = None  # inclusive; None = until last frame

    def motion_word(self) -> str:
        if self.vy == 0 and self.vx == 0:
            return "static"
        if self.vy != 0 and self.vx != 0:
            return "diagonal"
        if self.vx != 0:
            return "right" if self.vx > 0 else "left"
        return "down" if self.vy > 0 else "up"

    def visible(self, t: int) -> bool:
        return t >= self.t_start and (self.t_end is None or t <= self.t_end)

    def center(self, t: int) -> tuple[float, float]:
        return self.y + self.vy * t, self.x + self.vx * t

    def half_extent(self) -> tuple[float, float]:
        if self.shape == "bar":
            return self.size / 2, self.size * 1.5
        return float(self.size), float(self.size)


@dataclass
class MaskSpec:
    temporal_ratio: float
    masked_frames: list[int]
    spatial_pattern: np.ndarray  # (len(masked_frames), H, W) bool
    seed: int


@dataclass
class TextEmbedding:
    vector: np.ndarray          # (d,) unit norm
    token_ids: list[int]
    word_vectors: np.ndarray    # (n_words, d), each unit norm


@dataclass
class CaptionedClip:
    video: np.ndarray                 # (3, T, H, W) float32 in [0, 1]
    caption: list[str]
    semantic_units: list[str]
    unit_objects: dict[str, int]      # semantic unit -> object id
    masks: dict[int, np.ndarray]      # object id -> (T, H, W) bool
    scene: list[SceneObject] = field(default_factory=list)
    seed: int = 0

    def sidecar(self) -> dict:
        return {
            "caption": self.caption,
            "semantic_units": self.semantic_units,
            "unit_objects": self.unit_objects,
            "scene": [asdict(o) for o in self.scene],
            "seed": self.seed,
            "dims": list(self.video.shape[1:]),
        }


def _check_dims(dims: tuple[int, int, int], levels: int) -> None:
    t, h, w = dims
    if t < 2:
        raise ValidationError("clips need at least 2 frames")
    step = 2**levels
    if h % step or w % step:
        raise ValidationError(f"H={h}, W={w} not divisible by 2^{levels}")


def rasterize(obj: SceneObject, dims: tuple[int, int, int]) -> np.ndarray:
    """Footprint of one object on its own, (T, H, W) bool."""
    t_n, h, w = dims
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros(dims, dtype=bool)
    s = float(obj.size)
    for t in range(t_n):
        if not obj.visible(t):
            continue
        cy, cx = obj.center(t)
        dy, dx = np.abs(yy - cy), np.abs(xx - cx)
        if obj.shape == "square":
            m = (dy <= s) & (dx <= s)
        elif obj.shape == "circle":
            m = dy**2 + dx**2 <= s**2
        elif obj.shape == "diamond":
            m = dy + dx <= s
        elif obj.shape == "bar":
            m = (dy <= s / 2) & (dx <= 1.5 * s)
        elif obj.shape == "cross":
            m = ((dy <= s / 3) & (dx <= s)) | ((dx <= s / 3) & (dy <= s))
        elif obj.shape == "ring":
            r2 = dy**2 + dx**2
            m = (r2 <= s**2) & (r2 >= (s / 2) ** 2)
        else:
            raise ValidationError(f"unknown shape {obj.shape!r}")
        out[t] = m
    return out


def _validate_scene(scene: list[SceneObject], dims: tuple[int, int, int]) -> None:
    t_n, h, w = dims
    seen = set()
    for obj in scene:
        if obj.id in seen:
            raise ValidationError(f"duplicate object id {obj.id}")
        seen.add(obj.id)
        if obj.color not in COLORS:
            raise ValidationError(f"unknown color {obj.color!r}")
        if obj.shape not in SHAPES:
            raise ValidationError(f"unknown shape {obj.shape!r}")
        ey, ex = obj.half_extent()
        for t in range(t_n):
            if not obj.visible(t):
                continue
            cy, cx = obj.center(t)
            if cy - ey < 0 or cy + ey > h - 1 or cx - ex < 0 or cx + ex > w - 1:
                raise ValidationError(f"object {obj.id} leaves the frame at t={t}")


def caption_for(scene: list[SceneObject]) -> list[str]:
    if not scene:
        return ["background"]
    words: list[str] = []
    for i, obj in enumerate(scene):
        if i:
            words.append("and")
        words += [obj.color, obj.shape, obj.motion_word()]
    return words


def make_clip(scene: list[SceneObject], dims: tuple[int, int, int], seed: int,
              levels: int = 4, noise: float = 0.02) -> CaptionedClip:
    """Render ``scene`` over a flat background. Later objects paint over earlier ones."""
    dims = tuple(int(d) for d in dims)
    _check_dims(dims, levels)
    _validate_scene(scene, dims)
    rng = np.random.default_rng(seed)
    video = np.full((3, *dims), BACKGROUND_LEVEL, dtype=np.float64)
    video += rng.uniform(-noise, noise, size=video.shape)
    masks = {}
    for obj in scene:
        m = rasterize(obj, dims)
        masks[obj.id] = m
        for c, val in enumerate(COLORS[obj.color]):
            video[c][m] = val
    units, unit_objects = [], {}
    for obj in scene:
        if obj.color not in unit_objects:
            units.append(obj.color)
            unit_objects[obj.color] = obj.id
    return CaptionedClip(
        video=np.clip(video, 0.0, 1.0).astype(np.float32),
        caption=caption_for(scene),
        semantic_units=units,
        unit_objects=unit_objects,
        masks=masks,
        scene=list(scene),
        seed=seed,
    )


def random_scene(rng: np.random.Generator, dims: tuple[int, int, int],
                 max_objects: int = 2, min_size: int = 3, max_size: int | None = None) -> list[SceneObject]:
    t_n, h, w = dims
    max_size = max_size or max(min_size, min(h, w) // 5)
    n = int(rng.integers(1, max_objects + 1))
    colors = rng.permutation(list(COLORS))[:n]
    scene = []
    for i in range(n):
        for _ in range(100):
            shape = str(rng.choice(SHAPES))
            size = int(rng.integers(min_size, max_size + 1))
            obj = SceneObject(id=i + 1, shape=shape, color=str(colors[i]), size=size, y=0.0, x=0.0)
            ey, ex = obj.half_extent()
            v = rng.choice([-1.0, 0.0, 1.0], size=2)
            if rng.random() < 0.5:
                v[int(rng.integers(0, 2))] = 0.0
            obj.vy, obj.vx = float(v[0]), float(v[1])
            span_y = abs(obj.vy) * (t_n - 1)
            span_x = abs(obj.vx) * (t_n - 1)
            lo_y, hi_y = ey + (span_y if obj.vy < 0 else 0), h - 1 - ey - (span_y if obj.vy > 0 else 0)
            lo_x, hi_x = ex + (span_x if obj.vx < 0 else 0), w - 1 - ex - (span_x if obj.vx > 0 else 0)
            if lo_y <= hi_y and lo_x <= hi_x:
                obj.y = float(np.round(rng.uniform(lo_y, hi_y)))
                obj.x = float(np.round(rng.uniform(lo_x, hi_x)))
                scene.append(obj)
                break
    return scene


def make_corpus(n_clips: int, dims: tuple[int, int, int], seed: int, levels: int = 4,
                max_objects: int = 2) -> list[CaptionedClip]:
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n_clips):
        scene = random_scene(rng, dims, max_objects=max_objects)
        clips.append(make_clip(scene, dims, seed=seed * 100_003 + i, levels=levels))
    return clips


def cosine_mask_probability(h: int, w: int, budget: float = 0.5) -> np.ndarray:
    """Per-pixel masking probability: raised cosine of the distance to the frame
    centre, rescaled so the expected masked fraction equals ``budget``."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    r /= r.max() if r.max() > 0 else 1.0
    base = 0.5 * (1 + np.cos(np.pi * r))
    # Scale then clip; iterate so clipping does not eat into the budget.
    scale = budget / base.mean()
    for _ in range(50):
        p = np.clip(base * scale, 0.0, 1.0)
        if abs(p.mean() - budget) < 1e-9:
            break
        scale *= budget / p.mean()
    return p


def mask_video(video: np.ndarray, temporal_ratio: float, seed: int,
               spatial_budget: float = 0.5) -> tuple[np.ndarray, MaskSpec]:
    """Zero a cosine-ramp spatial pattern on ``floor(ratio * T)`` random frames."""
    if not 0.0 <= temporal_ratio <= 1.0:
        raise ValidationError("temporal_ratio must lie in [0, 1]")
    _, t_n, h, w = video.shape
    rng = np.random.default_rng(seed)
    k = int(math.floor(temporal_ratio * t_n + 1e-9))
    frames = sorted(int(f) for f in rng.choice(t_n, size=k, replace=False)) if k else []
    prob = cosine_mask_probability(h, w, spatial_budget)
    pattern = rng.random((k, h, w)) < prob
    out = video.copy()
    for j, f in enumerate(frames):
        out[:, f][:, pattern[j]] = 0.0
    return out, MaskSpec(temporal_ratio, frames, pattern, seed)


def word_base_vector(word: str, dim: int = TEXT_DIM) -> np.ndarray:
    digest = hashlib.sha256(f"videotok-word:{word}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.standard_normal(dim)


def embed_text(caption: list[str], dim: int = TEXT_DIM) -> TextEmbedding:
    unknown = [w for w in caption if w not in WORD_INDEX]
    if unknown:
        raise ValidationError(f"unknown words: {unknown}")
    if not caption:
        raise ValidationError("empty caption")
    base = np.stack([word_base_vector(w, dim) for w in caption])
    total = base.sum(axis=0)
    norm = np.linalg.norm(total)
    vec = total / norm if norm > 0 else total
    words = base / np.linalg.norm(base, axis=1, keepdims=True)
    return TextEmbedding(vec.astype(np.float32), [WORD_INDEX[w] for w in caption], words.astype(np.float32))
