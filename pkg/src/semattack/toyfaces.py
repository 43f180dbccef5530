"""Procedural 32x32 toy faces with eleven controllable attributes.

Each attribute drives exactly one drawing element, so the set of pixels an
attribute can change is known. Those supports are the region masks used for
channel discovery.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from functools import lru_cache

import numpy as np

IMAGE_SIZE = 32

ATTRIBUTES = (
    "pale_skin",
    "hair_color",
    "hairstyle",
    "mouth_open",
    "wearing_lipstick",
    "bushy_eyebrow",
    "eyebrow_shape",
    "earring",
    "eyeball_position",
    "eye_close",
    "eyeglasses",
)

IDENTITY_PARAMS = ("face_width", "eye_spacing")

_Y, _X = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64) + 0.5


@dataclass(frozen=True)
class ToyFaceSpec:
    face_width: float = 0.5
    eye_spacing: float = 0.5
    pale_skin: float = 0.5
    hair_color: float = 0.5
    hairstyle: float = 0.5
    mouth_open: float = 0.0
    wearing_lipstick: float = 0.0
    bushy_eyebrow: float = 0.5
    eyebrow_shape: float = 0.5
    earring: float = 0.0
    eyeball_position: float = 0.5
    eye_close: float = 0.0
    eyeglasses: float = 0.0
    background: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{f.name}={v} outside [0, 1]")

    def replace(self, **changes) -> "ToyFaceSpec":
        return ToyFaceSpec(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)


def _lerp(a, b, t):
    return tuple(x + (y - x) * t for x, y in zip(a, b))


def _ellipse_distance(cx, cy, rx, ry):
    # first-order signed distance (r - 1) / |grad r|; stays sane for flat ellipses
    u, v = (_X - cx) / rx, (_Y - cy) / ry
    r = np.sqrt(u * u + v * v)
    grad = np.sqrt((u / rx) ** 2 + (v / ry) ** 2) / np.maximum(r, 1e-9)
    return (r - 1.0) / np.maximum(grad, 1e-9)


def _ellipse(cx, cy, rx, ry):
    return np.clip(0.5 - _ellipse_distance(cx, cy, rx, ry), 0.0, 1.0)


def _ring(cx, cy, rx, ry, half_width):
    return np.clip(0.5 - (np.abs(_ellipse_distance(cx, cy, rx, ry)) - half_width), 0.0, 1.0)


def _capsule(x0, y0, x1, y1, radius):
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((_X - x0) * dx + (_Y - y0) * dy) / max(dx * dx + dy * dy, 1e-12), 0.0, 1.0)
    d = np.hypot(_X - (x0 + t * dx), _Y - (y0 + t * dy))
    return np.clip(0.5 - (d - radius), 0.0, 1.0)


def _paint(img, alpha, color):
    a = alpha[..., None]
    img *= 1.0 - a
    img += a * np.asarray(color)


def render_face(spec: ToyFaceSpec) -> np.ndarray:
    """Render one face as a float32 ``(32, 32, 3)`` array in [0, 1]."""
    s = spec
    cx, cy = 16.0, 18.0
    rx, ry = 8.0 + 1.5 * s.face_width, 10.5
    eye_dx = 4.0 + 1.0 * s.eye_spacing
    eyes = (cx - eye_dx, cx + eye_dx)
    skin = _lerp((0.78, 0.55, 0.40), (0.98, 0.90, 0.86), s.pale_skin)
    hair = _lerp((0.15, 0.10, 0.07), (0.90, 0.75, 0.40), s.hair_color)

    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3))
    img[:] = _lerp((0.35, 0.45, 0.60), (0.75, 0.72, 0.65), s.background)

    side_bottom = 12.0 + 13.0 * s.hairstyle
    for sx in (cx - rx - 0.3, cx + rx + 0.3):
        _paint(img, _capsule(sx, 9.0, sx, side_bottom, 1.6), hair)
    for ex in (cx - rx - 0.2, cx + rx + 0.2):
        _paint(img, _ellipse(ex, 18.0, 1.3, 2.0), skin)
        _paint(img, _ellipse(ex, 20.6, 0.9, 0.9) * s.earring, (0.95, 0.80, 0.20))

    _paint(img, _ellipse(cx, cy, rx, ry), skin)
    _paint(img, _ellipse(cx, 6.5, rx + 1.2, 2.8 + 1.6 * s.hairstyle), hair)
    _paint(img, _capsule(cx, 17.5, cx, 20.0, 0.5), tuple(0.85 * c for c in skin))

    tilt = 0.8 * (s.eyebrow_shape - 0.5)
    brow_r = 0.45 + 0.6 * s.bushy_eyebrow
    for side, ex in zip((-1.0, 1.0), eyes):
        outer, inner = ex + side * 2.2, ex - side * 2.0
        _paint(img, _capsule(outer, 11.6 - tilt, inner, 11.6 + tilt, brow_r), (0.20, 0.13, 0.10))

    eye_ry = 1.25 * (1.0 - 0.8 * s.eye_close) + 0.05
    for ex in eyes:
        white = _ellipse(ex, 15.0, 1.8, eye_ry)
        _paint(img, white, (0.97, 0.97, 0.97))
        iris_x = ex + 1.0 * (2.0 * s.eyeball_position - 1.0)
        _paint(img, _ellipse(iris_x, 15.0, 0.85, 0.85) * white, (0.10, 0.15, 0.30))

    if s.eyeglasses > 0:
        frame = np.maximum(_ring(eyes[0], 15.0, 2.9, 2.1, 0.35), _ring(eyes[1], 15.0, 2.9, 2.1, 0.35))
        frame = np.maximum(frame, _capsule(eyes[0] + 2.9, 14.6, eyes[1] - 2.9, 14.6, 0.35))
        _paint(img, frame * s.eyeglasses, (0.10, 0.10, 0.10))

    lips = _lerp((0.72, 0.42, 0.40), (0.85, 0.08, 0.15), s.wearing_lipstick)
    _paint(img, _ellipse(cx, 23.6, 3.0, 1.4), lips)
    _paint(img, _ellipse(cx, 23.6, 2.0, 0.2 + 0.95 * s.mouth_open), (0.20, 0.03, 0.05))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def sample_spec(rng: np.random.Generator) -> ToyFaceSpec:
    u = rng.random(16)
    return ToyFaceSpec(
        face_width=u[0],
        eye_spacing=u[1],
        pale_skin=u[2],
        hair_color=u[3],
        hairstyle=u[4],
        mouth_open=u[5],
        wearing_lipstick=u[6],
        bushy_eyebrow=u[7],
        eyebrow_shape=u[8],
        earring=0.0 if u[9] < 0.5 else 0.5 + 0.5 * u[14],
        eyeball_position=u[10],
        eye_close=u[11] ** 2,
        eyeglasses=0.0 if u[12] < 0.6 else 0.6 + 0.4 * u[15],
        background=u[13],
    )


def generate_toy_dataset(n_images: int, seed: int):
    """Deterministic batch of renders: ``(images (n, 32, 32, 3), specs)``."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    rng = np.random.default_rng(seed)
    specs = [sample_spec(rng) for _ in range(n_images)]
    images = np.stack([render_face(s) for s in specs])
    return images, specs


def image_digest(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image, dtype=np.float32).tobytes()).hexdigest()


@lru_cache(maxsize=None)
def _region_masks_cached(grid: int, contexts: int, seed: int):
    rng = np.random.default_rng(seed)
    levels = np.linspace(0.0, 1.0, 5)
    idents = np.linspace(0.0, 1.0, grid)
    masks = {a: np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool) for a in ATTRIBUTES}
    bases = [sample_spec(rng) for _ in range(contexts)]
    for base in bases:
        for fw in idents:
            for es in idents:
                ctx = base.replace(face_width=fw, eye_spacing=es)
                for attr in ATTRIBUTES:
                    renders = np.stack([render_face(ctx.replace(**{attr: v})) for v in levels])
                    spread = renders.max(axis=0) - renders.min(axis=0)
                    masks[attr] |= spread.max(axis=-1) > 1e-6
    return {a: m.copy() for a, m in masks.items()}


def region_masks(grid: int = 5, contexts: int = 6, seed: int = 0) -> dict[str, np.ndarray]:
    """Binary ``(32, 32)`` mask per attribute: every pixel the attribute can change.

    Built as the union, over a grid of identities and a few random contexts, of
    the pixels that change while sweeping the attribute through its range.
    """
    return {a: m.copy() for a, m in _region_masks_cached(grid, contexts, seed).items()}
