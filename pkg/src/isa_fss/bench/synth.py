"""Seeded synthetic few-shot segmentation domains.

Rendering is integer arithmetic on 0..255 levels (masks from integer
geometry, stripes and glyph tilings from modular arithmetic, integer noise)
and only the final division by 255 touches floats, so pixel data is identical
on every platform for a given seed.

Domain families:

``source``
    foreground and background differ in colour; weak random stripes on both.
``texture``
    one shared base colour; the class is a pair of fine stripe patterns
    (period 2-4 px, different orientations) for foreground and background.
``shape``
    one shared base colour; objects are plain regions bounded by a thin
    outline, lying on a background cluttered with a tiled 6x6 glyph, so the
    object is defined by its contour and composition rather than by a
    local colour or stripe cue.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass

import numpy as np

from ..episodes import Episode
from ..model import ImageSample

SHIFTS = ("source", "texture", "shape")

# 6x6 glyphs, 12 inked cells each
_GLYPHS = [
    ["......", ".####.", ".#..#.", ".#..#.", ".####.", "......"],  # ring
    ["......", "..##..", ".####.", ".####.", "..##..", "......"],  # blob
    ["##....", ".##...", "..##..", "...##.", "....##", "#....#"],  # diagonal
    ["......", "......", "######", "######", "......", "......"],  # bar
    [".#.#.#", "#.#.#.", ".#.#.#", "#.#.#.", "......", "......"],  # dots
    ["##....", "##....", "##....", "##....", "####..", "......"],  # ell
]


def _glyph_array(rows) -> np.ndarray:
    return np.array([[c == "#" for c in r] for r in rows], dtype=np.int64)


GLYPHS = [_glyph_array(g) for g in _GLYPHS]


@dataclass(frozen=True)
class DomainSpec:
    name: str
    shift: str
    image_size: int = 32
    object_count: tuple[int, int] = (1, 2)
    noise: int = 10
    class_count: int = 12

    def __post_init__(self):
        if self.shift not in SHIFTS:
            raise ValueError(f"shift must be one of {SHIFTS}, got {self.shift!r}")
        if self.image_size % 4:
            raise ValueError(f"image_size must be divisible by 4, got {self.image_size}")
        lo, hi = self.object_count
        if not 1 <= lo <= hi:
            raise ValueError(f"bad object_count range {self.object_count}")
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["object_count"] = list(self.object_count)
        return d


SOURCE = DomainSpec("source", "source", class_count=64)
TEXTURE = DomainSpec("texture", "texture")
SHAPE = DomainSpec("shape", "shape")
DEFAULT_TARGETS = (TEXTURE, SHAPE)


def _stable_seed(*parts) -> int:
    return zlib.crc32("/".join(str(p) for p in parts).encode())


def _rng(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(_stable_seed(*parts)))


# ------------------------------------------------------------------ geometry


def _shape_mask(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    kind = int(rng.integers(0, 3))
    cy, cx = (int(v) for v in rng.integers(size // 5, size - size // 5, 2))
    if kind == 0:  # ellipse
        ry, rx = (int(v) for v in rng.integers(size // 8, size // 3, 2))
        return (ry * ry * (xx - cx) ** 2 + rx * rx * (yy - cy) ** 2) <= (rx * ry) ** 2
    if kind == 1:  # rectangle
        hy, hx = (int(v) for v in rng.integers(size // 8, size // 3, 2))
        return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    r = int(rng.integers(size // 6, size // 3))  # diamond
    return (np.abs(yy - cy) + np.abs(xx - cx)) <= r


def render_mask(rng, spec: DomainSpec) -> np.ndarray:
    size = spec.image_size
    lo, hi = spec.object_count
    while True:
        count = int(rng.integers(lo, hi + 1))
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(count):
            mask |= _shape_mask(rng, size)
        fg = int(mask.sum())
        # keep fg fraction in [0.05, 0.6] and both classes visible at /4 resolution
        if 5 * size * size <= 100 * fg <= 60 * size * size:
            small = mask[2::4, 2::4]
            if small.any() and not small.all():
                return mask.astype(np.int64)


# --------------------------------------------------------------- appearance


def _stripes(size: int, period: int, orient: int, phase: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    coord = (yy, xx, yy + xx, yy - xx + 4 * size)[orient]
    return ((((coord + phase) % period) * 2) < period).astype(np.int64)


def _outline(mask: np.ndarray, width: int) -> np.ndarray:
    """Pixels of ``mask`` within ``width`` 4-neighbour steps of its border."""
    inner = mask.astype(bool)
    for _ in range(width):
        e = inner.copy()
        e[1:] &= inner[:-1]
        e[:-1] &= inner[1:]
        e[:, 1:] &= inner[:, :-1]
        e[:, :-1] &= inner[:, 1:]
        inner = e
    return (mask.astype(bool) & ~inner).astype(np.int64)


def _tile(glyph: np.ndarray, size: int, oy: int, ox: int) -> np.ndarray:
    gh, gw = glyph.shape
    reps = (size // gh + 2, size // gw + 2)
    big = np.tile(glyph, reps)
    return big[oy : oy + size, ox : ox + size]


def class_appearance(spec: DomainSpec, class_id: int) -> dict:
    """Fixed per-class parameters, derived only from (domain name, class id)."""
    rng = _rng("class", spec.name, spec.shift, class_id)
    if spec.shift == "source":
        while True:
            fg = rng.integers(20, 236, 3)
            bg = rng.integers(20, 236, 3)
            if int(np.abs(fg - bg).sum()) >= 150:
                return {"fg": fg.tolist(), "bg": bg.tolist()}
    if spec.shift == "texture":
        while True:
            fg_period, bg_period = (int(v) for v in rng.choice([2, 3, 4], 2))
            fg_orient, bg_orient = (int(v) for v in rng.choice(4, 2, replace=False))
            # period-2 diagonal and anti-diagonal stripes are the same checkerboard
            if not (fg_period == bg_period == 2 and {fg_orient, bg_orient} == {2, 3}):
                break
        return {"fg_period": fg_period, "fg_orient": fg_orient,
                "bg_period": bg_period, "bg_orient": bg_orient}
    return {"bg_glyph": int(rng.integers(0, len(GLYPHS))), "outline": int(rng.integers(1, 3))}


def render_sample(spec: DomainSpec, class_id: int, rng) -> ImageSample:
    size = spec.image_size
    app = class_appearance(spec, class_id)
    mask = render_mask(rng, spec)
    if spec.shift == "source":
        jitter = rng.integers(-15, 16, 3)
        fg = np.array(app["fg"]) + jitter
        bg = np.array(app["bg"]) + jitter
        img = np.where(mask[None] == 1, fg[:, None, None], bg[:, None, None])
        nuis = _stripes(size, int(rng.integers(2, 5)), int(rng.integers(0, 4)), int(rng.integers(0, 8)))
        img = img + (nuis * int(rng.integers(0, 30)))[None]
    else:
        base = rng.integers(40, 120, 3)
        amp = int(rng.integers(70, 110))
        if spec.shift == "texture":
            fgp = _stripes(size, app["fg_period"], app["fg_orient"], int(rng.integers(0, 8)))
            bgp = _stripes(size, app["bg_period"], app["bg_orient"], int(rng.integers(0, 8)))
            pattern = np.where(mask == 1, fgp, bgp)
        else:
            clutter = _tile(GLYPHS[app["bg_glyph"]], size, int(rng.integers(0, 6)), int(rng.integers(0, 6)))
            pattern = np.where(mask == 1, _outline(mask, app["outline"]), clutter)
        img = base[:, None, None] + (pattern * amp)[None]
    if spec.noise:
        img = img + rng.integers(-spec.noise, spec.noise + 1, img.shape)
    img = np.clip(img, 0, 255)
    return ImageSample(img.astype(np.float64) / 255.0, mask.astype(np.float64))


def generate_episode(
    domain: DomainSpec, k: int, n_queries: int, seed: int, class_id: int | None = None
) -> Episode:
    """K supports and ``n_queries`` queries of one class, deterministic per (domain, seed)."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    rng = _rng("episode", domain.name, domain.shift, domain.image_size, seed)
    if class_id is None:
        class_id = int(rng.integers(0, domain.class_count))
    samples = [render_sample(domain, class_id, rng) for _ in range(k + n_queries)]
    return Episode(
        samples[:k],
        samples[k:],
        class_id=class_id,
        domain_id=domain.name,
        episode_id=f"{domain.name}-{seed:05d}",
    )
