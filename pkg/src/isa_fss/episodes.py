"""Few-shot episodes and hierarchical training-pair construction.

Each support takes a turn as pseudo-query; the remaining supports form its
pool, and for a shot count ``n`` every ``n``-subset of the pool (lexicographic
order, optionally a seeded sample of them) pairs with that pseudo-query.

Episodes are stored on disk as a directory of binary PGM files (``P5``,
maxval 255; one file per image channel, one per mask with values 0/255) and a
``manifest.json``. ``P2`` files are accepted on read.
"""

from __future__ import annotations

import json
import math
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .model import ImageSample

EPISODE_FORMAT = "isa-fss-episode"
DEFAULT_COMBINATION_CAP = 20


@dataclass
class Episode:
    supports: list[ImageSample]
    queries: list[ImageSample] = field(default_factory=list)
    class_id: int = 0
    domain_id: str = ""
    episode_id: str = ""

    def __post_init__(self):
        if not self.supports:
            raise ContractError("an episode needs at least one support")
        size = self.supports[0].image.shape
        for s in self.supports + self.queries:
            if s.image.shape != size:
                raise DimensionError(f"sample shape {s.image.shape} differs from {size}")

    @property
    def k(self) -> int:
        return len(self.supports)


@dataclass
class TrainingPair:
    supports: list[ImageSample]
    query: ImageSample
    query_index: int
    combination_index: int
    support_indices: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.supports)


def _check_pool_size(k: int) -> None:
    if k < 2:
        raise ContractError(f"need K >= 2 supports to form pseudo-query pairs, got {k}; augment first")


def cyclic_pairs(supports: Sequence[ImageSample]) -> list[tuple[list[ImageSample], ImageSample]]:
    """``(supports without i, support i)`` for each i, in support order."""
    _check_pool_size(len(supports))
    return [
        ([s for j, s in enumerate(supports) if j != i], q) for i, q in enumerate(supports)
    ]


def _unrank_combination(rank: int, m: int, n: int) -> tuple[int, ...]:
    # lexicographic unranking of n-subsets of range(m)
    out = []
    start = 0
    for slot in range(n):
        remaining = n - slot
        for v in range(start, m):
            cnt = math.comb(m - v - 1, remaining - 1)
            if rank < cnt:
                out.append(v)
                start = v + 1
                break
            rank -= cnt
    return tuple(out)


def combination_indices(m: int, n: int, cap: int | None = None, seed: int = 0) -> list[tuple[int, ...]]:
    """Index subsets of ``range(m)``: all of them, or a seeded sorted sample of ``cap``."""
    if not 1 <= n <= m:
        raise ContractError(f"need 1 <= n <= m, got n={n}, m={m}")
    total = math.comb(m, n)
    if cap is None or total <= cap:
        ranks = range(total)
    else:
        if cap < 1:
            raise ContractError(f"combination cap must be >= 1, got {cap}")
        ranks = sorted(random.Random(seed).sample(range(total), cap))
    return [_unrank_combination(r, m, n) for r in ranks]


def enumerate_combinations(pool: Sequence, n: int, cap: int | None = None, seed: int = 0) -> list[list]:
    if n > len(pool):
        raise ContractError(f"cannot choose n={n} from a pool of {len(pool)}")
    return [[pool[i] for i in idx] for idx in combination_indices(len(pool), n, cap, seed)]


def _query_seed(seed: int, query_index: int) -> int:
    return seed * 1_000_003 + query_index


def hierarchical_pairs(
    supports: Sequence[ImageSample], n: int, cap: int | None = None, seed: int = 0
) -> list[TrainingPair]:
    """All n-shot training pairs: for each pseudo-query, (capped) n-subsets of its pool."""
    k = len(supports)
    _check_pool_size(k)
    if not 1 <= n <= k - 1:
        raise ContractError(f"shot count n={n} outside [1, K-1] for K={k}")
    pairs = []
    for i in range(k):
        pool = [j for j in range(k) if j != i]
        for ci, local in enumerate(combination_indices(k - 1, n, cap, _query_seed(seed, i))):
            idx = tuple(pool[t] for t in local)
            pairs.append(TrainingPair([supports[j] for j in idx], supports[i], i, ci, idx))
    return pairs


def augment_one_shot(support: ImageSample, seed: int = 0) -> list[ImageSample]:
    """Original, horizontal flip and 90-degree rotation of a single support.

    ``seed`` is accepted for interface symmetry; the transforms are fixed.
    Non-square samples get a vertical flip instead of the rotation.
    """
    del seed
    img, mask = support.image, support.mask
    flipped = ImageSample(img[:, :, ::-1].copy(), mask[:, ::-1].copy())
    if img.shape[1] == img.shape[2]:
        third = ImageSample(np.rot90(img, 1, axes=(1, 2)).copy(), np.rot90(mask, 1).copy())
    else:
        warnings.warn("non-square support: using vertical flip instead of rotation", stacklevel=2)
        third = ImageSample(img[:, ::-1, :].copy(), mask[::-1, :].copy())
    return [support, flipped, third]


def effective_supports(supports: Sequence[ImageSample], seed: int = 0) -> list[ImageSample]:
    """Supports used for adaptation: a lone support is augmented to three."""
    if len(supports) == 1:
        return augment_one_shot(supports[0], seed)
    return list(supports)


# ----------------------------------------------------------------------- PGM


def write_pgm(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise DimensionError(f"PGM needs a 2-D uint8 array, got {arr.shape} {arr.dtype}")
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def _pgm_tokens(buf: bytes, count: int, pos: int):
    tokens = []
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos


def read_pgm(path) -> np.ndarray:
    """Read a P5 or P2 PGM into a uint8/uint16 array."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(buf, 4, 0)
    w, h, maxval = int(w), int(h), int(maxval)
    if magic == b"P5":
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        data = np.frombuffer(buf[pos + 1 :], dtype=dtype, count=w * h)
        return data.reshape(h, w).astype(np.uint8 if maxval < 256 else np.uint16)
    if magic == b"P2":
        values = [int(t) for t in buf[pos:].split()[: w * h]]
        return np.array(values, dtype=np.uint8 if maxval < 256 else np.uint16).reshape(h, w)
    raise ValueError(f"{path}: unsupported PGM magic {magic!r}")


def _to_u8(channel: np.ndarray) -> np.ndarray:
    return np.clip(np.round(channel * 255.0), 0, 255).astype(np.uint8)


def save_episode(episode: Episode, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    c, h, w = episode.supports[0].image.shape
    entries = []
    for role, samples in (("support", episode.supports), ("query", episode.queries)):
        for i, s in enumerate(samples):
            stem = f"{role}_{i:02d}"
            channels = []
            for ch in range(c):
                fname = f"{stem}_c{ch}.pgm"
                write_pgm(directory / fname, _to_u8(s.image[ch]))
                channels.append(fname)
            mname = f"{stem}_mask.pgm"
            write_pgm(directory / mname, (s.mask * 255).astype(np.uint8))
            entries.append({"role": role, "index": i, "image": channels, "mask": mname})
    manifest = {
        "format": EPISODE_FORMAT,
        "version": 1,
        "episode_id": episode.episode_id,
        "class_id": episode.class_id,
        "domain_id": episode.domain_id,
        "channels": c,
        "height": h,
        "width": w,
        "samples": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_episode(directory) -> Episode:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != EPISODE_FORMAT:
        raise ValueError(f"{directory} is not an episode directory")
    supports, queries = [], []
    for e in manifest["samples"]:
        image = np.stack([read_pgm(directory / f).astype(np.float64) / 255.0 for f in e["image"]])
        mask = (read_pgm(directory / e["mask"]) > 0).astype(np.float64)
        (supports if e["role"] == "support" else queries).append(ImageSample(image, mask))
    return Episode(
        supports,
        queries,
        class_id=manifest["class_id"],
        domain_id=manifest["domain_id"],
        episode_id=manifest["episode_id"],
    )
