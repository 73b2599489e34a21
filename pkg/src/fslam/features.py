"""Keypoints, descriptors, scale pyramid, baseline extractor and matching.

Two descriptor variants exist: ``binary`` (bit vectors packed LSB-first into
bytes, Hamming metric) and ``real`` (float32 vectors, Euclidean metric,
L2-normalized on ingestion).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import (
    ConfigTooDeep,
    MalformedRecord,
    MissingFrame,
    MixedDescriptorLength,
    VariantMismatch,
)
from .io_utils import atomic_write_bytes

BINARY = "binary"
REAL = "real"

# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class PyramidConfig:
    scale_factor: float = 2.0
    n_levels: int = 3

    def __post_init__(self):
        if not self.scale_factor > 1:
            raise ValueError("scale_factor must be > 1")
        if int(self.n_levels) != self.n_levels or self.n_levels < 1:
            raise ValueError("n_levels must be an integer >= 1")

    def scales(self) -> np.ndarray:
        return self.scale_factor ** np.arange(self.n_levels)


@dataclass(frozen=True)
class MatchThresholds:
    """Distance gates in the metric units of the descriptor variant."""

    th_low: float
    th_high: float
    ratio: float = 0.9

    def __post_init__(self):
        if not (0 < self.th_low <= self.th_high):
            raise ValueError("need 0 < th_low <= th_high")
        if not (0 < self.ratio <= 1):
            raise ValueError("ratio must lie in (0, 1]")

    @classmethod
    def binary_default(cls, ratio: float = 0.9) -> "MatchThresholds":
        return cls(50.0, 100.0, ratio)

    @classmethod
    def from_dimensionless(cls, th_low: float, th_high: float, multiplier: float = 0.1,
                           ratio: float = 0.9) -> "MatchThresholds":
        """Scale unitless thresholds (e.g. TH_LOW=1, TH_HIGH=2) to L2 distances."""
        return cls(th_low * multiplier, th_high * multiplier, ratio)

    def gate(self, mode: str) -> float:
        if mode == "strict":
            return self.th_low
        if mode == "relaxed":
            return self.th_high
        raise ValueError(f"unknown match mode {mode!r}")


# Dimensionless threshold pairs used for the learned descriptors.
EUROC_THRESHOLDS = (1.0, 2.0)
KITTI_THRESHOLDS = (2.0, 3.0)


# ----------------------------------------------------------------------------
# keypoints and descriptors
# ----------------------------------------------------------------------------


class Keypoint(NamedTuple):
    x: float
    y: float
    octave: int
    scale: float
    orientation: float
    response: float


@dataclass
class Keypoints:
    """Column store of keypoints; coordinates are in level-0 pixels."""

    xy: np.ndarray
    octave: np.ndarray
    scale: np.ndarray
    orientation: np.ndarray
    response: np.ndarray

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        n = len(self.xy)
        self.octave = np.asarray(self.octave, dtype=np.int64).reshape(n)
        self.scale = np.asarray(self.scale, dtype=float).reshape(n)
        self.orientation = np.asarray(self.orientation, dtype=float).reshape(n)
        self.response = np.asarray(self.response, dtype=float).reshape(n)

    @classmethod
    def empty(cls) -> "Keypoints":
        return cls(np.zeros((0, 2)), [], [], [], [])

    @classmethod
    def from_xy(cls, xy, octave=None, scale_factor: float = 2.0) -> "Keypoints":
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        n = len(xy)
        octave = np.zeros(n, dtype=np.int64) if octave is None else np.asarray(octave)
        return cls(xy, octave, scale_factor ** octave, np.zeros(n), np.ones(n))

    def __len__(self):
        return len(self.xy)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return Keypoint(float(self.xy[idx, 0]), float(self.xy[idx, 1]), int(self.octave[idx]),
                            float(self.scale[idx]), float(self.orientation[idx]), float(self.response[idx]))
        return Keypoints(self.xy[idx], self.octave[idx], self.scale[idx], self.orientation[idx], self.response[idx])


_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


def _popcount_rows(x: np.ndarray) -> np.ndarray:
    if hasattr(np, "bitwise_count"):
        return np.bitwise_count(x).sum(axis=-1, dtype=np.int64)
    return _POPCOUNT[x].sum(axis=-1, dtype=np.int64)


@dataclass
class Descriptors:
    """Descriptor matrix of one variant. ``length`` is bits (binary) or dims (real)."""

    kind: str
    data: np.ndarray
    length: int

    def __post_init__(self):
        if self.kind == BINARY:
            self.data = np.ascontiguousarray(self.data, dtype=np.uint8).reshape(-1, (self.length + 7) // 8)
        elif self.kind == REAL:
            self.data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1, self.length)
        else:
            raise ValueError(f"unknown descriptor kind {self.kind!r}")

    @classmethod
    def binary(cls, packed: np.ndarray, n_bits: int | None = None) -> "Descriptors":
        packed = np.asarray(packed, dtype=np.uint8)
        n_bits = packed.shape[-1] * 8 if n_bits is None else n_bits
        return cls(BINARY, packed, n_bits)

    @classmethod
    def real(cls, vectors: np.ndarray, normalize: bool = True) -> "Descriptors":
        v = np.asarray(vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("real descriptors must be a 2-D array")
        if normalize and len(v):
            norms = np.linalg.norm(v, axis=1, keepdims=True)
            if np.any(norms == 0) or not np.all(np.isfinite(norms)):
                raise MalformedRecord("descriptor with zero or non-finite norm")
            v = v / norms
        return cls(REAL, v.astype(np.float32), v.shape[1])

    @classmethod
    def empty_like(cls, other: "Descriptors") -> "Descriptors":
        return cls(other.kind, other.data[:0], other.length)

    def __len__(self):
        return len(self.data)

    def __getitem__(self, idx) -> "Descriptors":
        idx = np.atleast_1d(idx) if np.isscalar(idx) else idx
        return Descriptors(self.kind, self.data[idx], self.length)

    def compatible(self, other: "Descriptors") -> bool:
        return self.kind == other.kind and self.length == other.length

    def check_compatible(self, other: "Descriptors") -> None:
        if not self.compatible(other):
            raise VariantMismatch(f"{self.kind}/{self.length} vs {other.kind}/{other.length}")

    def distances(self, other: "Descriptors") -> np.ndarray:
        """Full (len(self), len(other)) distance matrix."""
        self.check_compatible(other)
        if self.kind == BINARY:
            a = self.data
            b = other.data
            out = np.empty((len(a), len(b)), dtype=np.float64)
            chunk = max(1, 2_000_000 // max(1, b.size))
            for s in range(0, len(a), chunk):
                out[s:s + chunk] = _popcount_rows(a[s:s + chunk, None, :] ^ b[None, :, :])
            return out
        a = self.data.astype(np.float64)
        b = other.data.astype(np.float64)
        d2 = (a**2).sum(1)[:, None] + (b**2).sum(1)[None, :] - 2 * a @ b.T
        return np.sqrt(np.maximum(d2, 0.0))

    def paired_distances(self, ia: np.ndarray, other: "Descriptors", ib: np.ndarray) -> np.ndarray:
        """Distances between rows self[ia[k]] and other[ib[k]]."""
        self.check_compatible(other)
        if self.kind == BINARY:
            return _popcount_rows(self.data[ia] ^ other.data[ib]).astype(np.float64)
        diff = self.data[ia].astype(np.float64) - other.data[ib].astype(np.float64)
        return np.sqrt((diff**2).sum(axis=1))

    def bits(self) -> np.ndarray:
        """Unpacked bit matrix (binary variant only)."""
        return np.unpackbits(self.data, axis=1, bitorder="little")[:, : self.length]

    @staticmethod
    def concat(items: list["Descriptors"]) -> "Descriptors":
        first = items[0]
        for d in items[1:]:
            first.check_compatible(d)
        return Descriptors(first.kind, np.concatenate([d.data for d in items]), first.length)


# ----------------------------------------------------------------------------
# pyramid
# ----------------------------------------------------------------------------


def build_pyramid(image: np.ndarray, cfg: PyramidConfig) -> list[np.ndarray]:
    """Area-averaged scale pyramid; level i is floor(dim / factor**i)."""
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise ValueError("expected a nonempty 2-D grayscale image")
    h, w = image.shape
    sizes = []
    for i in range(cfg.n_levels):
        f = cfg.scale_factor**i
        lw, lh = int(math.floor(w / f)), int(math.floor(h / f))
        if lw < 1 or lh < 1:
            raise ConfigTooDeep(f"level {i} of a {w}x{h} image would be empty")
        sizes.append((lw, lh))
    levels = [image]
    src = Image.fromarray(image.astype(np.uint8))
    for lw, lh in sizes[1:]:
        levels.append(np.asarray(src.resize((lw, lh), Image.BOX)))
    return levels


def level_to_base(xy: np.ndarray, scale: float) -> np.ndarray:
    """Pixel centre at a pyramid level -> level-0 pixel coordinates."""
    return (np.asarray(xy, dtype=float) + 0.5) * scale - 0.5


# ----------------------------------------------------------------------------
# baseline extractor
# ----------------------------------------------------------------------------

_CIRCLE = np.array(
    [(0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
     (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3)]
)
PATCH_RADIUS = 15
BORDER = 19
N_BITS = 256


def fast_scores(img: np.ndarray, threshold: int = 20, arc: int = 9) -> np.ndarray:
    """Segment-test corner score per pixel (0 where no corner)."""
    I = img.astype(np.int16)
    h, w = I.shape
    score = np.zeros((h, w), dtype=np.float64)
    if h < 7 or w < 7:
        return score
    c = I[3:h - 3, 3:w - 3]
    ring = np.stack([I[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx] for dx, dy in _CIRCLE])
    diff = ring - c[None]
    corner = np.zeros(c.shape, dtype=bool)
    for mask in (diff > threshold, diff < -threshold):
        run = mask.copy()
        for k in range(1, arc):
            run &= np.roll(mask, -k, axis=0)
        corner |= run.any(axis=0)
    strength = np.maximum(np.abs(diff) - threshold, 0).sum(axis=0).astype(np.float64)
    score[3:h - 3, 3:w - 3] = np.where(corner, strength, 0.0)
    return score


def _brief_pattern(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pts = np.clip(np.round(rng.normal(0.0, 31 / 5.0, size=(N_BITS, 4))), -13, 13)
    return pts.astype(np.float64)


def _disk_offsets(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    dx, dy = np.meshgrid(r, r)
    keep = dx**2 + dy**2 <= radius**2
    return np.stack([dx[keep], dy[keep]], axis=1)


_DISK = _disk_offsets(PATCH_RADIUS)


def _orientations(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    vals = img[ys[:, None] + _DISK[None, :, 1], xs[:, None] + _DISK[None, :, 0]].astype(np.float64)
    m10 = (vals * _DISK[None, :, 0]).sum(axis=1)
    m01 = (vals * _DISK[None, :, 1]).sum(axis=1)
    ang = np.arctan2(m01, m10)
    return np.where(ang >= np.pi, ang - 2 * np.pi, ang)


def _describe(smooth: np.ndarray, xs: np.ndarray, ys: np.ndarray, ang: np.ndarray, pattern: np.ndarray) -> np.ndarray:
    c, s = np.cos(ang)[:, None], np.sin(ang)[:, None]
    h, w = smooth.shape

    def sample(px, py):
        rx = np.round(c * px - s * py).astype(np.int64) + xs[:, None]
        ry = np.round(s * px + c * py).astype(np.int64) + ys[:, None]
        return smooth[np.clip(ry, 0, h - 1), np.clip(rx, 0, w - 1)]

    a = sample(pattern[None, :, 0], pattern[None, :, 1])
    b = sample(pattern[None, :, 2], pattern[None, :, 3])
    return np.packbits(a < b, axis=1, bitorder="little")


def detect_and_describe(image: np.ndarray, cfg: PyramidConfig = PyramidConfig(), target_count: int = 1000,
                        seed: int = 0, fast_threshold: int = 20, grid: int = 8):
    """Baseline corner detector + steered 256-bit binary descriptor.

    Returns ``(Keypoints, Descriptors)`` sorted strongest response first.
    """
    image = np.asarray(image)
    levels = build_pyramid(image, cfg)
    pattern = _brief_pattern(seed)
    H, W = image.shape
    all_xy, all_oct, all_resp, all_ang, all_desc = [], [], [], [], []
    for lvl, img in enumerate(levels):
        h, w = img.shape
        if h <= 2 * BORDER or w <= 2 * BORDER:
            continue
        score = fast_scores(img, fast_threshold)
        score[:BORDER] = 0
        score[-BORDER:] = 0
        score[:, :BORDER] = 0
        score[:, -BORDER:] = 0
        # deterministic tie-break so plateaus keep exactly one maximum
        jitter = np.arange(h * w, dtype=np.float64).reshape(h, w) * (1e-9 / (h * w))
        ranked = np.where(score > 0, score + jitter, 0.0)
        peaks = (ranked == ndimage.maximum_filter(ranked, size=3)) & (ranked > 0)
        ys, xs = np.nonzero(peaks)
        if len(xs) == 0:
            continue
        ang = _orientations(img, xs, ys)
        smooth = ndimage.gaussian_filter(img.astype(np.float64), 2.0)
        desc = _describe(smooth, xs, ys, ang, pattern)
        f = cfg.scale_factor**lvl
        all_xy.append(level_to_base(_subpixel(score, xs, ys), f))
        all_oct.append(np.full(len(xs), lvl))
        all_resp.append(score[ys, xs])
        all_ang.append(ang)
        all_desc.append(desc)
    if not all_xy:
        return Keypoints.empty(), Descriptors.binary(np.zeros((0, N_BITS // 8), np.uint8), N_BITS)
    xy = np.concatenate(all_xy)
    octave = np.concatenate(all_oct)
    resp = np.concatenate(all_resp)
    ang = np.concatenate(all_ang)
    desc = np.concatenate(all_desc)

    keep = _grid_select(xy, resp, W, H, target_count, grid)
    kps = Keypoints(xy[keep], octave[keep], cfg.scale_factor ** octave[keep], ang[keep], resp[keep])
    return kps, Descriptors.binary(desc[keep], N_BITS)


def _subpixel(score: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Refine integer score peaks with a separable parabola fit (|offset| <= 0.5)."""
    s = score.astype(np.float64)
    c = s[ys, xs]

    def offset(lo, hi):
        den = 2.0 * (2.0 * c - lo - hi)
        d = np.divide(hi - lo, den, out=np.zeros_like(c), where=den > 0)
        return np.clip(d, -0.5, 0.5)

    dx = offset(s[ys, xs - 1], s[ys, xs + 1])
    dy = offset(s[ys - 1, xs], s[ys + 1, xs])
    return np.stack([xs + dx, ys + dy], axis=1)


def _grid_select(xy, resp, width, height, target, grid) -> np.ndarray:
    """Per-cell quota, topped up with the globally strongest leftovers."""
    if len(xy) == 0 or target <= 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(resp)), -resp))
    cx = np.clip((xy[:, 0] * grid / width).astype(int), 0, grid - 1)
    cy = np.clip((xy[:, 1] * grid / height).astype(int), 0, grid - 1)
    cell = cy * grid + cx
    quota = max(1, math.ceil(target / grid**2))
    taken = np.zeros(grid * grid, dtype=int)
    chosen = np.zeros(len(resp), dtype=bool)
    for i in order:
        if taken[cell[i]] < quota:
            taken[cell[i]] += 1
            chosen[i] = True
    picked = [i for i in order if chosen[i]]
    if len(picked) < target:
        picked += [i for i in order if not chosen[i]][: target - len(picked)]
    picked = np.array(picked, dtype=np.int64)
    picked = picked[np.lexsort((picked, -resp[picked]))]
    return picked[:target]


# ----------------------------------------------------------------------------
# feature files
# ----------------------------------------------------------------------------

FEATURE_MAGIC = b"FSLF"
_HEADER = struct.Struct("<4sIBII")
_FRAME_V1 = struct.Struct("<QI")
_FRAME_V2 = struct.Struct("<QII")


def _record_dtype(kind: str, length: int) -> np.dtype:
    payload = ("desc", "u1", ((length + 7) // 8,)) if kind == BINARY else ("desc", "<f4", (length,))
    return np.dtype([("x", "<f4"), ("y", "<f4"), ("octave", "u1"), ("scale", "<f4"),
                     ("orientation", "<f4"), ("response", "<f4"), payload])


class FeatureFile:
    """Index over an FSLF container; frames are decoded on demand.

    Version 1 fixes the descriptor length in the header. Version 2 repeats a
    length field in every frame block, which lets inconsistent files be
    detected instead of silently misparsed.
    """

    def __init__(self, path, n_levels: int | None = None):
        self.path = Path(path)
        self.n_levels = n_levels
        self._buf = self.path.read_bytes()
        if len(self._buf) < _HEADER.size:
            raise MalformedRecord(f"{self.path}: truncated header")
        magic, self.version, variant, self.length, count = _HEADER.unpack_from(self._buf, 0)
        if magic != FEATURE_MAGIC:
            raise MalformedRecord(f"{self.path}: bad magic {magic!r}")
        if self.version not in (1, 2):
            raise MalformedRecord(f"{self.path}: unsupported version {self.version}")
        if variant not in (0, 1):
            raise MalformedRecord(f"{self.path}: unknown descriptor variant {variant}")
        self.kind = BINARY if variant == 0 else REAL
        self._offsets: dict[int, tuple[int, int, int]] = {}
        off = _HEADER.size
        for _ in range(count):
            if self.version == 1:
                if off + _FRAME_V1.size > len(self._buf):
                    raise MalformedRecord(f"{self.path}: truncated frame header at byte {off}")
                fid, n = _FRAME_V1.unpack_from(self._buf, off)
                length = self.length
                off += _FRAME_V1.size
            else:
                if off + _FRAME_V2.size > len(self._buf):
                    raise MalformedRecord(f"{self.path}: truncated frame header at byte {off}")
                fid, n, length = _FRAME_V2.unpack_from(self._buf, off)
                off += _FRAME_V2.size
                if length != self.length:
                    raise MixedDescriptorLength(
                        f"{self.path}: frame {fid} has descriptor length {length}, header says {self.length}")
            size = _record_dtype(self.kind, length).itemsize * n
            if off + size > len(self._buf):
                raise MalformedRecord(f"{self.path}: frame {fid} truncated")
            if fid in self._offsets:
                raise MalformedRecord(f"{self.path}: duplicate frame id {fid}")
            self._offsets[fid] = (off, n, length)
            off += size
        if off != len(self._buf):
            raise MalformedRecord(f"{self.path}: {len(self._buf) - off} trailing bytes")

    @property
    def frame_ids(self) -> list[int]:
        return list(self._offsets)

    def __contains__(self, frame_id) -> bool:
        return frame_id in self._offsets

    def read(self, frame_id: int):
        if frame_id not in self._offsets:
            raise MissingFrame(f"frame {frame_id} not in {self.path}")
        off, n, length = self._offsets[frame_id]
        rec = np.frombuffer(self._buf, dtype=_record_dtype(self.kind, length), count=n, offset=off)
        xy = np.stack([rec["x"], rec["y"]], axis=1).astype(np.float64)
        if not np.all(np.isfinite(xy)) or np.any(xy < 0):
            raise MalformedRecord(f"frame {frame_id}: invalid keypoint coordinates")
        octave = rec["octave"].astype(np.int64)
        if self.n_levels is not None and np.any(octave >= self.n_levels):
            raise MalformedRecord(f"frame {frame_id}: octave beyond {self.n_levels} levels")
        kps = Keypoints(xy, octave, rec["scale"], rec["orientation"], rec["response"])
        if self.kind == BINARY:
            desc = Descriptors.binary(np.array(rec["desc"]), length)
        else:
            desc = Descriptors.real(np.array(rec["desc"], dtype=np.float64))
        return kps, desc


def load_external_features(path, frame_id: int, n_levels: int | None = None):
    """Keypoints and descriptors of one frame from an FSLF file."""
    return FeatureFile(path, n_levels).read(frame_id)


def encode_feature_file(frames: dict[int, tuple[Keypoints, Descriptors]], version: int = 1) -> bytes:
    items = list(frames.items())
    if not items:
        raise ValueError("no frames to write")
    first = items[0][1][1]
    lengths = {d.length for _, (_, d) in items}
    if version == 1 and len(lengths) > 1:
        raise MixedDescriptorLength(f"descriptor lengths {sorted(lengths)} in one version-1 file")
    for _, (_, d) in items:
        if d.kind != first.kind:
            raise VariantMismatch("frames mix descriptor variants")
    parts = [_HEADER.pack(FEATURE_MAGIC, version, 0 if first.kind == BINARY else 1, first.length, len(items))]
    for fid, (kps, desc) in items:
        if len(kps) != len(desc):
            raise ValueError(f"frame {fid}: {len(kps)} keypoints but {len(desc)} descriptors")
        if version == 1:
            parts.append(_FRAME_V1.pack(fid, len(kps)))
        else:
            parts.append(_FRAME_V2.pack(fid, len(kps), desc.length))
        rec = np.zeros(len(kps), dtype=_record_dtype(desc.kind, desc.length))
        rec["x"], rec["y"] = kps.xy[:, 0], kps.xy[:, 1]
        rec["octave"] = kps.octave
        rec["scale"] = kps.scale
        rec["orientation"] = kps.orientation
        rec["response"] = kps.response
        rec["desc"] = desc.data
        parts.append(rec.tobytes())
    return b"".join(parts)


def write_feature_file(path, frames: dict[int, tuple[Keypoints, Descriptors]], version: int = 1) -> None:
    atomic_write_bytes(path, encode_feature_file(frames, version))


# ----------------------------------------------------------------------------
# matching
# ----------------------------------------------------------------------------


class Matches(NamedTuple):
    idx_a: np.ndarray
    idx_b: np.ndarray
    distance: np.ndarray

    def __len__(self):
        return len(self.idx_a)

    def pairs(self) -> list[tuple[int, int, float]]:
        return [(int(a), int(b), float(d)) for a, b, d in zip(self.idx_a, self.idx_b, self.distance)]

    @classmethod
    def empty(cls) -> "Matches":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))


def _two_smallest(D: np.ndarray, axis: int):
    n = D.shape[axis]
    if n == 0:
        return None, None, None
    best = np.argmin(D, axis=axis)
    d1 = np.take_along_axis(D, np.expand_dims(best, axis), axis).squeeze(axis)
    if n == 1:
        d2 = np.full_like(d1, np.inf)
    else:
        d2 = np.partition(D, 1, axis=axis).take(1, axis=axis)
    return best, d1, d2


def match_distance_matrix(D: np.ndarray, gate: float, ratio: float) -> Matches:
    """Mutual-best matching with distance gate and two-sided ratio test."""
    if D.shape[0] == 0 or D.shape[1] == 0:
        return Matches.empty()
    best_b, d1_a, d2_a = _two_smallest(D, 1)
    best_a, d1_b, d2_b = _two_smallest(D, 0)
    ia = np.arange(D.shape[0])
    mutual = best_a[best_b] == ia
    ok = mutual & (d1_a <= gate) & (d1_a < ratio * d2_a) & (d1_a < ratio * d2_b[best_b])
    return Matches(ia[ok], best_b[ok], d1_a[ok])


def match(a: Descriptors, b: Descriptors, th: MatchThresholds, mode: str = "strict") -> Matches:
    """One-to-one descriptor matching.

    A pair is kept when it is mutually nearest, its distance passes the
    threshold for ``mode`` and it beats ``ratio`` times the runner-up on
    both sides. The two-sided ratio test keeps the result symmetric.
    """
    a.check_compatible(b)
    return match_distance_matrix(a.distances(b), th.gate(mode), th.ratio)


def match_in_windows(query: Descriptors, query_xy: np.ndarray, cand: Descriptors, cand_xy: np.ndarray,
                     radius, gate: float, ratio: float = 1.0) -> Matches:
    """Match each query row to candidates located within ``radius`` pixels.

    ``radius`` may be a scalar or a per-query array. Each candidate is used
    at most once (lowest distance wins).
    """
    query.check_compatible(cand)
    nq = len(query)
    if nq == 0 or len(cand) == 0:
        return Matches.empty()
    radius = np.broadcast_to(np.asarray(radius, dtype=float), (nq,))
    tree = cKDTree(np.asarray(cand_xy, dtype=float))
    neigh = tree.query_ball_point(np.asarray(query_xy, dtype=float), r=radius)
    qi = np.repeat(np.arange(nq), [len(n) for n in neigh])
    if len(qi) == 0:
        return Matches.empty()
    ci = np.fromiter((c for n in neigh for c in n), dtype=np.int64, count=len(qi))
    d = query.paired_distances(qi, cand, ci)
    order = np.lexsort((ci, d, qi))
    qi, ci, d = qi[order], ci[order], d[order]
    first = np.ones(len(qi), dtype=bool)
    first[1:] = qi[1:] != qi[:-1]
    starts = np.flatnonzero(first)
    best_q, best_c, best_d = qi[starts], ci[starts], d[starts]
    counts = np.diff(np.append(starts, len(qi)))
    second = np.full(len(starts), np.inf)
    has2 = counts > 1
    second[has2] = d[starts[has2] + 1]
    ok = (best_d <= gate) & ((best_d < ratio * second) | ~has2)
    best_q, best_c, best_d = best_q[ok], best_c[ok], best_d[ok]
    order = np.lexsort((best_q, best_d))
    _, keep = np.unique(best_c[order], return_index=True)
    sel = np.sort(order[keep])
    return Matches(best_q[sel], best_c[sel], best_d[sel])
