"""Labels, image preprocessing, manifests, group-aware splits and synthetic data."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import imaging
from .probdist import quantile_array

GRIP_MIN = 0.09
GRIP_MAX = 0.82


class DataError(ValueError):
    pass


def normalize_grip(raw_grip: float) -> float:
    """Grip factor (0.09 ... 0.82) -> friction factor (0 ... 1), clamped.

    This is an affine map followed by a clamp, not a projection: applying it
    twice only returns the same value at 0 and 1.
    """
    return min(1.0, max(0.0, (raw_grip - GRIP_MIN) / (GRIP_MAX - GRIP_MIN)))


@dataclass
class SampleRecord:
    input: str | tuple[float, ...]
    friction_factor: float
    group_id: str
    timestamp: str | None = None

    def __post_init__(self):
        if not (0.0 <= self.friction_factor <= 1.0):
            raise DataError(f"friction_factor {self.friction_factor!r} outside [0, 1]")
        if not self.group_id:
            raise DataError("group_id must be non-empty")
        if isinstance(self.input, list):
            self.input = tuple(float(v) for v in self.input)


# ---------------------------------------------------------------- images


@dataclass(frozen=True)
class BevCrop:
    """Road quadrilateral in the source image (TL, TR, BR, BL) and the output square size.

    Example for a 1920x1024 windshield frame, lane ahead of the car::

        BevCrop(corners=((820, 560), (1100, 560), (1500, 900), (420, 900)), output_size=324)
    """

    corners: tuple[tuple[float, float], ...]
    output_size: int = 324

    def __post_init__(self):
        object.__setattr__(self, "corners", tuple((float(x), float(y)) for x, y in self.corners))
        if self.output_size < 2:
            raise DataError(f"output_size must be >= 2, got {self.output_size}")
        imaging.check_convex(self.corners)

    @classmethod
    def from_json(cls, path) -> "BevCrop":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(d) - {"corners", "output_size"}
        if unknown:
            raise DataError(f"unknown crop keys: {sorted(unknown)}")
        return cls(tuple(tuple(c) for c in d["corners"]), int(d.get("output_size", 324)))

    def homography(self) -> np.ndarray:
        return imaging.solve_homography(self.corners, imaging.square_corners(self.output_size))


def bev_warp(image: np.ndarray, crop: BevCrop) -> np.ndarray:
    c, h, w = image.shape
    pts = np.asarray(crop.corners)
    if pts[:, 0].min() < 0 or pts[:, 1].min() < 0 or pts[:, 0].max() > w - 1 or pts[:, 1].max() > h - 1:
        raise DataError(f"crop corners {crop.corners} outside image of size {w}x{h}")
    return imaging.warp_quad(image, crop.corners, crop.output_size)


@dataclass(frozen=True)
class PixelStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if any(not math.isfinite(v) for v in (*self.mean, *self.std)):
            raise DataError("pixel statistics must be finite")
        if any(s <= 0 for s in self.std):
            raise DataError(f"pixel std must be positive, got {self.std}")

    @classmethod
    def identity(cls, channels: int = 3) -> "PixelStats":
        return cls((0.0,) * channels, (1.0,) * channels)

    @classmethod
    def from_images(cls, images: np.ndarray) -> "PixelStats":
        """Per-channel mean/std over an (N, C, H, W) array (training split only)."""
        images = np.asarray(images, dtype=np.float64)
        return cls(tuple(images.mean(axis=(0, 2, 3)).tolist()), tuple(images.std(axis=(0, 2, 3)).tolist()))

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}


def standardize(images: np.ndarray, stats: PixelStats) -> np.ndarray:
    """``(x - mean) / std`` per channel for (C, H, W) or (N, C, H, W) arrays."""
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    shp = (-1, 1, 1) if images.ndim == 3 else (1, -1, 1, 1)
    return ((images - mean.reshape(shp)) / std.reshape(shp)).astype(np.float32)


def prepare(image: np.ndarray, crop: BevCrop | None, target_size: int) -> np.ndarray:
    """Bird's-eye warp (if a crop is given) then bilinear resize to ``target_size``."""
    out = bev_warp(image, crop) if crop is not None else np.asarray(image, dtype=np.float64)
    return imaging.resize(out, target_size)


def preprocess(image: np.ndarray, crop: BevCrop | None, target_size: int, stats: PixelStats) -> np.ndarray:
    return standardize(prepare(image, crop, target_size), stats)


def load_image(path) -> np.ndarray:
    """PNG or PPM -> (3, H, W) float64 in [0, 1]."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from None
    return arr.transpose(2, 0, 1)


def save_image(image: np.ndarray, path) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


# ---------------------------------------------------------------- manifests

_IMAGE_HEADER = ["path", "friction_factor", "group_id", "timestamp"]


def write_manifest(records: Sequence[SampleRecord], path, feature_dim: int | None = None) -> None:
    """CSV with ``path`` (image mode) or ``f0..fk`` (vector mode) input columns.

    ``feature_dim`` only matters for an empty vector-mode manifest.
    """
    if records:
        vector = not isinstance(records[0].input, str)
        k = len(records[0].input) if vector else 0
    else:
        vector = feature_dim is not None
        k = feature_dim or 0
    header = [f"f{i}" for i in range(k)] + _IMAGE_HEADER[1:] if vector else _IMAGE_HEADER
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in records:
            if vector != (not isinstance(r.input, str)) or (vector and len(r.input) != k):
                raise DataError("all manifest records must share one input layout")
            inputs = [repr(float(v)) for v in r.input] if vector else [r.input]
            w.writerow(inputs + [repr(float(r.friction_factor)), r.group_id, r.timestamp or ""])


def read_manifest(path) -> list[SampleRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty manifest (header required)")
    header = rows[0]
    for col in ("friction_factor", "group_id"):
        if col not in header:
            raise DataError(f"{path}: missing required column {col!r}")
    feat_cols = [c for c in header if c.startswith("f") and c[1:].isdigit()]
    if "path" in header and feat_cols:
        raise DataError(f"{path}: manifest mixes 'path' and feature columns")
    if "path" not in header and not feat_cols:
        raise DataError(f"{path}: need a 'path' column or f0..fk feature columns")
    idx = {c: i for i, c in enumerate(header)}
    records = []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {line_no}: expected {len(header)} fields, got {len(row)}")
        try:
            ff = float(row[idx["friction_factor"]])
            inp = row[idx["path"]] if "path" in idx else tuple(float(row[idx[c]]) for c in feat_cols)
        except ValueError as e:
            raise DataError(f"{path}: row {line_no}: {e}") from None
        if not (0.0 <= ff <= 1.0):
            raise DataError(f"{path}: row {line_no}: friction_factor {ff} outside [0, 1]")
        gid = row[idx["group_id"]]
        if not gid:
            raise DataError(f"{path}: row {line_no}: empty group_id")
        ts = row[idx["timestamp"]] if "timestamp" in idx and row[idx["timestamp"]] else None
        records.append(SampleRecord(inp, ff, gid, ts))
    return records


def load_inputs(records: Sequence[SampleRecord], root, size: int, crop: BevCrop | None = None) -> np.ndarray:
    """Model-ready but unstandardised (N, 3, size, size) float32 inputs.

    Image records are read relative to ``root`` and warped/resized; vector
    records must hold exactly ``3 * size * size`` values and are reshaped.
    """
    out = np.empty((len(records), 3, size, size), dtype=np.float32)
    root = Path(root)
    for i, r in enumerate(records):
        if isinstance(r.input, str):
            out[i] = prepare(load_image(root / r.input), crop, size)
        else:
            v = np.asarray(r.input, dtype=np.float32)
            if v.size != 3 * size * size:
                raise DataError(
                    f"record {i}: vector input has {v.size} values, model needs 3*{size}*{size}={3 * size * size}"
                )
            out[i] = v.reshape(3, size, size)
    return out


# ---------------------------------------------------------------- splitting


def split(
    records: Sequence[SampleRecord],
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> tuple[list[SampleRecord], list[SampleRecord], list[SampleRecord]]:
    """Group-aware train/val/test split.

    Groups are shuffled with ``seed``, stably sorted largest first, and each is
    put into the partition whose sample count is furthest below its target
    (ties go to the earlier partition). A group never spans two partitions.
    """
    idx = split_indices([r.group_id for r in records], fractions, seed)
    return tuple([records[i] for i in part] for part in idx)  # type: ignore[return-value]


def split_indices(group_ids: Sequence[str], fractions=(0.70, 0.15, 0.15), seed: int = 0) -> tuple[list[int], ...]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise DataError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    members: dict[str, list[int]] = {}
    for i, g in enumerate(group_ids):
        if not g:
            raise DataError(f"record {i} has an empty group_id")
        members.setdefault(g, []).append(i)
    if len(members) < 3:
        raise DataError(f"need at least 3 groups for a 3-way split, got {len(members)}")
    names = sorted(members)
    order = np.random.default_rng(seed).permutation(len(names))
    groups = sorted((names[i] for i in order), key=lambda g: -len(members[g]))
    n = len(group_ids)
    targets = [f * n for f in fractions]
    counts = [0, 0, 0]
    parts: tuple[list[int], ...] = ([], [], [])
    for g in groups:
        k = max(range(3), key=lambda j: (targets[j] - counts[j], -j))
        parts[k].extend(members[g])
        counts[k] += len(members[g])
    return tuple(sorted(p) for p in parts)


# ---------------------------------------------------------------- synthetic data

MEAN_FUNCTIONS = ("linear", "sine", "constant")
SIGMA_FUNCTIONS = ("constant", "linear", "shared")


@dataclass
class SyntheticSpec:
    """Heteroscedastic truncated-normal regression task.

    Each sample has two latent factors ``u0, u1`` in [0, 1]. The label mean
    depends on ``u0``. The noise scale depends on ``u1`` for the "linear"
    sigma function, and on ``u0`` for "shared", where it peaks at mid-range
    (``4 u0 (1 - u0)``) so the extremes are the most predictable. Labels are
    drawn from ``TruncatedNormal(mu, sigma, 0, 1)``.

    "shared" ties the uncertainty to the same visual evidence as the mean,
    which is what a frozen point-estimate backbone can represent;
    "linear" puts it on a factor the point task never needs.

    In image mode the latents are painted as patch maps: the image is a grid
    of ``cell`` x ``cell`` patches, a fraction ``u0`` of them bright in
    channel 0 and an independent fraction ``u1`` bright in channel 1, with
    per-image random bright/dark levels and pixel noise (channel 2 is
    nuisance). The label content is the patch *count*, which is unaffected
    by flips and only mildly by small rotations and brightness jitter. The
    latents are snapped to the realised patch fractions so the image fully
    determines (mu, sigma). In vector mode the features are
    ``[u0, u1, noise...]``.
    """

    n: int = 1000
    mode: str = "image"
    image_size: int = 32
    cell: int = 4
    feature_dim: int = 4
    mean_function: str = "linear"
    sigma_function: str = "linear"
    sigma_const: float = 0.05
    sigma_lo: float = 0.02
    sigma_hi: float = 0.15
    pixel_noise: float = 0.02
    group_size: int = 25
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if self.n < 0:
            raise DataError(f"n must be >= 0, got {self.n}")
        if self.mode not in ("image", "vector"):
            raise DataError(f"mode must be 'image' or 'vector', got {self.mode!r}")
        if self.mean_function not in MEAN_FUNCTIONS:
            raise DataError(f"mean_function must be one of {MEAN_FUNCTIONS}, got {self.mean_function!r}")
        if self.sigma_function not in SIGMA_FUNCTIONS:
            raise DataError(f"sigma_function must be one of {SIGMA_FUNCTIONS}, got {self.sigma_function!r}")
        if self.mode == "image" and (self.image_size % self.cell or self.image_size < 2 * self.cell):
            raise DataError(f"image_size {self.image_size} must be a multiple (>= 2x) of cell {self.cell}")
        if self.mode == "vector" and self.feature_dim < 2:
            raise DataError("feature_dim must be >= 2")
        if min(self.sigma_const, self.sigma_lo, self.sigma_hi) <= 0:
            raise DataError("sigma parameters must be positive")
        if self.group_size < 1:
            raise DataError("group_size must be >= 1")
        if not self.a < self.b:
            raise DataError("truncation needs a < b")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise DataError(f"unknown synthetic spec keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise DataError(str(e)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    def mu(self, u0: np.ndarray) -> np.ndarray:
        if self.mean_function == "linear":
            return 0.1 + 0.8 * u0
        if self.mean_function == "sine":
            return 0.5 + 0.35 * np.sin(2.0 * np.pi * u0)
        return np.full_like(u0, 0.5)

    def sigma(self, u: np.ndarray) -> np.ndarray:
        """Noise scale from latents of shape (n, 2)."""
        if self.sigma_function == "constant":
            return np.full(len(u), self.sigma_const)
        t = u[:, 1] if self.sigma_function == "linear" else 4.0 * u[:, 0] * (1.0 - u[:, 0])
        return self.sigma_lo + (self.sigma_hi - self.sigma_lo) * t


@dataclass
class SyntheticSet:
    spec: SyntheticSpec
    seed: int
    records: list[SampleRecord]
    mu: np.ndarray
    sigma: np.ndarray
    images: np.ndarray | None = None
    latents: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.friction_factor for r in self.records])

    def truth(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "mean_function": self.spec.mean_function,
            "sigma_function": self.spec.sigma_function,
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
        }


def _paint(spec: SyntheticSpec, u: np.ndarray, rng: np.random.Generator):
    """Render latents as patch-map images; returns (images, snapped latents)."""
    n = len(u)
    g = spec.image_size // spec.cell
    cells = g * g
    images = np.empty((n, 3, spec.image_size, spec.image_size))
    snapped = np.empty_like(u)
    for i in range(n):
        lev_hi = rng.uniform(0.7, 0.9)
        lev_lo = rng.uniform(0.1, 0.3)
        for ch in range(2):
            k = int(round(u[i, ch] * cells))
            snapped[i, ch] = k / cells
            grid = np.zeros(cells)
            grid[rng.permutation(cells)[:k]] = 1.0
            grid = grid.reshape(g, g).repeat(spec.cell, 0).repeat(spec.cell, 1)
            images[i, ch] = lev_lo + (lev_hi - lev_lo) * grid
        images[i, 2] = rng.uniform(0.3, 0.7)
        images[i] += rng.normal(0.0, spec.pixel_noise, images[i].shape)
    # quantise exactly as an 8-bit PNG would, so files and memory agree
    images = np.rint(np.clip(images, 0.0, 1.0) * 255.0) / 255.0
    return images.astype(np.float32), snapped


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> SyntheticSet:
    """Deterministic synthetic dataset; group ids are assigned in consecutive blocks."""
    root = np.random.SeedSequence(seed)
    lat_ss, lab_ss, img_ss, feat_ss = root.spawn(4)
    u = np.random.default_rng(lat_ss).random((spec.n, 2))
    images = None
    if spec.mode == "image":
        images, u = _paint(spec, u, np.random.default_rng(img_ss))
    mu = spec.mu(u[:, 0])
    sigma = spec.sigma(u)
    p = np.random.default_rng(lab_ss).random(spec.n)
    labels = quantile_array(mu, sigma, p, spec.a, spec.b) if spec.n else np.empty(0)
    labels = np.clip(labels, 0.0, 1.0)
    if spec.mode == "vector":
        extra = np.random.default_rng(feat_ss).random((spec.n, spec.feature_dim - 2))
        feats = np.c_[u, extra]
        inputs = [tuple(float(v) for v in row) for row in feats]
    else:
        inputs = [f"images/{i:06d}.png" for i in range(spec.n)]
    records = [
        SampleRecord(inputs[i], float(labels[i]), f"g{i // spec.group_size:05d}", None) for i in range(spec.n)
    ]
    return SyntheticSet(spec, seed, records, mu, sigma, images, u)


def write_synthetic(ds: SyntheticSet, manifest_path) -> Path:
    """Write manifest, images (image mode) and the ``<manifest>.truth.json`` sidecar."""
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    if ds.images is not None:
        (manifest_path.parent / "images").mkdir(exist_ok=True)
        for rec, img in zip(ds.records, ds.images):
            save_image(img, manifest_path.parent / rec.input)
    write_manifest(ds.records, manifest_path, ds.spec.feature_dim if ds.spec.mode == "vector" else None)
    sidecar = manifest_path.with_name(manifest_path.name + ".truth.json")
    sidecar.write_text(json.dumps(ds.truth(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return sidecar
