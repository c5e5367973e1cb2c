"""Phantoms, augmentation, and persisted (input, target) datasets.

Directory layout produced by :func:`build_dataset`::

    <root>/manifest.json
    <root>/train/<id>.input.pai   <root>/train/<id>.target.pai
    <root>/test/<id>.input.pai    <root>/test/<id>.target.pai
"""
from __future__ import annotations

import enum
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import acoustics
from .containers import read_image, write_image

PHANTOM_SIZES = (64, 128, 256)
ZOOM_RANGE = (1.0, 1.5)
CROP_RANGE = (0.75, 1.0)  # crop side as a fraction of the image side
AUG_OPS = ("crop", "zoom", "hflip", "vflip")
MANIFEST_VERSION = 1


class DatasetError(ValueError):
    pass


class PhantomKind(str, enum.Enum):
    VESSEL_TREE = "vessel_tree"
    DISC_SET = "disc_set"
    POINTS = "points"


@dataclass
class Phantom:
    image: np.ndarray
    kind: PhantomKind
    seed: int | None = None

    def __post_init__(self):
        img = self.image
        if img.min() < 0 or img.max() > 1:
            raise DatasetError("phantom values must lie in [0, 1]")
        if not np.any(img > 0):
            raise DatasetError("phantom has no nonzero pixel")


@dataclass
class SamplePair:
    id: str
    split: str
    input_path: str
    target_path: str
    phantom: int
    provenance: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "id": self.id,
            "split": self.split,
            "input": self.input_path,
            "target": self.target_path,
            "phantom": self.phantom,
            "provenance": self.provenance,
        }


# ---------------------------------------------------------------- phantoms

def _stamp(img, y, x, radius, value):
    """Paint a filled disc, keeping the brighter value where vessels overlap."""
    n = img.shape[0]
    r = max(radius, 0.5)
    y0, y1 = max(int(math.floor(y - r)), 0), min(int(math.ceil(y + r)) + 1, n)
    x0, x1 = max(int(math.floor(x - r)), 0), min(int(math.ceil(x + r)) + 1, n)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inside = (yy - y) ** 2 + (xx - x) ** 2 <= r * r + 0.25
    patch = img[y0:y1, x0:x1]
    patch[inside] = np.maximum(patch[inside], value)


def _grow_branch(img, rng, y, x, angle, width, value, depth, budget):
    n = img.shape[0]
    length = int(rng.uniform(0.35, 0.7) * n / (1 + 0.5 * depth))
    for _ in range(length):
        if budget[0] <= 0:
            return
        budget[0] -= 1
        _stamp(img, y, x, width / 2, value)
        angle += rng.normal(0.0, 0.12)
        y += math.sin(angle)
        x += math.cos(angle)
        if not (-2 <= y < n + 2 and -2 <= x < n + 2):
            return
        if depth < 3 and rng.random() < 0.035:
            side = rng.choice([-1.0, 1.0])
            child_w = max(1.0, width * rng.uniform(0.55, 0.85))
            child_v = float(np.clip(value * rng.uniform(0.85, 1.1), 0.5, 1.0))
            _grow_branch(img, rng, y, x, angle + side * rng.uniform(0.35, 1.0),
                         child_w, child_v, depth + 1, budget)


def generate_vessel_phantom(seed: int, size: int = 128) -> Phantom:
    """Branching vessel tree: widths 1-4 px, intensities in [0.5, 1], zero background."""
    if size not in PHANTOM_SIZES:
        raise DatasetError(f"phantom size must be one of {PHANTOM_SIZES}, got {size}")
    rng = np.random.default_rng([int(seed), size])
    img = np.zeros((size, size))
    budget = [int(0.9 * size * size / 8)]  # caps coverage well below a quarter of the area
    n_roots = int(rng.integers(1, 4))
    roots = 0
    # short trees that leave the field early get company until coverage is visible
    while roots < n_roots or (np.mean(img > 0) < 0.02 and roots < 12 and budget[0] > 0):
        roots += 1
        edge = int(rng.integers(4))
        t = rng.uniform(0.2, 0.8) * (size - 1)
        start = [(0.0, t), (size - 1.0, t), (t, 0.0), (t, size - 1.0)][edge]
        inward = [math.pi / 2, -math.pi / 2, 0.0, math.pi][edge]
        _grow_branch(img, rng, start[0], start[1], inward + rng.uniform(-0.5, 0.5),
                     rng.uniform(2.5, 4.0), rng.uniform(0.7, 1.0), 0, budget)
    return Phantom(img, PhantomKind.VESSEL_TREE, int(seed))


def disc_phantom(size: int, radius: float, center=None, value: float = 1.0) -> Phantom:
    """Uniform disc; ``radius`` and ``center`` in pixels."""
    c = ((size - 1) / 2, (size - 1) / 2) if center is None else center
    yy, xx = np.mgrid[:size, :size]
    img = np.where((yy - c[0]) ** 2 + (xx - c[1]) ** 2 <= radius ** 2, float(value), 0.0)
    return Phantom(img, PhantomKind.DISC_SET)


def point_phantom(size: int, points, value: float = 1.0) -> Phantom:
    """Single-pixel sources at integer ``(row, col)`` positions."""
    img = np.zeros((size, size))
    for r, c in points:
        img[int(r), int(c)] = value
    return Phantom(img, PhantomKind.POINTS)


def load_external_image(path, size: int = 128) -> Phantom:
    """Grayscale image file (e.g. a vessel map) scaled to [0, 1] and resized to ``size``."""
    from PIL import Image

    img = np.asarray(Image.open(path).convert("L"), dtype=np.float64)
    h, w = img.shape
    s = min(h, w)
    img = img[(h - s) // 2:(h - s) // 2 + s, (w - s) // 2:(w - s) // 2 + s]
    img = _resample(img, 0.0, 0.0, float(s), size)
    lo, hi = img.min(), img.max()
    if hi <= lo:
        raise DatasetError(f"{path}: image is constant")
    return Phantom((img - lo) / (hi - lo), PhantomKind.VESSEL_TREE)


# ------------------------------------------------------------ augmentation

def _resample(img, top, left, side, out):
    """Bilinearly resample the square window [top, top+side) x [left, left+side) to out x out."""
    if side == img.shape[0] and out == img.shape[0] and top == 0 and left == 0:
        return img.copy()
    # pixel-centre mapping; edges clamp, so the value range cannot grow
    coords = top - 0.5 + (np.arange(out) + 0.5) * side / out
    coords_x = left - 0.5 + (np.arange(out) + 0.5) * side / out
    yy, xx = np.meshgrid(coords, coords_x, indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


def _normalize_op(op):
    if isinstance(op, str):
        return op, None
    name, arg = op
    return name, arg


def augment(image, ops, seed: int = 0):
    """Apply ``ops`` in order.

    Each op is a name from ``AUG_OPS`` (parameters drawn from ``seed``) or a
    ``(name, value)`` pair: ``("zoom", factor)`` or ``("crop", (top, left, side))``.
    Crops and zooms are resized back to the original shape.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise DatasetError(f"augment expects a square image, got {img.shape}")
    n = img.shape[0]
    rng = np.random.default_rng(seed)
    for op in ops:
        name, arg = _normalize_op(op)
        if name == "hflip":
            img = img[:, ::-1]
        elif name == "vflip":
            img = img[::-1, :]
        elif name == "zoom":
            z = rng.uniform(*ZOOM_RANGE) if arg is None else float(arg)
            if not ZOOM_RANGE[0] <= z <= ZOOM_RANGE[1]:
                raise DatasetError(f"zoom {z} outside {ZOOM_RANGE}")
            side = n / z
            off = (n - side) / 2
            img = _resample(img, off, off, side, n)
        elif name == "crop":
            if arg is None:
                side = rng.uniform(*CROP_RANGE) * n
                top, left = rng.uniform(0, n - side, size=2)
            else:
                top, left, side = (float(a) for a in arg)
            if side <= 0 or top < 0 or left < 0 or top + side > n or left + side > n:
                raise DatasetError(f"crop window {(top, left, side)} outside {n}x{n} image")
            img = _resample(img, top, left, side, n)
        else:
            raise DatasetError(f"unknown augmentation op {name!r}; expected one of {AUG_OPS}")
    return np.ascontiguousarray(img)


def sample_augmentations(count: int, seed: int):
    """``count`` op lists; the first is always the identity."""
    rng = np.random.default_rng([int(seed), 7919])
    plans = [[]]
    while len(plans) < count:
        ops = [name for name in AUG_OPS if rng.random() < 0.5]
        plans.append(ops)
    return plans[:count]


def expand(images, factor: int, seed: int = 0):
    """Augment every image ``factor`` times (original included): returns a list."""
    out = []
    for i, img in enumerate(images):
        for a, ops in enumerate(sample_augmentations(factor, seed * 100003 + i)):
            out.append(augment(img, ops, seed=_aug_seed(seed, i, a)))
    return out


def _aug_seed(seed, phantom, aug):
    return int(np.random.SeedSequence([int(seed), int(phantom), int(aug)]).generate_state(1)[0])


# ------------------------------------------------------------------ splits

def assign_splits(n_phantoms: int, split_ratio: float, seed: int):
    """Map phantom index -> "train"/"test" by a seeded shuffle of phantoms."""
    if not 0 < split_ratio < 1:
        raise DatasetError(f"split_ratio must lie in (0, 1), got {split_ratio}")
    n_train = int(round(split_ratio * n_phantoms))
    order = np.random.default_rng([int(seed), 104729]).permutation(n_phantoms)
    train = set(int(i) for i in order[:n_train])
    return {p: ("train" if p in train else "test") for p in range(n_phantoms)}


# ---------------------------------------------------------------- building

@dataclass
class DatasetSpec:
    n_phantoms: int = 100
    augment_factor: int = 20
    preset: str = "vessels-desk"
    keep_every: int = 4
    split_ratio: float = 0.8
    seed: int = 0
    phantom_kind: str = "vessel_tree"

    def __post_init__(self):
        if self.n_phantoms < 1 or self.augment_factor < 1:
            raise DatasetError("n_phantoms and augment_factor must be >= 1")
        if self.keep_every < 1:
            raise DatasetError("keep_every must be >= 1")
        if not 0 < self.split_ratio < 1:
            raise DatasetError(f"split_ratio must lie in (0, 1), got {self.split_ratio}")
        if self.preset not in acoustics.PRESETS:
            raise DatasetError(f"unknown simulation preset {self.preset!r}")
        PhantomKind(self.phantom_kind)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def sample_id(phantom: int, aug: int) -> str:
    return f"p{phantom:04d}_a{aug:02d}"


def _make_phantom(spec: DatasetSpec, index: int, size: int) -> Phantom:
    pseed = int(np.random.SeedSequence([spec.seed, index]).generate_state(1)[0])
    kind = PhantomKind(spec.phantom_kind)
    if kind is PhantomKind.VESSEL_TREE:
        return generate_vessel_phantom(pseed, size)
    rng = np.random.default_rng(pseed)
    if kind is PhantomKind.DISC_SET:
        img = np.zeros((size, size))
        for _ in range(int(rng.integers(1, 4))):
            r = rng.uniform(0.05, 0.15) * size
            c = rng.uniform(r, size - r, size=2)
            img = np.maximum(img, disc_phantom(size, r, c, rng.uniform(0.5, 1.0)).image)
        return Phantom(img, kind, pseed)
    pts = rng.integers(size // 8, size - size // 8, size=(int(rng.integers(1, 6)), 2))
    return Phantom(point_phantom(size, pts).image, kind, pseed)


def _simulate_pair(args):
    spec, index, aug, ops, split, root = args
    sid = sample_id(index, aug)
    try:
        grid, ring = acoustics.make_geometry(spec.preset)
        phantom = _make_phantom(spec, index, grid.image_size)
        target = np.clip(augment(phantom.image, ops, seed=_aug_seed(spec.seed, index, aug)), 0.0, 1.0)
        sino = acoustics.forward_simulate(target, grid, ring)
        sparse_ring = ring.with_keep_every(spec.keep_every)
        sino = acoustics.sparse_subsample(sino, spec.keep_every)
        recon = acoustics.time_reversal(sino, grid, sparse_ring)
    except Exception as exc:  # re-raised with the sample id attached
        raise DatasetError(f"sample {sid}: {exc}") from exc
    provenance = {
        "phantom": index,
        "phantom_seed": phantom.seed,
        "augmentation": [list(o) if not isinstance(o, str) else o for o in ops],
        "keep_every": spec.keep_every,
        "preset": spec.preset,
        "grid": grid.to_dict(),
    }
    extent = grid.region_extent
    in_rel = f"{split}/{sid}.input.pai"
    tg_rel = f"{split}/{sid}.target.pai"
    write_image(Path(root) / in_rel, recon, extent, dict(provenance, role="input"))
    write_image(Path(root) / tg_rel, target, extent, dict(provenance, role="target"))
    return SamplePair(sid, split, in_rel, tg_rel, index, provenance)


def plan_samples(spec: DatasetSpec):
    """``(phantom, aug, ops, split)`` for every sample, in id order."""
    splits = assign_splits(spec.n_phantoms, spec.split_ratio, spec.seed)
    plan = []
    for p in range(spec.n_phantoms):
        for a, ops in enumerate(sample_augmentations(spec.augment_factor, spec.seed * 100003 + p)):
            plan.append((p, a, ops, splits[p]))
    return plan


def build_dataset(spec: DatasetSpec, root, workers: int = 1, config_snapshot=None):
    """Simulate, reconstruct and persist every sample; write ``manifest.json`` last."""
    root = Path(root)
    for split in ("train", "test"):
        (root / split).mkdir(parents=True, exist_ok=True)
    jobs = [(spec, p, a, ops, split, str(root)) for p, a, ops, split in plan_samples(spec)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(_simulate_pair, jobs, chunksize=4))
    else:
        pairs = [_simulate_pair(j) for j in jobs]
    manifest = {
        "version": MANIFEST_VERSION,
        "spec": spec.to_dict(),
        "config": config_snapshot or {},
        "counts": {
            "train": sum(p.split == "train" for p in pairs),
            "test": sum(p.split == "test" for p in pairs),
            "total": len(pairs),
        },
        "samples": [p.to_dict() for p in pairs],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_manifest(path, check_files: bool = True):
    """Read and validate a manifest; ``path`` may be the file or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"{path}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON: {exc}") from None
    samples = manifest.get("samples")
    if not isinstance(samples, list):
        raise DatasetError(f"{path}: manifest has no sample list")
    ids = [s["id"] for s in samples]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{path}: duplicate sample ids")
    counts = manifest.get("counts", {})
    if counts.get("train", 0) + counts.get("test", 0) != len(samples):
        raise DatasetError(f"{path}: split counts do not sum to {len(samples)}")
    if check_files:
        for s in samples:
            for key in ("input", "target"):
                if not (path.parent / s[key]).exists():
                    raise DatasetError(f"{path}: sample {s['id']} missing file {s[key]}")
    manifest["_root"] = str(path.parent)
    return manifest


def split_samples(manifest, split: str):
    return [s for s in manifest["samples"] if s["split"] == split]


def load_pairs(manifest, split: str):
    """List of ``(input, target)`` float32 arrays for ``split``, in manifest order."""
    root = Path(manifest["_root"])
    out = []
    for s in split_samples(manifest, split):
        x, _ = read_image(root / s["input"])
        y, _ = read_image(root / s["target"])
        if x.shape != y.shape:
            raise DatasetError(f"sample {s['id']}: input {x.shape} and target {y.shape} differ")
        out.append((x, y))
    return out
