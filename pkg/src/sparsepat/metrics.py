"""SSIM / PSNR and split-level evaluation reports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

RANGE_TOL = 1e-6


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricConfig:
    data_range: float = 1.0
    mode: str = "windowed"  # or "global"
    peak: str = "fixed"  # or "per_image": peakval = max of the reference image
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.mode not in ("windowed", "global"):
            raise MetricError(f"SSIM mode must be 'windowed' or 'global', got {self.mode!r}")
        if self.peak not in ("fixed", "per_image"):
            raise MetricError(f"peak convention must be 'fixed' or 'per_image', got {self.peak!r}")
        if self.data_range <= 0:
            raise MetricError("data_range must be positive")
        if self.window < 1 or self.window % 2 == 0:
            raise MetricError("window must be a positive odd integer")


def _check_pair(x, y, data_range=None):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch: {x.shape} vs {y.shape}")
    if data_range is not None:
        for name, a in (("x", x), ("y", y)):
            if a.size and (a.min() < -RANGE_TOL or a.max() > data_range + RANGE_TOL):
                raise MetricError(f"{name} has values outside [0, {data_range}]")
    return x, y


def gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _ssim_formula(mx, my, vx, vy, cxy, c1, c2):
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))


def ssim_map(x, y, cfg: MetricConfig = MetricConfig()):
    """Local SSIM over every fully contained Gaussian window."""
    x, y = _check_pair(x, y, cfg.data_range)
    g = gaussian_window(cfg.window, cfg.sigma)
    h = cfg.window // 2

    def blur(a):
        a = ndimage.correlate1d(a, g, axis=0, mode="reflect")
        a = ndimage.correlate1d(a, g, axis=1, mode="reflect")
        return a[h:a.shape[0] - h, h:a.shape[1] - h]

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    return _ssim_formula(mx, my, vx, vy, cxy, c1, c2)


def ssim(x, y, cfg: MetricConfig = MetricConfig()) -> float:
    """Mean windowed SSIM, or one global evaluation in ``mode="global"``.

    Images smaller than one window in either axis use the global form.
    """
    x, y = _check_pair(x, y, cfg.data_range)
    if x.ndim != 2:
        raise MetricError(f"expected a 2-D image, got shape {x.shape}")
    if cfg.mode == "windowed" and min(x.shape) >= cfg.window:
        return float(np.mean(ssim_map(x, y, cfg)))
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    mx, my = x.mean(), y.mean()
    vx = np.mean((x - mx) ** 2)
    vy = np.mean((y - my) ** 2)
    cxy = np.mean((x - mx) * (y - my))
    return float(_ssim_formula(mx, my, vx, vy, cxy, c1, c2))


def psnr(x, y, peakval: float | None = 1.0) -> float:
    """10 log10(peakval^2 / MSE); ``inf`` when the images are identical.

    ``peakval=None`` takes the maximum of ``y`` (the reference).
    """
    x, y = _check_pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if peakval is None:
        peakval = float(y.max())
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peakval ** 2 / mse)


def mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    if np.all(v == v[0]):
        return float(v[0]), 0.0
    if np.any(np.isinf(v)):
        return float(np.mean(v)), math.inf
    return float(np.mean(v)), float(np.std(v))


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


@dataclass
class MetricReport:
    source: str
    split: str
    config: MetricConfig
    ids: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    psnr: list = field(default_factory=list)

    def add(self, sid, s, p):
        self.ids.append(sid)
        self.ssim.append(float(s))
        self.psnr.append(float(p))

    @property
    def ssim_mean_std(self):
        return mean_std(self.ssim)

    @property
    def psnr_mean_std(self):
        return mean_std(self.psnr)

    def to_dict(self):
        sm, ss = self.ssim_mean_std
        pm, ps = self.psnr_mean_std
        return {
            "source": self.source,
            "split": self.split,
            "config": asdict(self.config),
            "count": len(self.ids),
            "ssim": {"mean": _jsonable(sm), "std": _jsonable(ss)},
            "psnr": {"mean": _jsonable(pm), "std": _jsonable(ps)},
            "samples": [
                {"id": i, "ssim": _jsonable(s), "psnr": _jsonable(p)}
                for i, s, p in zip(self.ids, self.ssim, self.psnr)
            ],
        }

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "ssim", "psnr"])
            for row in zip(self.ids, self.ssim, self.psnr):
                w.writerow([row[0], repr(row[1]), repr(row[2])])

    def table(self):
        return format_table([self])


def format_table(reports):
    """Aligned ``mean±std`` table, one row per report."""
    rows = [("source", "split", "n", "SSIM", "PSNR (dB)")]
    for r in reports:
        sm, ss = r.ssim_mean_std
        pm, ps = r.psnr_mean_std
        rows.append((r.source, r.split, str(len(r.ids)), f"{sm:.4f}±{ss:.4f}", f"{pm:.2f}±{ps:.2f}"))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows)


def score(pred, target, cfg: MetricConfig = MetricConfig()):
    peak = None if cfg.peak == "per_image" else cfg.data_range
    return ssim(pred, target, cfg), psnr(pred, target, peak)


def evaluate_split(manifest, model, cfg: MetricConfig = MetricConfig(), split: str = "test"):
    """Score ``model`` on one manifest split.

    ``model`` is ``"identity"`` (prediction = target), ``"input"`` (prediction =
    artifactual input), a checkpoint path, or a Generator.
    """
    from . import dataset
    from .gan import load_generator, predict
    from .models import Generator

    samples = dataset.split_samples(manifest, split)
    if not samples:
        raise MetricError(f"split {split!r} is empty")
    pairs = dataset.load_pairs(manifest, split)
    if isinstance(model, Generator):
        gen, source = model, "model"
    elif model in ("identity", "input"):
        gen, source = None, model
    else:
        gen, source = load_generator(model), str(model)
        if gen.cfg.in_channels != 1:
            raise MetricError(f"{model}: generator expects {gen.cfg.in_channels} input channels")
    report = MetricReport(source, split, cfg)
    for s, (x, y) in zip(samples, pairs):
        if gen is not None:
            pred = predict(gen, x)
        else:
            pred = y if source == "identity" else x
        report.add(s["id"], *score(np.clip(pred, 0.0, cfg.data_range), y, cfg))
    return report
