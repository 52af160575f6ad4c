"""Full-volume inference by tiling, SSIM/PSNR, and swap label maps with
connected-component false-positive statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateError, ShapeError, SizeError
from .model import InputMode
from .volume import Blend, Channel, Volume, crop, plan_tiles, reassemble

DEFAULT_THRESHOLD = 0.9
DEFAULT_MIN_CLUSTER = 27


# -- inference --------------------------------------------------------------

def predict_full(generator, study, tile, batch=4):
    """Tile the (normalised) study, run the generator on each tile and blend
    overlaps by averaging. Returns (fat_hat, water_hat)."""
    tile = (tile,) * 3 if isinstance(tile, int) else tuple(tile)
    layout = plan_tiles(study.dims, tile, Blend.AVERAGE)
    chans = [study.ip] if generator.input_mode is InputMode.SINGLE_IP else [study.ip, study.op]
    fat_tiles, water_tiles = [], []
    for start in range(0, len(layout.origins), batch):
        origins = layout.origins[start:start + batch]
        x = np.stack([np.stack([crop(c, o, tile).data for c in chans]) for o in origins])
        y = generator.predict(x)
        for k in range(len(origins)):
            fat_tiles.append(Volume(y[k, 0], study.spacing, Channel.F))
            water_tiles.append(Volume(y[k, 1], study.spacing, Channel.W))
    return reassemble(layout, fat_tiles), reassemble(layout, water_tiles)


# -- image quality ----------------------------------------------------------------

def psnr(reference, test, mpi=1.0):
    """10 log10(MPI^2 / MSE) in dB; ``math.inf`` for identical volumes."""
    a, b = _pair(reference, test)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(mpi * mpi / mse)


@dataclass(frozen=True)
class SsimConfig:
    window: tuple = (11, 11, 11)
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2

    def __post_init__(self):
        if any(w % 2 == 0 or w < 1 for w in self.window):
            raise ValueError(f"SSIM window must be odd, got {self.window}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM constants must be positive")


def _pair(reference, test):
    a = np.asarray(getattr(reference, "data", reference), dtype=np.float64)
    b = np.asarray(getattr(test, "data", test), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"volumes differ in shape: {a.shape} vs {b.shape}")
    return a, b


def _box_mean(a, window):
    # separable running sums over every fully interior window
    for axis, w in enumerate(window):
        c = np.cumsum(a, axis=axis)
        pad = [(0, 0)] * a.ndim
        pad[axis] = (1, 0)
        c = np.pad(c, pad)
        hi = [slice(None)] * a.ndim
        lo = [slice(None)] * a.ndim
        hi[axis] = slice(w, None)
        lo[axis] = slice(None, -w)
        a = (c[tuple(hi)] - c[tuple(lo)]) / w
    return a


def ssim_map(reference, test, cfg=SsimConfig()):
    a, b = _pair(reference, test)
    if any(n < w for n, w in zip(a.shape, cfg.window)):
        raise SizeError(f"volume {a.shape} smaller than SSIM window {cfg.window}")
    mx = _box_mean(a, cfg.window)
    my = _box_mean(b, cfg.window)
    sxx = _box_mean(a * a, cfg.window) - mx * mx
    syy = _box_mean(b * b, cfg.window) - my * my
    sxy = _box_mean(a * b, cfg.window) - mx * my
    num = (2 * mx * my + cfg.c1) * (2 * sxy + cfg.c2)
    den = (mx * mx + my * my + cfg.c1) * (sxx + syy + cfg.c2)
    return num / den


def ssim(reference, test, cfg=SsimConfig()):
    """Mean SSIM over all interior sliding windows (population statistics)."""
    return float(np.mean(ssim_map(reference, test, cfg)))


# -- reports ----------------------------------------------------------------------------

@dataclass
class SubjectMetrics:
    subject_id: str
    ssim_w: float
    ssim_f: float
    psnr_w: float
    psnr_f: float


METRIC_NAMES = ("ssim_w", "ssim_f", "psnr_w", "psnr_f")


def _mean_sd(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    if not np.all(np.isfinite(v)):
        return float(np.mean(v)), math.nan
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return float(np.mean(v)), sd


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    def add(self, row: SubjectMetrics):
        self.rows.append(row)
        self.rows.sort(key=lambda r: r.subject_id)

    def summary(self):
        return {m: _mean_sd([getattr(r, m) for r in self.rows]) for m in METRIC_NAMES}

    def mean_ssim(self):
        """Average of the water and fat SSIM over subjects."""
        s = self.summary()
        return 0.5 * (s["ssim_w"][0] + s["ssim_f"][0])

    def table_line(self, label=""):
        s = self.summary()
        parts = [f"Water SSIM {_fmt(*s['ssim_w'], 3)}", f"PSNR {_fmt(*s['psnr_w'], 2)}",
                 f"Fat SSIM {_fmt(*s['ssim_f'], 3)}", f"PSNR {_fmt(*s['psnr_f'], 2)}"]
        return (f"{label}  " if label else "") + "  ".join(parts)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("subject_id",) + METRIC_NAMES)
            for r in self.rows:
                w.writerow([r.subject_id] + [_num(getattr(r, m)) for m in METRIC_NAMES])
            s = self.summary()
            w.writerow(["mean"] + [_num(s[m][0]) for m in METRIC_NAMES])
            w.writerow(["sd"] + [_num(s[m][1]) for m in METRIC_NAMES])
            w.writerow(["mean±sd"] + [_fmt(*s[m], 3 if m.startswith("ssim") else 2)
                                      for m in METRIC_NAMES])


def _num(x):
    if math.isinf(x):
        return "inf"
    return f"{x:.6f}"


def _fmt(mean, sd, digits):
    if math.isinf(mean):
        return "inf"
    return f"{mean:.{digits}f} ± {sd:.{digits}f}"


def subject_metrics(subject_id, pred_f, pred_w, true_f, true_w, cfg=SsimConfig()):
    return SubjectMetrics(subject_id,
                          ssim(true_w, pred_w, cfg), ssim(true_f, pred_f, cfg),
                          psnr(true_w, pred_w), psnr(true_f, pred_f))


# -- swap label maps ---------------------------------------------------------------------

_CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


@dataclass
class Cluster:
    size: int
    bbox: tuple  # ((x0, x1), (y0, y1), (z0, z1)) half-open


@dataclass
class SwapLabelMap:
    mask: Volume
    clusters: list
    threshold: float
    min_cluster: int

    @property
    def voxels(self):
        return int(sum(c.size for c in self.clusters))


def swap_label_map(original_f, original_w, pred_f, pred_w,
                   threshold=DEFAULT_THRESHOLD, min_cluster=DEFAULT_MIN_CLUSTER):
    """Voxels where both channels disagree by more than ``threshold``,
    grouped into 26-connected clusters of at least ``min_cluster`` voxels."""
    of, pf = _pair(original_f, pred_f)
    ow, pw = _pair(original_w, pred_w)
    if of.shape != ow.shape:
        raise ShapeError("fat and water volumes are not co-registered")
    candidates = (np.abs(of - pf) > threshold) & (np.abs(ow - pw) > threshold)
    labels, n = ndimage.label(candidates, structure=_CONNECTIVITY_26)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = np.zeros(n + 1, dtype=bool)
    clusters = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None or sizes[idx] < min_cluster:
            continue
        keep[idx] = True
        clusters.append(Cluster(int(sizes[idx]), tuple((s.start, s.stop) for s in sl)))
    mask = keep[labels].astype(np.float32)
    spacing = getattr(original_f, "spacing", (1.0, 1.0, 1.0))
    return SwapLabelMap(Volume(mask, spacing), clusters, float(threshold), int(min_cluster))


@dataclass
class FPSummary:
    subjects: int
    mean_clusters: float
    mean_voxels: float
    sd_voxels: float
    rate: float  # fraction of all voxels, background included
    threshold: float
    min_cluster: int

    def format(self):
        return (f"{self.mean_clusters:.2f} clusters per subject; "
                f"{self.mean_voxels:,.0f} ± {self.sd_voxels:,.0f} voxels per subject; "
                f"{100 * self.rate:.3f}% of the volume")

    def to_dict(self):
        d = dict(self.__dict__)
        d["summary"] = self.format()
        return d


def fp_statistics(maps, volume_dims):
    if not maps:
        raise DegenerateError("no swap label maps given")
    n_vox = int(np.prod(volume_dims))
    clusters = [len(m.clusters) for m in maps]
    voxels = [m.voxels for m in maps]
    mean_v, sd_v = _mean_sd(voxels)
    return FPSummary(len(maps), float(np.mean(clusters)), mean_v, sd_v,
                     float(np.sum(voxels)) / (n_vox * len(maps)),
                     maps[0].threshold, maps[0].min_cluster)
