"""Clinical indices: pathology size, chord transmurality, n-SD thresholding, correlation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

N_CHORDS = 100
TRANSMURAL_THRESHOLD = 50.0
VIABILITY_BINS = ("viable", "likely viable", "likely nonviable", "nonviable")
VIABILITY_COLORS = ("mistyrose", "coral", "orangered", "red")
QUANT_SCHEMA = "quantreport.v1"


class GeometryError(ValueError):
    pass


class UnreliableRemoteError(ValueError):
    pass


@dataclass
class Chord:
    sector_index: int
    myocardium_pixels: int
    scar_pixels: int = 0
    transmurality_pct: float = 0.0
    empty: bool = False


@dataclass
class ChordSet:
    chords: list
    center: tuple
    sector_of_pixel: np.ndarray = field(repr=False, default=None)  # -1 outside myocardium

    def percentages(self) -> np.ndarray:
        return np.array([c.transmurality_pct for c in self.chords])


@dataclass
class QuantReport:
    scar_size_pct: float
    edema_size_pct: float
    transmural_count: int
    chord_bins: dict
    chords: ChordSet | None = None


def pathology_size_pct(path_mask, myo_mask) -> float:
    """Pathology area as a percentage of the myocardium (pathology pixels included)."""
    path_mask = np.asarray(path_mask, dtype=bool)
    denom = np.asarray(myo_mask, dtype=bool) | path_mask
    n = int(denom.sum())
    if n == 0:
        raise GeometryError("empty myocardium: size percentage undefined")
    return 100.0 * int(path_mask.sum()) / n


def sector_angles(shape, center) -> np.ndarray:
    ii, jj = np.indices(shape, dtype=np.float64)
    return np.mod(np.arctan2(jj - center[1], ii - center[0]), 2 * np.pi)


def build_chords(myo_mask, lv_mask, n_chords: int = N_CHORDS) -> ChordSet:
    """Split the myocardium into equal-angle sectors about the LV blood-pool centroid."""
    myo = np.asarray(myo_mask, dtype=bool)
    lv = np.asarray(lv_mask, dtype=bool)
    if not lv.any():
        raise GeometryError("LV blood pool is empty; cannot place the chord centre")
    center = ndimage.center_of_mass(lv)
    ci, cj = int(round(center[0])), int(round(center[1]))
    if myo[ci, cj]:
        raise GeometryError("LV centroid falls on myocardium")
    ang = sector_angles(myo.shape, center)
    sector = np.minimum((ang / (2 * np.pi / n_chords)).astype(np.int64), n_chords - 1)
    sector = np.where(myo, sector, -1)
    counts = np.bincount(sector[myo], minlength=n_chords)
    chords = [Chord(k, int(counts[k]), empty=counts[k] == 0) for k in range(n_chords)]
    return ChordSet(chords, tuple(center), sector)


def viability_bin(pct: float) -> int:
    if pct <= 25:
        return 0
    if pct <= 50:
        return 1
    if pct <= 75:
        return 2
    return 3


def transmurality(chords: ChordSet, scar_mask) -> ChordSet:
    """Fill per-chord ``100 * scar / chord`` percentages."""
    scar = np.asarray(scar_mask, dtype=bool)
    sector = chords.sector_of_pixel
    outside = scar & (sector < 0)
    if outside.any():
        log.warning("%d scar pixels outside the myocardium were ignored", int(outside.sum()))
    counts = np.bincount(sector[scar & (sector >= 0)], minlength=len(chords.chords))
    filled = []
    for c in chords.chords:
        s = int(counts[c.sector_index])
        pct = 0.0 if c.myocardium_pixels == 0 else 100.0 * s / c.myocardium_pixels
        filled.append(Chord(c.sector_index, c.myocardium_pixels, s, pct, c.empty))
    return ChordSet(filled, chords.center, sector)


def count_transmural(chords: ChordSet, threshold: float = TRANSMURAL_THRESHOLD) -> int:
    return int(sum(c.transmurality_pct > threshold for c in chords.chords))


def chord_bins(chords: ChordSet) -> dict:
    counts = [0] * 4
    for c in chords.chords:
        if not c.empty:
            counts[viability_bin(c.transmurality_pct)] += 1
    return dict(zip(VIABILITY_BINS, counts))


def derive_remote(myo_mask, lv_mask, path_mask, band: int = 25) -> np.ndarray:
    """Remote myocardium: pathology-free sectors in the band opposite the pathology."""
    chords = build_chords(myo_mask, lv_mask)
    sector = chords.sector_of_pixel
    path = np.asarray(path_mask, dtype=bool) & (sector >= 0)
    if not path.any():
        return sector >= 0
    ang = sector_angles(sector.shape, chords.center)[path]
    mean_ang = np.angle(np.exp(1j * ang).mean())
    opposite = int(np.mod(mean_ang + np.pi, 2 * np.pi) / (2 * np.pi / N_CHORDS)) % N_CHORDS
    wanted = {(opposite + d) % N_CHORDS for d in range(-(band // 2), band // 2 + 1)}
    diseased = set(np.unique(sector[path]).tolist())
    keep = np.array(sorted(wanted - diseased), dtype=np.int64)
    return np.isin(sector, keep) & (sector >= 0)


def nsd_segment(lge_image, myo_mask, remote_mask, n: float) -> np.ndarray:
    """Myocardium brighter than the remote mean plus ``n`` standard deviations."""
    img = np.asarray(lge_image, dtype=np.float64)
    remote = np.asarray(remote_mask, dtype=bool)
    if remote.sum() < 10:
        raise UnreliableRemoteError(f"remote region has {int(remote.sum())} pixels (< 10)")
    vals = img[remote]
    thr = vals.mean() + n * vals.std()
    return np.asarray(myo_mask, dtype=bool) & (img > thr)


def pearson_r(x, y) -> float:
    """Pearson correlation; NaN when either input has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson_r needs two equal-length vectors of at least 2 values")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(float(xc @ xc))
    sy = math.sqrt(float(yc @ yc))
    if sx == 0 or sy == 0:
        log.warning("zero variance: correlation undefined")
        return math.nan
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def quantify(label_mask, lv_mask=None) -> QuantReport:
    """Full report from a LabelMask (codes MYO=1, LV=2, SCAR=4, EDEMA=5); LV may be absent."""
    from .datapipe import EDEMA, LV, SCAR, myo_region

    lab = np.asarray(label_mask)
    myo = myo_region(lab)
    scar = lab == SCAR
    edema = np.isin(lab, (SCAR, EDEMA))
    lv = lab == LV if lv_mask is None else np.asarray(lv_mask, dtype=bool)
    if not lv.any():
        # predicted masks carry no LV label: use the cavity enclosed by the myocardium
        lv = ndimage.binary_fill_holes(myo) & ~myo
    chords = transmurality(build_chords(myo, lv), scar)
    return QuantReport(pathology_size_pct(scar, myo), pathology_size_pct(edema, myo),
                       count_transmural(chords), chord_bins(chords), chords)


def write_quant_csv(path, reports: dict):
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={QUANT_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(["subject", "scar_size_pct", "edema_size_pct", "transmural_count", *VIABILITY_BINS])
        for sid, r in reports.items():
            w.writerow([sid, f"{r.scar_size_pct:.4f}", f"{r.edema_size_pct:.4f}", r.transmural_count,
                        *[r.chord_bins[b] for b in VIABILITY_BINS]])


def plot_bullseye(chords: ChordSet, path, title: str = ""):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(chords.chords)
    theta = np.arange(n) * 2 * np.pi / n
    colors = ["lightgrey" if c.empty else VIABILITY_COLORS[viability_bin(c.transmurality_pct)]
              for c in chords.chords]
    fig = plt.figure(figsize=(4, 4))
    ax = fig.add_subplot(projection="polar")
    ax.bar(theta, np.ones(n), width=2 * np.pi / n, bottom=0.5, color=colors, edgecolor="white", linewidth=0.3,
           align="edge")
    ax.set_axis_off()
    ax.set_title(title or f"transmural chords: {count_transmural(chords)}")
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)


def plot_correlation(x, y, path, xlabel="manual", ylabel="automatic"):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = pearson_r(x, y) if len(x) >= 2 else math.nan
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(x, y, s=12)
    if np.isfinite(r):
        k, b = np.polyfit(x, y, 1)
        xs = np.linspace(x.min(), x.max(), 10)
        ax.plot(xs, k * xs + b, "r-")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(f"R = {r:.2f}")
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
