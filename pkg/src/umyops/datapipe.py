"""Multi-sequence ingestion, slice pairing, preprocessing, label harmonization and phantoms."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tps
from .io import dump_json, load_json, load_npz, save_npz

log = logging.getLogger(__name__)

BG, MYO, LV, RV, SCAR, EDEMA = range(6)
LABEL_NAMES = {BG: "BG", MYO: "MYO", LV: "LV", RV: "RV", SCAR: "SCAR", EDEMA: "EDEMA"}
SEQUENCES = ("bSSFP", "LGE", "T2")
CRI = "LGE"
MOVING = ("bSSFP", "T2")

# Pathology class indices used by the segmentation head.
P_BG, P_EDEMA, P_SCAR = 0, 1, 2


class EmptyOverlapError(ValueError):
    pass


class ZeroVarianceError(ValueError):
    pass


class PhantomSpecError(ValueError):
    pass


@dataclass
class SequenceVolume:
    voxels: np.ndarray
    affine: np.ndarray
    sequence_id: str
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim == 2:
            self.voxels = self.voxels[..., None]
        if self.affine is None:
            raise ValueError(f"{self.sequence_id}: volume has no affine")
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.affine.shape != (4, 4) or abs(np.linalg.det(self.affine[:3, :3])) < 1e-12:
            raise ValueError(f"{self.sequence_id}: affine must be an invertible 4x4 matrix")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.ndim == 2:
                self.labels = self.labels[..., None]

    @property
    def spacing(self) -> tuple:
        return tuple(float(v) for v in np.linalg.norm(self.affine[:3, :3], axis=0))

    def slice_center(self, k: int) -> np.ndarray:
        nx, ny = self.voxels.shape[:2]
        return (self.affine @ np.array([(nx - 1) / 2, (ny - 1) / 2, k, 1.0]))[:3]


@dataclass
class MultiSeqSlice:
    """One paired 2D sample. ``pathology`` is the merged scar/edema gold label in the CRI frame."""

    images: dict
    labels: dict
    spacing: tuple = (1.0, 1.0)
    cri: str = CRI
    provenance: dict = field(default_factory=dict)
    pathology: np.ndarray | None = None

    def __post_init__(self):
        if self.cri not in self.images:
            raise ValueError(f"common reference image {self.cri!r} missing")
        shapes = {np.shape(v) for v in self.images.values()}
        if len(shapes) != 1:
            raise ValueError(f"images disagree in shape: {shapes}")
        if min(shapes.pop()) <= 0:
            raise ValueError("empty image")

    @property
    def shape(self) -> tuple:
        return np.shape(self.images[self.cri])


def myo_region(mask) -> np.ndarray:
    """Myocardium support: pathologies replace myocardium pixels."""
    mask = np.asarray(mask)
    return np.isin(mask, (MYO, SCAR, EDEMA))


def anatomy_channels(mask) -> np.ndarray:
    """``(3, H, W)`` float channels MYO(+pathology), LV, RV."""
    mask = np.asarray(mask)
    return np.stack([myo_region(mask), mask == LV, mask == RV]).astype(np.float32)


def pathology_index(mask) -> np.ndarray:
    mask = np.asarray(mask)
    out = np.zeros(mask.shape, dtype=np.int64)
    out[mask == EDEMA] = P_EDEMA
    out[mask == SCAR] = P_SCAR
    return out


# ---------------------------------------------------------------------------
# label harmonization

def merge_pathology_labels(scar_in_cri, edema_in_cri) -> np.ndarray:
    """Combine scar and edema masks; overlap is scar."""
    scar = _as_bool(scar_in_cri, SCAR)
    edema = _as_bool(edema_in_cri, EDEMA)
    out = np.zeros(scar.shape, dtype=np.int64)
    out[edema] = EDEMA
    out[scar] = SCAR
    return out


def _as_bool(mask, code):
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return mask
    if set(np.unique(mask)) <= {0, 1}:
        return mask.astype(bool)
    return mask == code


def edema_union_for_eval(mask) -> dict:
    """Evaluation masks: ``scar`` unchanged, ``edema`` = scar OR edema."""
    mask = np.asarray(mask)
    return {"scar": mask == SCAR, "edema": np.isin(mask, (SCAR, EDEMA))}


# ---------------------------------------------------------------------------
# volumes: pairing, pre-alignment, preprocessing

def _slice_normal(vol: SequenceVolume) -> np.ndarray:
    n = np.cross(vol.affine[:3, 0], vol.affine[:3, 1])
    return n / np.linalg.norm(n)


def _coverage(vol: SequenceVolume, normal, origin) -> tuple:
    nz = vol.voxels.shape[2]
    pos = np.array([(vol.slice_center(k) - origin) @ normal for k in range(nz)])
    half = abs(vol.affine[:3, 2] @ normal) / 2
    return pos.min() - half, pos.max() + half


def pair_slices(vols: dict) -> list:
    """Pair every CRI slice inside the jointly imaged region with the nearest moving slices."""
    missing = set(SEQUENCES) - set(vols)
    if missing:
        raise ValueError(f"missing sequences: {sorted(missing)}")
    cri = vols[CRI]
    normal = _slice_normal(cri)
    origin = cri.slice_center(0)
    lo, hi = -np.inf, np.inf
    for v in vols.values():
        a, b = _coverage(v, normal, origin)
        lo, hi = max(lo, a), min(hi, b)
    tol = 1e-6
    out = []
    for k in range(cri.voxels.shape[2]):
        c = cri.slice_center(k)
        pos = (c - origin) @ normal
        if not (lo - tol <= pos <= hi + tol):
            continue
        idx = {CRI: k}
        for name in MOVING:
            v = vols[name]
            d = [np.linalg.norm(v.slice_center(j) - c) for j in range(v.voxels.shape[2])]
            idx[name] = int(np.argmin(d))  # first minimum: lowest index wins ties
        images = {s: vols[s].voxels[..., idx[s]] for s in SEQUENCES}
        shapes = {im.shape for im in images.values()}
        if len(shapes) != 1:
            raise ValueError("paired slices differ in shape; run rigid_prealign first")
        labels = {s: vols[s].labels[..., idx[s]] for s in SEQUENCES if vols[s].labels is not None}
        spacing = cri.spacing[:2]
        out.append(MultiSeqSlice(images=images, labels=labels, spacing=spacing,
                                 provenance={"slices": idx}))
    if not out:
        raise EmptyOverlapError("no physical region is imaged by all three sequences")
    return out


def _snap(coords, tol=1e-9):
    r = np.rint(coords)
    return np.where(np.abs(coords - r) < tol, r, coords)


def rigid_prealign(vols: dict) -> dict:
    """Resample moving volumes onto the CRI in-plane grid using header affines only.

    Each moving slice keeps its through-plane position; in-plane rotation, translation
    and pixel spacing are taken from the headers. No intensity-driven optimization.
    """
    cri = vols[CRI]
    out = {CRI: cri}
    n = _slice_normal(cri)
    for name, vol in vols.items():
        if name == CRI:
            continue
        if vol.affine is None:
            raise ValueError(f"{name}: missing affine")
        if np.array_equal(vol.affine, cri.affine) and vol.voxels.shape[:2] == cri.voxels.shape[:2]:
            out[name] = vol
            continue
        new_aff = np.eye(4)
        new_aff[:3, 0] = cri.affine[:3, 0]
        new_aff[:3, 1] = cri.affine[:3, 1]
        new_aff[:3, 2] = (vol.affine[:3, 2] @ n) * n
        new_aff[:3, 3] = cri.affine[:3, 3] + ((vol.affine[:3, 3] - cri.affine[:3, 3]) @ n) * n
        nx, ny = cri.voxels.shape[:2]
        nz = vol.voxels.shape[2]
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        hom = np.stack([ii.ravel(), jj.ravel(), kk.ravel(), np.ones(ii.size)])
        src = _snap((np.linalg.inv(vol.affine) @ new_aff @ hom)[:3])
        vox = ndimage.map_coordinates(vol.voxels, src, order=1, cval=0.0).reshape(nx, ny, nz)
        labels = None
        if vol.labels is not None:
            labels = ndimage.map_coordinates(vol.labels, src, order=0, cval=0).reshape(nx, ny, nz)
        out[name] = SequenceVolume(vox, new_aff, name, labels)
    return out


def heart_center(sl: MultiSeqSlice) -> tuple:
    lab = sl.labels.get(sl.cri)
    if lab is not None and myo_region(lab).any():
        return tuple(float(c) for c in ndimage.center_of_mass(myo_region(lab)))
    h, w = sl.shape
    return ((h - 1) / 2, (w - 1) / 2)


def zscore(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    sd = img.std()
    if sd == 0 or not np.isfinite(sd):
        raise ZeroVarianceError("cannot Z-score a constant image")
    out = (img - img.mean()) / sd
    return out - out.mean()


def crop_resample_normalize(sl: MultiSeqSlice, target_size=(128, 128), target_spacing=(1.5, 1.5)) -> MultiSeqSlice:
    """Crop around the heart, resample to ``target_spacing`` and Z-score every image."""
    c = heart_center(sl)
    th, tw = target_size
    sx = target_spacing[0] / sl.spacing[0]
    sy = target_spacing[1] / sl.spacing[1]
    ii, jj = np.meshgrid(np.arange(th), np.arange(tw), indexing="ij")
    coords = _snap(np.stack([c[0] + (ii - (th - 1) / 2) * sx, c[1] + (jj - (tw - 1) / 2) * sy]))
    images = {k: zscore(ndimage.map_coordinates(np.asarray(v, dtype=np.float64), coords, order=1, cval=0.0))
              for k, v in sl.images.items()}
    labels = {k: ndimage.map_coordinates(np.asarray(v), coords, order=0, cval=0)
              for k, v in sl.labels.items()}
    path = None
    if sl.pathology is not None:
        path = ndimage.map_coordinates(np.asarray(sl.pathology), coords, order=0, cval=0)
    prov = dict(sl.provenance, heart_center=list(c))
    return MultiSeqSlice(images, labels, tuple(target_spacing), sl.cri, prov, path)


def pathology_gold_from_registration(sl: MultiSeqSlice, disp: dict, grid: tps.ControlGrid) -> np.ndarray:
    """Warp the T2 edema label into the CRI frame and merge it with the LGE scar label."""
    scar = sl.labels[CRI] == SCAR
    coeffs = tps.solve_tps(grid, disp["T2"])
    edema = tps.warp_label(sl.labels["T2"], coeffs) == EDEMA
    return merge_pathology_labels(scar, edema)


# ---------------------------------------------------------------------------
# file formats

def load_nifti(path, sequence_id: str, label_path=None) -> SequenceVolume:
    import nibabel as nib

    img = nib.load(str(path))
    labels = None
    if label_path is not None:
        labels = np.asarray(nib.load(str(label_path)).dataobj).astype(np.int64)
    return SequenceVolume(np.asarray(img.dataobj, dtype=np.float64), img.affine, sequence_id, labels)


def save_slice(path, sl: MultiSeqSlice, extra: dict | None = None):
    """Portable container: ``<path>.npz`` arrays plus ``<path>.json`` sidecar."""
    path = Path(path)
    arrays = {f"image_{k}": np.asarray(v, dtype=np.float32) for k, v in sl.images.items()}
    arrays.update({f"label_{k}": np.asarray(v, dtype=np.uint8) for k, v in sl.labels.items()})
    if sl.pathology is not None:
        arrays["pathology"] = np.asarray(sl.pathology, dtype=np.uint8)
    save_npz(path.with_suffix(".npz"), arrays)
    meta = {"spacing": list(sl.spacing), "cri": sl.cri, "provenance": sl.provenance}
    if extra:
        meta.update(extra)
    dump_json(path.with_suffix(".json"), meta)


def load_slice(path) -> tuple:
    path = Path(path)
    arrays = load_npz(path.with_suffix(".npz"))
    meta = load_json(path.with_suffix(".json"))
    images = {k[6:]: v.astype(np.float64) for k, v in arrays.items() if k.startswith("image_")}
    labels = {k[6:]: v.astype(np.int64) for k, v in arrays.items() if k.startswith("label_")}
    path_lab = arrays.get("pathology")
    sl = MultiSeqSlice(images, labels, tuple(meta["spacing"]), meta["cri"], meta.get("provenance", {}),
                       None if path_lab is None else path_lab.astype(np.int64))
    return sl, meta


# ---------------------------------------------------------------------------
# phantoms

@dataclass
class PhantomSpec:
    seed: int = 0
    misalign_magnitude: float = 8.0
    scar_fraction: float = 0.12
    edema_fraction: float = 0.25
    noise_sigma: float = 0.03
    size: int = 64
    grid_m: int = 4
    background_only: bool = False

    def validate(self):
        for name in ("scar_fraction", "edema_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise PhantomSpecError(f"{name}={v} outside [0, 1] of the myocardium")
        if self.misalign_magnitude < 0 or self.noise_sigma < 0:
            raise PhantomSpecError("misalign_magnitude and noise_sigma must be non-negative")
        if self.size < 16:
            raise PhantomSpecError("phantom size must be at least 16 px")


# intensity of each tissue per sequence: (outside, body, MYO, LV blood, RV blood, SCAR, EDEMA, bright fat)
_TISSUE = {
    "bSSFP": dict(out=0.0, body=0.45, myo=0.22, lv=1.0, rv=0.95, scar=0.22, edema=0.22, fat=0.7),
    "LGE": dict(out=0.0, body=0.3, myo=0.08, lv=0.62, rv=0.55, scar=1.0, edema=0.08, fat=0.9),
    "T2": dict(out=0.0, body=0.35, myo=0.3, lv=0.12, rv=0.12, scar=0.85, edema=0.85, fat=0.55),
}


def _random_deltas(rng, m: int, magnitude: float) -> np.ndarray:
    if magnitude == 0:
        return np.zeros((m * m, 2))
    ang = rng.uniform(0, 2 * np.pi)
    shift = 0.75 * magnitude * np.sqrt(rng.uniform(0.3, 1.0)) * np.array([np.cos(ang), np.sin(ang)])
    d = shift + rng.uniform(-0.25, 0.25, size=(m * m, 2)) * magnitude
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    return np.where(norms > magnitude, d * magnitude / np.maximum(norms, 1e-12), d)


def _inverse_map(coeffs: tps.TpsCoefficients, size: int, iters: int = 30) -> np.ndarray:
    """Pixel positions ``p`` with ``T(p) = q`` for every pixel ``q`` (fixed-point iteration)."""
    q = tps.pixel_coords(size, size).numpy()
    p = q.copy()
    for _ in range(iters):
        tp = tps.evaluate_tps(coeffs, p).numpy()
        p = p - (tp - q)
    return ((p + 1) * size - 1) / 2  # normalized -> pixel units


class _Anatomy:
    def __init__(self, rng, spec: PhantomSpec):
        s = spec.size
        self.s = s
        self.center = np.array([(s - 1) / 2, (s - 1) / 2]) + rng.uniform(-0.06, 0.06, 2) * s
        self.r_endo = rng.uniform(0.11, 0.15) * s
        self.thick = rng.uniform(0.085, 0.105) * s
        self.wobble = rng.uniform(0.0, 0.15)
        self.phase = rng.uniform(0, 2 * np.pi)
        rv_ang = np.pi / 2 + rng.uniform(-0.5, 0.5)  # RV toward +y (image right)
        self.rv_center = self.center + (self.r_endo + self.thick + 0.06 * s) * np.array([np.cos(rv_ang), np.sin(rv_ang)])
        self.rv_radius = rng.uniform(0.16, 0.2) * s
        self.body = rng.uniform(0.4, 0.46, 2) * s
        self.fat = [(self.center + rng.uniform(-0.4, 0.4, 2) * s, rng.uniform(0.02, 0.04) * s) for _ in range(4)]
        self.path_angle = rng.uniform(0, 2 * np.pi)
        self.depth = 1.0 if spec.scar_fraction == 0 else rng.uniform(0.6, 1.0)
        self.scar_halfwidth = np.pi * min(spec.scar_fraction / self.depth, 1.0)
        if spec.scar_fraction / self.depth > 1.0:
            self.depth = 1.0
            self.scar_halfwidth = np.pi * spec.scar_fraction
        self.edema_halfwidth = np.pi * spec.edema_fraction
        self.empty = spec.background_only

    def labels_at(self, px, py):
        d = np.stack([px - self.center[0], py - self.center[1]])
        r = np.hypot(*d)
        theta = np.arctan2(d[1], d[0])
        r_epi = self.r_endo + self.thick * (1 + self.wobble * np.sin(theta + self.phase))
        out = np.full(px.shape, BG, dtype=np.int64)
        if self.empty:
            return out
        rv = np.hypot(px - self.rv_center[0], py - self.rv_center[1]) < self.rv_radius
        out[rv & (r > r_epi + 0.03 * self.s)] = RV
        out[r < self.r_endo] = LV
        myo = (r >= self.r_endo) & (r < r_epi)
        out[myo] = MYO
        dang = np.abs(np.angle(np.exp(1j * (theta - self.path_angle))))
        frac_depth = (r - self.r_endo) / np.maximum(r_epi - self.r_endo, 1e-9)
        edema = myo & (dang <= self.edema_halfwidth)
        scar = myo & (dang <= self.scar_halfwidth) & (frac_depth <= self.depth)
        out[edema] = EDEMA
        out[scar] = SCAR
        return out

    def tissue_at(self, px, py):
        """Integer code for rendering; adds body (6), outside (7) and fat (8)."""
        lab = self.labels_at(px, py)
        out = lab.copy()
        inside = ((px - self.center[0]) / self.body[0]) ** 2 + ((py - self.center[1]) / self.body[1]) ** 2 <= 1
        out[(lab == BG) & inside] = 6
        out[(lab == BG) & ~inside] = 7
        for c, rad in self.fat:
            f = (np.hypot(px - c[0], py - c[1]) < rad) & (lab == BG) & inside
            out[f] = 8
        return out


def _render(tissue, seq: str, rng, gain) -> np.ndarray:
    t = _TISSUE[seq]
    lut = np.array([t["body"], t["myo"], t["lv"], t["rv"], t["scar"], t["edema"], t["body"], t["out"], t["fat"]])
    img = lut[tissue] * gain
    return ndimage.gaussian_filter(img, 0.6)


def sample_seed(seed: int, index: int) -> int:
    """Independent per-sample seed derived from a run seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def phantom_dataset(count: int, seed: int, **spec) -> list:
    """``count`` phantoms as ``(slice, ground_truth)`` pairs with seeds from :func:`sample_seed`."""
    return [generate_phantom(PhantomSpec(seed=sample_seed(seed, i), **spec)) for i in range(count)]


def generate_phantom(spec: PhantomSpec) -> tuple:
    """Synthetic aligned-anatomy sample with known misalignment of the moving sequences.

    Returns ``(MultiSeqSlice, {"bSSFP": DisplacementSet, "T2": DisplacementSet})``. Warping a
    moving sequence with its displacement set brings it into the LGE frame.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    anat = _Anatomy(rng, spec)
    grid = tps.make_control_grid(spec.grid_m)
    ii, jj = np.meshgrid(np.arange(s, dtype=np.float64), np.arange(s, dtype=np.float64), indexing="ij")

    gt = {}
    positions = {CRI: (ii, jj)}
    for name in MOVING:
        deltas = _random_deltas(rng, spec.grid_m, spec.misalign_magnitude)
        gt[name] = tps.DisplacementSet(deltas, (s, s))
        if spec.misalign_magnitude == 0:
            positions[name] = (ii, jj)
        else:
            p = _inverse_map(tps.solve_tps(grid, gt[name]), s)
            positions[name] = (p[:, 0].reshape(s, s), p[:, 1].reshape(s, s))

    images, labels = {}, {}
    for name in SEQUENCES:
        px, py = positions[name]
        gain = rng.uniform(0.85, 1.15)
        img = _render(anat.tissue_at(px, py), name, rng, gain)
        img = img + rng.normal(0, spec.noise_sigma, img.shape)
        images[name] = zscore(img)
        lab = anat.labels_at(px, py)
        if name == "bSSFP":
            lab[np.isin(lab, (SCAR, EDEMA))] = MYO
        elif name == "LGE":
            lab[lab == EDEMA] = MYO
        else:
            lab[lab == SCAR] = EDEMA
        labels[name] = lab

    full = anat.labels_at(ii, jj)
    pathology = merge_pathology_labels(full == SCAR, np.isin(full, (SCAR, EDEMA)))
    sl = MultiSeqSlice(images, labels, (1.5, 1.5), CRI,
                       {"phantom": asdict(spec), "center": anat.center.tolist()}, pathology)
    return sl, gt
