"""Thin-plate-spline machinery for control-point driven 2D warping.

Conventions used throughout the package:

* ``x`` is the row axis (size ``H``), ``y`` is the column axis (size ``W``).
* Pixel ``i`` along an axis of length ``n`` has normalized coordinate
  ``(2 i + 1) / n - 1`` (pixel-center convention, image spans ``[-1, 1]``).
* Control points live in a centered canonical frame, ``canonical = extent * normalized``.
  With ``m=4`` and ``extent=256`` this gives the axis coordinates
  ``256 * (-0.98 + 0.65 n)``.
* A displacement set maps each control point ``g_k`` to ``g_k + delta_k``; warping an
  image samples it at ``T(p)`` for every output pixel ``p`` (backward mapping), so the
  warped image lives in the frame of the fixed control points.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch

GRID_START = -0.98
GRID_STOP = 0.97  # -0.98 + 3 * 0.65


class InvalidGridError(ValueError):
    pass


class DegenerateGridError(ValueError):
    pass


class WarpError(ValueError):
    pass


@dataclass(frozen=True)
class ControlGrid:
    m: int
    extent: float = 256.0
    points: np.ndarray = field(default=None, repr=False)  # (m*m, 2) canonical (x, y)

    def normalized(self) -> np.ndarray:
        return np.asarray(self.points, dtype=np.float64) / self.extent

    def __len__(self):
        return self.m * self.m


@dataclass
class DisplacementSet:
    """Per-control-point displacements ``(dx, dy)`` in pixels of ``frame = (H, W)``."""

    deltas: np.ndarray  # (m*m, 2)
    frame: tuple[int, int]

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, dtype=np.float64).reshape(-1, 2)
        self.frame = (int(self.frame[0]), int(self.frame[1]))
        if not np.all(np.isfinite(self.deltas)):
            raise ValueError("displacements must be finite")

    @property
    def m(self) -> int:
        m = int(round(np.sqrt(len(self.deltas))))
        if m * m != len(self.deltas):
            raise InvalidGridError(f"{len(self.deltas)} displacements do not form a square grid")
        return m

    def to_flat(self) -> list[float]:
        return [float(v) for v in self.deltas.ravel()] + list(self.frame)

    @classmethod
    def from_flat(cls, flat) -> "DisplacementSet":
        flat = list(flat)
        return cls(np.asarray(flat[:-2], dtype=np.float64).reshape(-1, 2), (int(flat[-2]), int(flat[-1])))

    @classmethod
    def zeros(cls, m: int, frame) -> "DisplacementSet":
        return cls(np.zeros((m * m, 2)), frame)


@dataclass
class TpsCoefficients:
    """Closed-form TPS in normalized coordinates.

    ``affine`` is the 2x3 block ``[A | t]`` of the position mapping, ``rbf_weights`` the
    ``(K, 2)`` radial-basis weights and ``sources`` the ``(K, 2)`` normalized control
    points. ``frame`` is the pixel size the coefficients were solved for.
    """

    affine: torch.Tensor
    rbf_weights: torch.Tensor
    sources: torch.Tensor
    frame: tuple[int, int]

    def displacement_affine(self) -> torch.Tensor:
        eye = torch.zeros_like(self.affine)
        eye[0, 0] = 1.0
        eye[1, 1] = 1.0
        return self.affine - eye


def make_control_grid(m: int, canonical_extent: float = 256.0) -> ControlGrid:
    if m < 2:
        raise InvalidGridError(f"grid needs at least 2 points per axis, got m={m}")
    if canonical_extent <= 0:
        raise InvalidGridError("canonical_extent must be positive")
    step = (GRID_STOP - GRID_START) / (m - 1)
    axis = canonical_extent * (GRID_START + step * np.arange(m))
    xs, ys = np.meshgrid(axis, axis, indexing="ij")
    points = np.stack([xs.ravel(), ys.ravel()], axis=1)
    return ControlGrid(m=m, extent=float(canonical_extent), points=points)


def tps_kernel(r2):
    """U(r) = r^2 log r^2 evaluated from squared distances, with U(0) = 0."""
    if isinstance(r2, torch.Tensor):
        return torch.where(r2 > 0, r2 * torch.log(torch.clamp(r2, min=1e-300)), torch.zeros_like(r2))
    r2 = np.asarray(r2, dtype=np.float64)
    out = np.zeros_like(r2)
    pos = r2 > 0
    out[pos] = r2[pos] * np.log(r2[pos])
    return out


@lru_cache(maxsize=32)
def _system_inverse(points_key: bytes, k: int) -> np.ndarray:
    pts = np.frombuffer(points_key, dtype=np.float64).reshape(k, 2)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    system = np.zeros((k + 3, k + 3))
    system[:k, :k] = tps_kernel(d2)
    system[:k, k:] = np.c_[pts, np.ones(k)]
    system[k:, :k] = system[:k, k:].T
    if np.linalg.matrix_rank(system) < k + 3:
        raise DegenerateGridError("TPS kernel system is singular (duplicate or collinear control points)")
    return np.linalg.inv(system)


def system_inverse(normalized_points: np.ndarray) -> np.ndarray:
    pts = np.ascontiguousarray(normalized_points, dtype=np.float64)
    return _system_inverse(pts.tobytes(), len(pts))


def normalize_deltas(deltas, frame):
    """Pixel displacements -> normalized displacements. Works on ``(..., K, 2)``."""
    H, W = frame
    scale = (2.0 / H, 2.0 / W)
    if isinstance(deltas, torch.Tensor):
        return deltas * deltas.new_tensor(scale)
    return np.asarray(deltas) * np.asarray(scale)


def solve_tps(grid: ControlGrid, displacements: DisplacementSet, dtype=torch.float64) -> TpsCoefficients:
    if len(displacements.deltas) != len(grid):
        raise InvalidGridError(
            f"{len(displacements.deltas)} displacements for a grid of {len(grid)} points"
        )
    src = grid.normalized()
    inv = torch.as_tensor(system_inverse(src), dtype=dtype)
    d = torch.as_tensor(normalize_deltas(displacements.deltas, displacements.frame), dtype=dtype)
    coeffs = solve_tps_batched(inv, d.unsqueeze(0))[0]
    k = len(src)
    affine = coeffs[k:].T.clone()  # rows: output x, y; columns: x, y, 1
    affine[0, 0] += 1.0
    affine[1, 1] += 1.0
    return TpsCoefficients(
        affine=affine,
        rbf_weights=coeffs[:k],
        sources=torch.as_tensor(src, dtype=dtype),
        frame=displacements.frame,
    )


def solve_tps_batched(inv: torch.Tensor, ndeltas: torch.Tensor) -> torch.Tensor:
    """Coefficients of the displacement interpolant, ``(B, K+3, 2)``.

    Rows ``[:K]`` are RBF weights, rows ``K:`` the affine part ordered ``(x, y, 1)``.
    """
    k = ndeltas.shape[-2]
    return torch.einsum("ij,bjc->bic", inv[:, :k], ndeltas)


def pixel_coords(h: int, w: int, dtype=torch.float64) -> torch.Tensor:
    """Normalized coordinates of all pixel centers, ``(h*w, 2)`` row-major."""
    xs = (2 * torch.arange(h, dtype=dtype) + 1) / h - 1
    ys = (2 * torch.arange(w, dtype=dtype) + 1) / w - 1
    gx, gy = torch.meshgrid(xs, ys, indexing="ij")
    return torch.stack([gx.ravel(), gy.ravel()], dim=1)


@lru_cache(maxsize=64)
def _field_operator(points_key: bytes, k: int, h: int, w: int) -> np.ndarray:
    """Linear map from normalized control-point displacements to per-pixel ones, ``(h*w, K)``."""
    pts = np.frombuffer(points_key, dtype=np.float64).reshape(k, 2)
    inv = system_inverse(pts)
    pix = pixel_coords(h, w).numpy()
    d2 = ((pix[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    basis = np.concatenate([tps_kernel(d2), pix, np.ones((len(pix), 1))], axis=1)
    return basis @ inv[:, :k]


def field_operator(normalized_points: np.ndarray, h: int, w: int, dtype=torch.float32, device=None):
    pts = np.ascontiguousarray(normalized_points, dtype=np.float64)
    op = _field_operator(pts.tobytes(), len(pts), int(h), int(w))
    return torch.as_tensor(op, dtype=dtype, device=device)


def displacement_field(ndeltas: torch.Tensor, normalized_points: np.ndarray, h: int, w: int) -> torch.Tensor:
    """Per-pixel displacement in *pixels* of an ``h x w`` map, ``(B, h, w, 2)``.

    ``ndeltas`` are normalized control-point displacements ``(B, K, 2)``.
    """
    op = field_operator(normalized_points, h, w, dtype=ndeltas.dtype, device=ndeltas.device)
    nfield = torch.einsum("pk,bkc->bpc", op, ndeltas)
    scale = ndeltas.new_tensor((h / 2.0, w / 2.0))
    return (nfield * scale).reshape(-1, h, w, 2)


def sample(image: torch.Tensor, disp: torch.Tensor, mode: str = "bilinear") -> torch.Tensor:
    """Sample ``image (B, C, h, w)`` at ``pixel + disp`` with zero fill outside.

    ``disp`` is a per-pixel displacement in pixels, ``(B, h, w, 2)``. With an exactly
    zero displacement both modes return the input bit-for-bit.
    """
    B, C, h, w = image.shape
    if disp.shape != (B, h, w, 2):
        raise WarpError(f"displacement field {tuple(disp.shape)} does not match image {tuple(image.shape)}")
    rows = torch.arange(h, dtype=disp.dtype, device=disp.device).view(1, h, 1)
    cols = torch.arange(w, dtype=disp.dtype, device=disp.device).view(1, 1, w)
    sx = rows + disp[..., 0]
    sy = cols + disp[..., 1]
    flat = image.reshape(B, C, h * w)

    def gather(ix, iy):
        valid = (ix >= 0) & (ix < h) & (iy >= 0) & (iy < w)
        idx = (ix.clamp(0, h - 1) * w + iy.clamp(0, w - 1)).reshape(B, 1, h * w).expand(B, C, h * w)
        vals = torch.gather(flat, 2, idx).reshape(B, C, h, w)
        return torch.where(valid.unsqueeze(1), vals, torch.zeros((), dtype=vals.dtype, device=vals.device))

    if mode == "nearest":
        ix = torch.floor(sx + 0.5).long()
        iy = torch.floor(sy + 0.5).long()
        return gather(ix, iy)
    if mode != "bilinear":
        raise WarpError(f"unknown interpolation mode {mode!r}")
    x0f = torch.floor(sx)
    y0f = torch.floor(sy)
    fx = (sx - x0f).to(image.dtype).unsqueeze(1)
    fy = (sy - y0f).to(image.dtype).unsqueeze(1)
    x0 = x0f.long()
    y0 = y0f.long()
    out = gather(x0, y0) * ((1 - fx) * (1 - fy))
    out = out + gather(x0 + 1, y0) * (fx * (1 - fy))
    out = out + gather(x0, y0 + 1) * ((1 - fx) * fy)
    out = out + gather(x0 + 1, y0 + 1) * (fx * fy)
    return out


def warp_batch(images: torch.Tensor, deltas: torch.Tensor, frame, grid: ControlGrid, mode="bilinear"):
    """Warp ``(B, C, h, w)`` maps by pixel displacements ``(B, K, 2)`` expressed in ``frame``.

    ``frame`` must equal ``(h, w)``; use :func:`rescale_displacements` first for feature maps.
    """
    h, w = images.shape[-2:]
    if tuple(frame) != (h, w):
        raise WarpError(f"displacements expressed in frame {tuple(frame)} but map is {(h, w)}")
    nd = normalize_deltas(deltas, frame)
    disp = displacement_field(nd, grid.normalized(), h, w)
    return sample(images, disp.to(images.dtype), mode)


def _coeff_field(coeffs: TpsCoefficients, h: int, w: int) -> torch.Tensor:
    pix = pixel_coords(h, w, dtype=coeffs.affine.dtype)
    d2 = ((pix[:, None, :] - coeffs.sources[None, :, :]) ** 2).sum(-1)
    da = coeffs.displacement_affine()
    nfield = pix @ da[:, :2].T + da[:, 2] + tps_kernel(d2) @ coeffs.rbf_weights
    return (nfield * nfield.new_tensor((h / 2.0, w / 2.0))).reshape(1, h, w, 2)


def evaluate_tps(coeffs: TpsCoefficients, normalized_xy) -> torch.Tensor:
    """Position mapping ``T(p)`` at normalized points ``(N, 2)``."""
    p = torch.as_tensor(np.asarray(normalized_xy), dtype=coeffs.affine.dtype)
    d2 = ((p[:, None, :] - coeffs.sources[None, :, :]) ** 2).sum(-1)
    return p @ coeffs.affine[:, :2].T + coeffs.affine[:, 2] + tps_kernel(d2) @ coeffs.rbf_weights


def warp_image(image, coeffs: TpsCoefficients, interpolation: str = "bilinear"):
    """Warp a 2D scalar field. Accepts numpy or torch; returns the same kind."""
    is_np = not isinstance(image, torch.Tensor)
    img = torch.as_tensor(np.asarray(image, dtype=np.float64)) if is_np else image
    if img.dim() != 2:
        raise WarpError("warp_image expects a 2D array")
    if not (torch.isfinite(coeffs.affine).all() and torch.isfinite(coeffs.rbf_weights).all()):
        raise WarpError("non-finite TPS coefficients")
    h, w = img.shape
    if tuple(coeffs.frame) != (h, w):
        raise WarpError(f"coefficients solved for frame {coeffs.frame}, image is {(h, w)}")
    disp = _coeff_field(coeffs, h, w).to(img.dtype)
    out = sample(img[None, None], disp, interpolation)[0, 0]
    return out.numpy() if is_np else out


def one_hot(mask, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask).long()
    return torch.nn.functional.one_hot(m, num_classes).movedim(-1, -3).to(dtype)


def warp_label(mask, coeffs: TpsCoefficients, soft: bool = False, num_classes: int = 6):
    """Warp an integer label map.

    Hard path: nearest neighbour, class codes preserved, background fill.
    Soft path: one-hot channels warped bilinearly, returned as ``(C, H, W)``
    probabilities (renormalized where any mass lands; background elsewhere).
    """
    arr = np.asarray(mask)
    if not soft:
        out = warp_image(arr.astype(np.float64), coeffs, "nearest")
        return np.rint(out).astype(arr.dtype)
    oh = one_hot(arr, num_classes, dtype=coeffs.affine.dtype)
    h, w = arr.shape
    disp = _coeff_field(coeffs, h, w)
    warped = sample(oh[None], disp, "bilinear")[0]
    total = warped.sum(0, keepdim=True)
    bg = torch.zeros_like(warped)
    bg[0] = 1.0
    return torch.where(total > 0, warped / total.clamp(min=1e-12), bg)


def rescale_displacements(d: DisplacementSet, H: int, W: int, h: int, w: int) -> DisplacementSet:
    """Express displacements solved at ``H x W`` in pixels of an ``h x w`` map."""
    if min(H, W, h, w) <= 0:
        raise ValueError("all dimensions must be positive")
    ratio = np.array([h / H, w / W])
    return DisplacementSet(d.deltas * ratio, (h, w))


def rescale_deltas_tensor(deltas: torch.Tensor, H: int, W: int, h: int, w: int) -> torch.Tensor:
    """Tensor form of :func:`rescale_displacements` for batched ``(B, K, 2)`` deltas."""
    if min(H, W, h, w) <= 0:
        raise ValueError("all dimensions must be positive")
    return deltas * deltas.new_tensor((h / H, w / W))
