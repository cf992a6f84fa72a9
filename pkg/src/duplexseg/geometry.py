"""Disparity -> depth -> surface normals preprocessing.

All grids are numpy arrays, row-major, pixel centers at integer coordinates.
Camera convention: x right, y down, z forward (into the scene); a pixel (u, v)
at depth Z back-projects to ((u - cx) / fx * Z, (v - cy) / fy * Z, Z).
Valid normals are unit length and oriented toward the camera (z <= 0).
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ConfigurationError, InputError

DISPARITY_EPS = 1e-6  # disparities at or below this are treated as invalid
DEPTH_MM_SCALE = 1000.0  # on-disk depth PNGs store millimeters
DISPARITY_PNG_SCALE = 256.0  # on-disk disparity PNGs store pixels * 256


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    baseline: Optional[float] = None  # meters, needed only for disparity input

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.baseline is not None and self.baseline <= 0:
            raise InputError(f"baseline must be positive, got {self.baseline}")


@dataclass
class DepthMap:
    """Metric depth in meters with a per-pixel validity mask."""

    values: np.ndarray  # (H, W) float
    validity: np.ndarray  # (H, W) bool

    def __post_init__(self):
        if self.values.shape != self.validity.shape or self.values.ndim != 2:
            raise InputError(
                f"depth values {self.values.shape} and validity {self.validity.shape} must be equal 2-D shapes"
            )


@dataclass
class NormalMap:
    """Unit surface normals (z <= 0 toward the camera) with a validity mask."""

    values: np.ndarray  # (H, W, 3) float
    validity: np.ndarray  # (H, W) bool

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[2] != 3 or self.values.shape[:2] != self.validity.shape:
            raise InputError(
                f"normal values {self.values.shape} must be (H, W, 3) matching validity {self.validity.shape}"
            )


def disparity_to_depth(disparity: np.ndarray, intr: CameraIntrinsics) -> DepthMap:
    """depth = fx * baseline / disparity; disparities <= DISPARITY_EPS become invalid."""
    if intr.baseline is None:
        raise ConfigurationError("disparity_to_depth needs intrinsics with a stereo baseline")
    disparity = np.asarray(disparity, dtype=np.float64)
    if disparity.ndim != 2:
        raise InputError(f"disparity must be a 2-D grid, got shape {disparity.shape}")
    if np.any(disparity < 0):
        raise InputError("disparity entries must be >= 0")
    valid = disparity > DISPARITY_EPS
    depth = np.zeros_like(disparity)
    depth[valid] = intr.fx * intr.baseline / disparity[valid]
    return DepthMap(values=depth, validity=valid)


def backproject(depth: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Per-pixel camera coordinates (H, W, 3) for the given depth grid."""
    h, w = depth.shape
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    x = (uu - intr.cx) / intr.fx * depth
    y = (vv - intr.cy) / intr.fy * depth
    return np.stack([x, y, depth], axis=-1)


def depth_to_normals(depth: DepthMap, intr: CameraIntrinsics) -> NormalMap:
    """Fit a least-squares plane to each back-projected 3x3 neighborhood.

    The fitted unit normal (smallest-eigenvalue eigenvector of the local point
    covariance) is flipped to camera-facing orientation (z <= 0). A pixel is
    valid only when its full 3x3 neighborhood has valid depth; border pixels
    are always invalid.
    """
    h, w = depth.values.shape
    if h < 3 or w < 3:
        raise InputError(f"need at least a 3x3 depth map, got {h}x{w}")
    points = backproject(depth.values.astype(np.float64), intr)

    # (H-2, W-2, 3, 3, 3): window position, xyz, window rows, window cols
    win = np.lib.stride_tricks.sliding_window_view(points, (3, 3), axis=(0, 1))
    win = win.reshape(h - 2, w - 2, 3, 9)
    valid_win = np.lib.stride_tricks.sliding_window_view(depth.validity, (3, 3), axis=(0, 1))
    interior_valid = valid_win.reshape(h - 2, w - 2, 9).all(axis=-1)

    if not interior_valid.any():
        raise InputError("no pixel has a fully valid 3x3 neighborhood")

    idx = np.nonzero(interior_valid)
    pts = win[idx]  # (M, 3, 9)
    centered = pts - pts.mean(axis=-1, keepdims=True)
    cov = centered @ centered.transpose(0, 2, 1)  # (M, 3, 3)
    _, eigvecs = np.linalg.eigh(cov)
    normals_flat = eigvecs[:, :, 0]  # unit eigenvector of the smallest eigenvalue
    flip = normals_flat[:, 2] > 0
    normals_flat[flip] *= -1.0

    values = np.zeros((h, w, 3), dtype=np.float64)
    validity = np.zeros((h, w), dtype=bool)
    values[idx[0] + 1, idx[1] + 1] = normals_flat
    validity[idx[0] + 1, idx[1] + 1] = True
    return NormalMap(values=values, validity=validity)


def normals_to_image(normals: NormalMap) -> np.ndarray:
    """Map components to [0, 1] via n -> (n + 1) / 2; invalid pixels become 0.5 gray."""
    img = (normals.values + 1.0) / 2.0
    img[~normals.validity] = 0.5
    return img


# ---------------------------------------------------------------------------
# On-disk formats: 16-bit millimeter depth PNGs, 16-bit disparity*256 PNGs,
# and a key-value intrinsics text file.
# ---------------------------------------------------------------------------


def write_depth_png(path, depth: DepthMap) -> None:
    mm = np.zeros(depth.values.shape, dtype=np.uint16)
    vals = np.round(depth.values * DEPTH_MM_SCALE)
    vals = np.clip(vals, 0, np.iinfo(np.uint16).max)
    mm[depth.validity] = vals[depth.validity].astype(np.uint16)
    # a valid depth must not collide with the 0 = invalid sentinel
    mm[depth.validity & (mm == 0)] = 1
    Image.fromarray(mm).save(path)


def read_depth_png(path) -> DepthMap:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"depth file not found: {path}")
    raw = np.array(Image.open(path))
    if raw.ndim != 2:
        raise InputError(f"depth PNG must be single-channel, got shape {raw.shape} in {path}")
    valid = raw > 0
    return DepthMap(values=raw.astype(np.float64) / DEPTH_MM_SCALE, validity=valid)


def read_disparity_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"disparity file not found: {path}")
    raw = np.array(Image.open(path))
    if raw.ndim != 2:
        raise InputError(f"disparity PNG must be single-channel, got shape {raw.shape} in {path}")
    return raw.astype(np.float64) / DISPARITY_PNG_SCALE


def write_intrinsics(path, intr: CameraIntrinsics) -> None:
    lines = [f"fx {intr.fx!r}", f"fy {intr.fy!r}", f"cx {intr.cx!r}", f"cy {intr.cy!r}"]
    if intr.baseline is not None:
        lines.append(f"baseline {intr.baseline!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_intrinsics(path) -> CameraIntrinsics:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"intrinsics file not found: {path}")
    fields = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise InputError(f"{path}:{lineno}: expected '<key> <value>', got {line!r}")
        fields[parts[0]] = float(parts[1])
    missing = {"fx", "fy", "cx", "cy"} - fields.keys()
    if missing:
        raise InputError(f"{path}: missing intrinsics keys {sorted(missing)}")
    return CameraIntrinsics(
        fx=fields["fx"],
        fy=fields["fy"],
        cx=fields["cx"],
        cy=fields["cy"],
        baseline=fields.get("baseline"),
    )
