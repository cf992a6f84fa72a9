"""Procedural desk-scale road scenes and the on-disk dataset format.

Each scene is a tilted camera over a ground plane: Perlin roughness perturbs
the plane height, elliptical depressions with noise-perturbed rims carve
defects (label 2), extruded boxes stand on the plane as obstacles (label 0,
occluding), the remaining plane is freespace (label 1), and rays that miss the
plane are sky (label 0 at far depth). Normals always come from the final depth
map through the geometry module, and RGB is per-class albedo times Lambert
shading plus texture noise, so the defect cue is strong in the normal channel
and deliberately weak and noisy in RGB.

Layout: <root>/<split>/<id>_{rgb,depth,label}.png plus a `manifest` text file
and an `intrinsics` file at the root.
"""

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigurationError, InputError
from .geometry import (
    CameraIntrinsics,
    DepthMap,
    NormalMap,
    depth_to_normals,
    read_depth_png,
    read_intrinsics,
    write_depth_png,
    write_intrinsics,
)

SPLIT_NAMES = ("train", "val", "test")
CLASS_TABLE = (
    (0, "background", (0, 0, 0)),
    (1, "freespace", (128, 64, 128)),
    (2, "defect", (0, 255, 0)),
)
NUM_CLASSES = len(CLASS_TABLE)
CLASS_NAMES = [name for _, name, _ in CLASS_TABLE]
PALETTE = [rgb for _, _, rgb in CLASS_TABLE]
MANIFEST_NAME = "manifest"
INTRINSICS_NAME = "intrinsics"

_HALF_SQRT2 = math.sqrt(2.0) / 2.0  # max magnitude of unit-gradient lattice noise


# ---------------------------------------------------------------------------
# Perlin gradient noise
# ---------------------------------------------------------------------------


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _permutation(seed: int) -> np.ndarray:
    return np.random.Generator(np.random.PCG64(seed)).permutation(256)


def gradient_noise(xs: np.ndarray, ys: np.ndarray, seed: int) -> np.ndarray:
    """Classic 2-D gradient-lattice noise, zero at integer lattice points.

    Gradients are unit vectors hashed from a seeded permutation table, so the
    value range is [-sqrt(2)/2, sqrt(2)/2].
    """
    perm = _permutation(seed)
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    xi = np.floor(xs).astype(np.int64)
    yi = np.floor(ys).astype(np.int64)
    xf = xs - xi
    yf = ys - yi
    u = _fade(xf)
    v = _fade(yf)

    def corner_dot(dx, dy):
        h = perm[(perm[(xi + dx) & 255] + (yi + dy)) & 255]
        angle = h * (2.0 * math.pi / 256.0)
        return np.cos(angle) * (xf - dx) + np.sin(angle) * (yf - dy)

    n00 = corner_dot(0, 0)
    n10 = corner_dot(1, 0)
    n01 = corner_dot(0, 1)
    n11 = corner_dot(1, 1)
    nx0 = n00 + u * (n10 - n00)
    nx1 = n01 + u * (n11 - n01)
    return nx0 + v * (nx1 - nx0)


def octave_noise(xs: np.ndarray, ys: np.ndarray, octaves: int, seed: int) -> np.ndarray:
    """Octave-summed gradient noise with amplitude halving, rescaled to [-1, 1]."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if octaves <= 0:
        return np.zeros(np.broadcast(xs, ys).shape, dtype=np.float64)
    total = np.zeros(np.broadcast(xs, ys).shape, dtype=np.float64)
    amp = 1.0
    amp_sum = 0.0
    for o in range(octaves):
        total = total + amp * gradient_noise(xs * 2.0**o, ys * 2.0**o, seed)
        amp_sum += amp
        amp /= 2.0
    return total / (amp_sum * _HALF_SQRT2)


def perlin2d(dims: Tuple[int, int], octaves: int, seed: int, cells: float = 4.0) -> np.ndarray:
    """Sample octave noise on an HxW pixel grid, values in [-1, 1]."""
    h, w = dims
    if h < 2 or w < 2:
        raise InputError(f"noise grid must be at least 2x2, got {h}x{w}")
    freq = cells / max(h, w)
    ys, xs = np.meshgrid((np.arange(h) + 0.5) * freq, (np.arange(w) + 0.5) * freq, indexing="ij")
    return octave_noise(xs, ys, octaves, seed)


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


def default_intrinsics(height: int, width: int) -> CameraIntrinsics:
    f = 0.9 * width
    return CameraIntrinsics(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, baseline=0.5)


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 96
    intrinsics: Optional[CameraIntrinsics] = None
    seed: int = 0
    defect_count: Tuple[int, int] = (1, 3)
    defect_depth: Tuple[float, float] = (0.08, 0.25)  # meters below the plane
    defect_radius: Tuple[float, float] = (0.3, 0.8)  # meters
    obstacle_count: Tuple[int, int] = (0, 2)
    obstacle_size: Tuple[float, float] = (0.4, 1.4)  # meters
    roughness_octaves: int = 3
    roughness_amplitude: float = 0.015  # meters
    light_direction: Optional[Tuple[float, float, float]] = None  # None: sampled per scene
    camera_height: float = 1.5
    camera_pitch: float = 0.24  # radians down from horizontal
    far: float = 40.0
    min_defect_pixels: int = 12
    retry_budget: int = 20

    def __post_init__(self):
        if self.height % 32 or self.width % 32:
            raise ConfigurationError(f"scene dims must be divisible by 32, got {self.height}x{self.width}")
        for name in ("defect_count", "defect_depth", "defect_radius", "obstacle_count", "obstacle_size"):
            lo, hi = getattr(self, name)
            if hi < lo or lo < 0:
                raise ConfigurationError(f"{name} range ({lo}, {hi}) is degenerate")
        if self.roughness_amplitude < 0 or self.roughness_octaves < 0:
            raise ConfigurationError("roughness parameters must be non-negative")
        if self.intrinsics is None:
            self.intrinsics = default_intrinsics(self.height, self.width)


@dataclass
class Sample:
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: DepthMap
    normals: NormalMap
    label: np.ndarray  # (H, W) uint8 class ids


def _camera_rotation(pitch: float) -> np.ndarray:
    """World->camera rotation rows for a camera pitched down over a Z-up world."""
    x_c = np.array([1.0, 0.0, 0.0])
    y_c = np.array([0.0, -math.sin(pitch), -math.cos(pitch)])
    z_c = np.array([0.0, math.cos(pitch), -math.sin(pitch)])
    return np.stack([x_c, y_c, z_c], axis=0)


@dataclass
class _Defect:
    center: np.ndarray  # (2,) plane coordinates
    radii: np.ndarray  # (2,)
    angle: float
    depth: float
    rim_seed: int

    def depression(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        rx = (px - self.center[0]) * ca + (py - self.center[1]) * sa
        ry = -(px - self.center[0]) * sa + (py - self.center[1]) * ca
        r = np.sqrt((rx / self.radii[0]) ** 2 + (ry / self.radii[1]) ** 2)
        rim = 1.0 + 0.3 * gradient_noise(rx / self.radii[0] + 3.17, ry / self.radii[1] + 7.31, self.rim_seed)
        r = r / np.maximum(rim, 0.5)
        bowl = np.where(r < 1.0, 0.5 * (1.0 + np.cos(math.pi * np.minimum(r, 1.0))), 0.0)
        return self.depth * bowl


def _ray_box_entry(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slab-method entry parameter per pixel ray; inf where the box is missed."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t1 = (lo[None, None, :] - origin[None, None, :]) * inv
    t2 = (hi[None, None, :] - origin[None, None, :]) * inv
    t_enter = np.minimum(t1, t2)
    t_exit = np.maximum(t1, t2)
    # rays parallel to an axis are inside the slab iff the origin is between the planes
    parallel = np.abs(dirs) < 1e-12
    inside = (origin[None, None, :] >= lo[None, None, :]) & (origin[None, None, :] <= hi[None, None, :])
    t_enter = np.where(parallel, np.where(inside, -np.inf, np.inf), t_enter)
    t_exit = np.where(parallel, np.where(inside, np.inf, -np.inf), t_exit)
    t_near = t_enter.max(axis=-1)
    t_far = t_exit.min(axis=-1)
    hit = (t_near <= t_far) & (t_far > 0)
    return np.where(hit, t_near, np.inf)


def _render_rgb(spec, rng, rot, label, sky_mask, normals: NormalMap, uu, vv) -> np.ndarray:
    h, w = label.shape
    road = rng.uniform(0.35, 0.55) * np.ones(3) + rng.uniform(-0.04, 0.04, size=3)
    defect_albedo = road * rng.uniform(0.82, 0.98)
    box_albedo = rng.uniform(0.2, 0.9, size=3)
    sky_color = np.clip(np.array([0.55, 0.65, 0.82]) + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)

    albedo = np.empty((h, w, 3), dtype=np.float64)
    albedo[label == 0] = box_albedo
    albedo[label == 1] = road
    albedo[label == 2] = defect_albedo

    if spec.light_direction is None:
        az = rng.uniform(0, 2 * math.pi)
        el = rng.uniform(0.6, 1.3)
        light_w = np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    else:
        light_w = np.asarray(spec.light_direction, dtype=np.float64)
        light_w = light_w / np.linalg.norm(light_w)
    light_c = rot @ light_w

    shade = np.full((h, w), 0.8)
    nv = normals.validity
    dot = np.einsum("hwc,c->hw", normals.values, light_c)
    shade[nv] = 0.3 + 0.7 * np.clip(-dot[nv], 0.0, 1.0)

    tex_seed = int(rng.integers(0, 2**31))
    texture = 1.0 + 0.18 * octave_noise(uu / 9.0, vv / 9.0, 2, tex_seed)
    img = albedo * (shade * texture)[..., None]
    img[sky_mask] = sky_color
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_scene(spec: SceneSpec) -> Sample:
    """Render one deterministic scene from the spec and its seed."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    h, w = spec.height, spec.width
    intr = spec.intrinsics
    rot = _camera_rotation(spec.camera_pitch)
    cam_pos = np.array([0.0, 0.0, spec.camera_height])

    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    d_cam = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1)
    d_world = d_cam @ rot  # row-vector form of R^T d_cam; depth along the ray equals t

    dz = d_world[..., 2]
    hits_plane = dz < -1e-9
    safe_dz = np.where(hits_plane, dz, -1.0)
    t_bare = np.where(hits_plane, -spec.camera_height / safe_dz, np.inf)
    on_plane = hits_plane & (t_bare <= spec.far)

    foot = cam_pos[None, None, :] + t_bare[..., None] * d_world  # bare-plane foot points
    px = np.where(on_plane, foot[..., 0], 0.0)
    py = np.where(on_plane, foot[..., 1], 0.0)

    # surface height field, evaluated at the bare-plane foot points
    rough_seed = int(rng.integers(0, 2**31))
    eta = spec.roughness_amplitude * octave_noise(px / 0.8, py / 0.8, spec.roughness_octaves, rough_seed)

    label_thresh = max(0.01, spec.roughness_amplitude + 0.005)
    defect_mask = np.zeros((h, w), dtype=bool)
    n_defects = int(rng.integers(spec.defect_count[0], spec.defect_count[1] + 1))
    candidates = np.flatnonzero(on_plane & (t_bare < 0.45 * spec.far))
    for _ in range(n_defects):
        if candidates.size == 0:
            break
        for _attempt in range(spec.retry_budget):
            pick = int(rng.choice(candidates))
            center = np.array([px.flat[pick], py.flat[pick]])
            radii = rng.uniform(spec.defect_radius[0], spec.defect_radius[1], size=2)
            defect = _Defect(
                center=center,
                radii=radii,
                angle=float(rng.uniform(0, math.pi)),
                depth=float(rng.uniform(spec.defect_depth[0], spec.defect_depth[1])),
                rim_seed=int(rng.integers(0, 2**31)),
            )
            dep = np.where(on_plane, defect.depression(px, py), 0.0)
            visible = (dep > label_thresh) & on_plane
            if int(visible.sum()) >= spec.min_defect_pixels:
                eta = eta - dep
                defect_mask |= visible
                break

    t_surface = (eta - spec.camera_height) / safe_dz
    t_map = np.where(on_plane, t_surface, spec.far)
    label = np.where(on_plane, 1, 0).astype(np.uint8)
    label[defect_mask] = 2
    sky_mask = ~on_plane

    n_boxes = int(rng.integers(spec.obstacle_count[0], spec.obstacle_count[1] + 1))
    box_candidates = np.flatnonzero(on_plane & (t_bare < 0.6 * spec.far) & (t_bare > 4.0))
    for _ in range(n_boxes):
        if box_candidates.size == 0:
            break
        pick = int(rng.choice(box_candidates))
        cx_b, cy_b = px.flat[pick], py.flat[pick]
        sx, sy, sz = rng.uniform(spec.obstacle_size[0], spec.obstacle_size[1], size=3)
        lo = np.array([cx_b - sx / 2.0, cy_b - sy / 2.0, 0.0])
        hi = np.array([cx_b + sx / 2.0, cy_b + sy / 2.0, sz])
        t_hit = _ray_box_entry(cam_pos, d_world, lo, hi)
        closer = np.isfinite(t_hit) & (t_hit < t_map) & (t_hit > 0)
        t_map = np.where(closer, t_hit, t_map)
        label[closer] = 0
        sky_mask &= ~closer

    depth = DepthMap(values=t_map.astype(np.float64), validity=np.ones((h, w), dtype=bool))
    normals = depth_to_normals(depth, intr)
    rgb = _render_rgb(spec, rng, rot, label, sky_mask, normals, uu, vv)
    return Sample(rgb=rgb, depth=depth, normals=normals, label=label)


# ---------------------------------------------------------------------------
# Manifest, splits, and per-sample files
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    root: Path
    splits: Dict[str, List[str]]  # split name -> ordered sample ids
    class_names: List[str]
    palette: List[Tuple[int, int, int]]
    intrinsics: Optional[CameraIntrinsics] = None

    def split_of(self, sample_id: str) -> str:
        for split, ids in self.splits.items():
            if sample_id in ids:
                return split
        raise InputError(f"unknown sample id {sample_id!r}")

    def sample_paths(self, sample_id: str) -> Dict[str, Path]:
        split = self.split_of(sample_id)
        base = Path(self.root) / split
        return {kind: base / f"{sample_id}_{kind}.png" for kind in ("rgb", "depth", "label")}

    def validate(self) -> None:
        seen = {}
        for split, ids in self.splits.items():
            for sid in ids:
                if sid in seen:
                    raise ConfigurationError(
                        f"sample {sid!r} appears in splits {seen[sid]!r} and {split!r}"
                    )
                seen[sid] = split


def make_splits(n_samples: int, ratios: Sequence[float], seed: int, root=".") -> DatasetManifest:
    """Deterministic shuffled partition into train/val/test."""
    if len(ratios) != len(SPLIT_NAMES):
        raise ConfigurationError(f"need {len(SPLIT_NAMES)} ratios, got {len(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must sum to 1, got {sum(ratios)}")
    ids = [f"{i:06d}" for i in range(n_samples)]
    order = np.random.Generator(np.random.PCG64(seed)).permutation(n_samples)
    shuffled = [ids[i] for i in order]
    bounds = [int(round(n_samples * sum(ratios[: k + 1]))) for k in range(len(ratios))]
    splits = {}
    start = 0
    for name, stop in zip(SPLIT_NAMES, bounds):
        splits[name] = shuffled[start:stop]
        start = stop
    return DatasetManifest(
        root=Path(root), splits=splits, class_names=list(CLASS_NAMES), palette=list(PALETTE)
    )


def write_manifest(manifest: DatasetManifest) -> None:
    lines = []
    for cid, name, (r, g, b) in CLASS_TABLE:
        lines.append(f"class {cid} {name} {r} {g} {b}")
    for split in SPLIT_NAMES:
        for sid in manifest.splits.get(split, []):
            lines.append(f"sample {split} {sid}")
    (Path(manifest.root) / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    class_names: Dict[int, str] = {}
    palette: Dict[int, Tuple[int, int, int]] = {}
    splits: Dict[str, List[str]] = {name: [] for name in SPLIT_NAMES}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "class" and len(parts) == 6:
            cid = int(parts[1])
            class_names[cid] = parts[2]
            palette[cid] = (int(parts[3]), int(parts[4]), int(parts[5]))
        elif parts[0] == "sample" and len(parts) == 3:
            split, sid = parts[1], parts[2]
            if split not in splits:
                raise InputError(f"{path}:{lineno}: unknown split {split!r}")
            splits[split].append(sid)
        else:
            raise InputError(f"{path}:{lineno}: unparseable manifest line {line!r}")
    if not class_names:
        raise InputError(f"{path}: no class definitions")
    ordered = sorted(class_names)
    intr_path = root / INTRINSICS_NAME
    intrinsics = read_intrinsics(intr_path) if intr_path.exists() else None
    manifest = DatasetManifest(
        root=root,
        splits=splits,
        class_names=[class_names[c] for c in ordered],
        palette=[palette[c] for c in ordered],
        intrinsics=intrinsics,
    )
    manifest.validate()
    return manifest


def write_label_png(path, label: np.ndarray, palette=PALETTE) -> None:
    img = Image.fromarray(label.astype(np.uint8), mode="P")
    flat = [v for rgb in palette for v in rgb]
    img.putpalette(flat + [0] * (768 - len(flat)))
    img.save(path)


def read_label_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"label file not found: {path}")
    return np.array(Image.open(path)).astype(np.uint8)


def write_rgb_png(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(path)


def read_rgb_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"rgb file not found: {path}")
    arr = np.array(Image.open(path).convert("RGB"))
    return arr.astype(np.float32) / 255.0


def write_sample(manifest: DatasetManifest, sample_id: str, sample: Sample) -> None:
    paths = manifest.sample_paths(sample_id)
    paths["rgb"].parent.mkdir(parents=True, exist_ok=True)
    write_rgb_png(paths["rgb"], sample.rgb)
    write_depth_png(paths["depth"], sample.depth)
    write_label_png(paths["label"], sample.label)


def load_sample(manifest: DatasetManifest, sample_id: str) -> Sample:
    """Read one sample; normals are recomputed from the stored depth."""
    if manifest.intrinsics is None:
        raise ConfigurationError(f"dataset at {manifest.root} has no intrinsics file")
    paths = manifest.sample_paths(sample_id)
    rgb = read_rgb_png(paths["rgb"])
    depth = read_depth_png(paths["depth"])
    label = read_label_png(paths["label"])
    if rgb.shape[:2] != depth.values.shape or rgb.shape[:2] != label.shape:
        raise InputError(
            f"sample {sample_id!r}: inconsistent dims rgb={rgb.shape[:2]} "
            f"depth={depth.values.shape} label={label.shape}"
        )
    normals = depth_to_normals(depth, manifest.intrinsics)
    return Sample(rgb=rgb, depth=depth, normals=normals, label=label)


def generate_dataset(
    out_dir,
    count: int,
    seed: int,
    height: int = 64,
    width: int = 96,
    ratios: Sequence[float] = (0.7, 0.15, 0.15),
    scene_spec: Optional[SceneSpec] = None,
) -> DatasetManifest:
    """Generate `count` scenes, split them, and write the on-disk dataset."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = scene_spec if scene_spec is not None else SceneSpec(height=height, width=width)
    manifest = make_splits(count, ratios, seed, root=out_dir)
    manifest.intrinsics = base.intrinsics
    write_intrinsics(out_dir / INTRINSICS_NAME, base.intrinsics)
    for split, ids in manifest.splits.items():
        for sid in ids:
            spec = replace(base, seed=seed ^ int(sid))
            write_sample(manifest, sid, generate_scene(spec))
    write_manifest(manifest)
    return manifest
