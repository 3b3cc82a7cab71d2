"""Analytic dynamic scenes with exact RGB, depth, optical flow and labels.

Conventions
-----------
* World frame: x right, y down, z forward. ``CameraPose`` stores the
  world-to-camera extrinsic, ``x_cam = R @ x_world + t``.
* Pixel ``(row i, col j)`` has its center at image coordinates ``(u=j, v=i)``.
* Frames are indexed from 0; a scene with ``N`` frames has timestamps
  ``0..N-1``.
* Flow maps hold ``(dx, dy)`` in pixels. The forward flow of the last frame
  and the backward flow of the first frame are zero.
"""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

FLOW_MAGIC = b"SFLO"
DEPTH_MAGIC = b"SDEP"


class SceneError(ValueError):
    pass


class DatasetError(IOError):
    pass


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise SceneError("rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise SceneError("focal lengths must be positive")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return pixel coordinates ``(..., 2)`` and camera depth ``z``.

        ``z <= 0`` marks points behind the camera; their pixel coordinates
        are meaningless.
        """
        xc = self.to_camera(x)
        z = xc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * xc[..., 0] / z + self.cx
            v = self.fy * xc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def unproject(self, uv: np.ndarray, z: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        xc = np.stack([(uv[..., 0] - self.cx) / self.fx * z, (uv[..., 1] - self.cy) / self.fy * z, z], axis=-1)
        return (xc - self.translation) @ self.rotation

    def pixel_rays(self, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
        """Unit ray directions through every pixel center, shape ``(H, W, 3)``."""
        jj, ii = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
        dirs_cam = np.stack([(jj - self.cx) / self.fx, (ii - self.cy) / self.fy, np.ones_like(jj)], axis=-1)
        dirs = dirs_cam @ self.rotation
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.center, dirs.shape).copy()
        return origins, dirs

    def as_row(self) -> list[float]:
        return [*self.rotation.reshape(-1), *self.translation, self.fx, self.fy, self.cx, self.cy]

    @classmethod
    def from_row(cls, row: Sequence[float]) -> "CameraPose":
        row = [float(v) for v in row]
        if len(row) < 16:
            raise DatasetError(f"pose row needs 16 values, got {len(row)}")
        return cls(np.array(row[:9]).reshape(3, 3), np.array(row[9:12]), *row[12:16])


# --------------------------------------------------------------------------- primitives

Albedo = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class ScenePrimitive:
    """A sphere or a fronto-parallel textured plane.

    ``path(t)`` gives the primitive center at (possibly fractional) frame
    ``t``; spheres translate rigidly, so a surface point moves by
    ``path(t+1) - path(t)``. Planes use ``extent`` as their constant depth.
    ``albedo(local_points, normals)`` receives points relative to the
    primitive center.
    """

    kind: str
    class_id: int
    path: Callable[[float], np.ndarray]
    extent: float
    albedo: Albedo

    def center(self, t: float) -> np.ndarray:
        return np.asarray(self.path(t), dtype=np.float64)

    def is_static(self, n_frames: int) -> bool:
        c0 = self.center(0)
        return all(np.array_equal(c0, self.center(t)) for t in range(n_frames))

    def intersect(self, origins: np.ndarray, dirs: np.ndarray, t: float) -> np.ndarray:
        """Nearest positive hit distance per ray (``inf`` on miss)."""
        c = self.center(t)
        if self.kind == "sphere":
            oc = origins - c
            b = np.einsum("...k,...k->...", oc, dirs)
            cc = np.einsum("...k,...k->...", oc, oc) - self.extent ** 2
            disc = b * b - cc
            hit = np.full(disc.shape, np.inf)
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            near = -b - sq
            far = -b + sq
            d = np.where(near > 1e-9, near, np.where(far > 1e-9, far, np.inf))
            hit[ok] = d[ok]
            return hit
        if self.kind == "plane":
            z0 = c[2]
            with np.errstate(divide="ignore", invalid="ignore"):
                d = (z0 - origins[..., 2]) / dirs[..., 2]
            return np.where(np.isfinite(d) & (d > 1e-9), d, np.inf)
        raise SceneError(f"unknown primitive kind {self.kind!r}")

    def normal(self, points: np.ndarray, t: float) -> np.ndarray:
        if self.kind == "sphere":
            n = points - self.center(t)
            return n / np.linalg.norm(n, axis=-1, keepdims=True)
        return np.broadcast_to(np.array([0.0, 0.0, -1.0]), points.shape)


@dataclass
class SceneRecipe:
    name: str
    primitives: list[ScenePrimitive]
    n_frames: int = 12
    width: int = 64
    height: int = 64
    num_classes: int = 4
    focal: float = 70.0
    baseline: float = 0.4
    near: float = 1.5
    far: float = 5.0


@dataclass
class SyntheticScene:
    n_frames: int
    width: int
    height: int
    num_classes: int
    seed: int
    poses: list[CameraPose]
    frames: np.ndarray          # (N, H, W, 3) float32, multiples of 1/255
    labels: np.ndarray          # (N, H, W) uint8
    depth: np.ndarray           # (N, H, W) float32
    flow_fwd: np.ndarray        # (N, H, W, 2) float32
    flow_bwd: np.ndarray        # (N, H, W, 2) float32
    fg_classes: tuple[int, ...]
    near: float
    far: float
    box_min: np.ndarray = field(default_factory=lambda: np.zeros(3))
    box_max: np.ndarray = field(default_factory=lambda: np.ones(3))
    recipe: str = "custom"

    @property
    def foreground_mask(self) -> np.ndarray:
        return np.isin(self.labels, self.fg_classes)

    @property
    def background_classes(self) -> tuple[int, ...]:
        return tuple(c for c in range(self.num_classes) if c not in self.fg_classes)

    def copy(self) -> "SyntheticScene":
        return copy.deepcopy(self)


def quantize_rgb(rgb: np.ndarray) -> np.ndarray:
    q = np.clip(np.round(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return q.astype(np.float32) / np.float32(255.0)


# --------------------------------------------------------------------------- recipes

def _plane_albedo(phase: np.ndarray) -> Albedo:
    def albedo(local, normals):
        x, y = local[..., 0], local[..., 1]
        r = 0.55 + 0.30 * np.sin(2.1 * x + phase[0]) * np.cos(1.7 * y + phase[1])
        g = 0.50 + 0.25 * np.sin(1.3 * y + phase[2])
        b = 0.45 + 0.30 * np.cos(1.9 * x - 1.1 * y + phase[0])
        return np.stack([r, g, b], axis=-1)
    return albedo


def _sphere_albedo(base, stripes: float, phase: float = 0.0) -> Albedo:
    base = np.asarray(base, dtype=np.float64)
    light = np.array([-0.4, -0.6, -0.7])
    light /= np.linalg.norm(light)

    def albedo(local, normals):
        shade = 0.55 + 0.45 * np.clip(normals @ light, 0.0, 1.0)
        band = 1.0 + 0.25 * np.sin(stripes * local[..., 1] + phase)
        return np.clip(base * (shade * band)[..., None], 0.0, 1.0)
    return albedo


def _constant(c) -> Callable[[float], np.ndarray]:
    c = np.asarray(c, dtype=np.float64)
    return lambda t: c


def balloon_recipe(seed: int = 0) -> SceneRecipe:
    """Default scene: textured wall, a static ball, one moving balloon."""
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, 3)
    start = np.array([-0.50, -0.15, 2.4]) + rng.uniform(-0.05, 0.05, 3) * np.array([1, 1, 0])
    n = 12

    def balloon_path(t):
        s = t / (n - 1)
        return start + np.array([0.9 * s, -0.25 * np.sin(np.pi * s), 0.0])

    prims = [
        ScenePrimitive("plane", 0, _constant([0.0, 0.0, 4.0]), 4.0, _plane_albedo(phase)),
        ScenePrimitive("sphere", 1, _constant([0.62, 0.38, 3.1]), 0.45, _sphere_albedo([0.35, 0.75, 0.45], 6.0)),
        ScenePrimitive("sphere", 2, balloon_path, 0.40, _sphere_albedo([0.95, 0.25, 0.20], 14.0, phase[1])),
    ]
    return SceneRecipe("balloon", prims, n_frames=n)


def static_plane_recipe(seed: int = 0) -> SceneRecipe:
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, 3)
    prims = [ScenePrimitive("plane", 0, _constant([0.0, 0.0, 4.0]), 4.0, _plane_albedo(phase))]
    return SceneRecipe("static_plane", prims, n_frames=12)


def balloon_pair_recipe(seed: int = 0) -> SceneRecipe:
    """Variant with a second balloon moving the other way (for multi-scene runs)."""
    base = balloon_recipe(seed)
    n = base.n_frames
    start = np.array([0.45, -0.45, 2.6])

    def path(t):
        s = t / (n - 1)
        return start + np.array([-0.8 * s, 0.15 * s, 0.0])

    base.primitives[2] = ScenePrimitive("sphere", 2, path, 0.35, _sphere_albedo([0.95, 0.80, 0.15], 10.0))
    base.name = "balloon_pair"
    return base


RECIPES: dict[str, Callable[[int], SceneRecipe]] = {
    "balloon": balloon_recipe,
    "balloon_pair": balloon_pair_recipe,
    "static_plane": static_plane_recipe,
}


def rig_poses(recipe: SceneRecipe) -> list[CameraPose]:
    """Forward-facing cameras stepping evenly along the x axis."""
    n = recipe.n_frames
    cx = (recipe.width - 1) / 2.0
    cy = (recipe.height - 1) / 2.0
    xs = np.linspace(-recipe.baseline / 2, recipe.baseline / 2, n) if n > 1 else np.zeros(1)
    return [CameraPose(np.eye(3), -np.array([x, 0.0, 0.0]), recipe.focal, recipe.focal, cx, cy) for x in xs]


# --------------------------------------------------------------------------- generation

def _render_frame(recipe: SceneRecipe, pose: CameraPose, t: int):
    origins, dirs = pose.pixel_rays(recipe.width, recipe.height)
    hits = np.stack([p.intersect(origins, dirs, t) for p in recipe.primitives])
    nearest = np.argmin(hits, axis=0)
    depth = np.take_along_axis(hits, nearest[None], 0)[0]
    if not np.isfinite(depth).all():
        raise SceneError("some pixels see no primitive; add a background plane")
    points = origins + depth[..., None] * dirs
    rgb = np.zeros(points.shape)
    labels = np.zeros(depth.shape, dtype=np.uint8)
    prim_index = nearest
    for k, prim in enumerate(recipe.primitives):
        sel = nearest == k
        if not sel.any():
            continue
        pts = points[sel]
        rgb[sel] = prim.albedo(pts - prim.center(t), prim.normal(pts, t))
        labels[sel] = prim.class_id
    return rgb, labels, depth, points, prim_index


def _flow(recipe, poses, t, t_next, points, prim_index):
    """Pixel displacement of each first-hit point from frame t to t_next."""
    H, W = points.shape[:2]
    jj, ii = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    moved = points.copy()
    for k, prim in enumerate(recipe.primitives):
        sel = prim_index == k
        moved[sel] += prim.center(t_next) - prim.center(t)
    uv, _ = poses[t_next].project(moved)
    return np.stack([uv[..., 0] - jj, uv[..., 1] - ii], axis=-1)


def _check_recipe(recipe: SceneRecipe, poses: list[CameraPose]) -> None:
    if recipe.n_frames < 2:
        raise SceneError("a scene needs at least 2 frames")
    if not recipe.primitives:
        raise SceneError("recipe has no primitives")
    if not any(p.is_static(recipe.n_frames) for p in recipe.primitives):
        raise SceneError("recipe needs at least one static primitive")
    for p in recipe.primitives:
        if not 0 <= p.class_id < recipe.num_classes:
            raise SceneError(f"class id {p.class_id} outside [0, {recipe.num_classes})")
        in_front = False
        for t, pose in enumerate(poses):
            z = pose.to_camera(p.center(t))[2]
            if z + (p.extent if p.kind == "sphere" else 0.0) > 0:
                in_front = True
                break
        if not in_front:
            raise SceneError(f"{p.kind} (class {p.class_id}) is behind every camera")


def scene_box(recipe: SceneRecipe, poses: list[CameraPose]) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box enclosing every camera frustum between near and far."""
    corners = []
    for pose in poses:
        for u in (0.0, recipe.width - 1.0):
            for v in (0.0, recipe.height - 1.0):
                for z in (recipe.near, recipe.far):
                    corners.append(pose.unproject(np.array([u, v]), np.array(z)))
    corners = np.array(corners)
    return corners.min(0), corners.max(0)


def generate_scene(recipe: SceneRecipe | str = "balloon", seed: int = 0) -> SyntheticScene:
    """Render every frame of ``recipe`` with exact ground truth.

    Nearest hit wins for color, label and depth. Flow follows the hit point
    along its primitive's motion and reprojects it with the neighbouring
    frame's camera.
    """
    if isinstance(recipe, str):
        try:
            recipe = RECIPES[recipe](seed)
        except KeyError:
            raise SceneError(f"unknown recipe {recipe!r}; choose from {sorted(RECIPES)}") from None
    poses = rig_poses(recipe)
    _check_recipe(recipe, poses)
    N, H, W = recipe.n_frames, recipe.height, recipe.width
    frames = np.zeros((N, H, W, 3), np.float32)
    labels = np.zeros((N, H, W), np.uint8)
    depth = np.zeros((N, H, W), np.float32)
    fwd = np.zeros((N, H, W, 2), np.float32)
    bwd = np.zeros((N, H, W, 2), np.float32)
    for t in range(N):
        rgb, lab, dep, points, prim_index = _render_frame(recipe, poses[t], t)
        frames[t] = quantize_rgb(rgb)
        labels[t] = lab
        depth[t] = dep
        if t + 1 < N:
            fwd[t] = _flow(recipe, poses, t, t + 1, points, prim_index)
        if t > 0:
            bwd[t] = _flow(recipe, poses, t, t - 1, points, prim_index)
    fg = tuple(sorted({p.class_id for p in recipe.primitives if not p.is_static(N)}))
    lo, hi = scene_box(recipe, poses)
    return SyntheticScene(N, W, H, recipe.num_classes, seed, poses, frames, labels, depth, fwd, bwd,
                          fg, recipe.near, recipe.far, lo, hi, recipe.name)


# --------------------------------------------------------------------------- perturbations

def add_flow_noise(scene: SyntheticScene, beta: float, seed: int = 0) -> SyntheticScene:
    """Add ``beta * U(min, max)`` noise to every flow map, min/max per map."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    out = scene.copy()
    if beta == 0:
        return out
    rng = np.random.default_rng(seed)
    for maps in (out.flow_fwd, out.flow_bwd):
        for t in range(out.n_frames):
            m = maps[t]
            lo, hi = float(m.min()), float(m.max())
            noise = rng.uniform(lo, hi, size=m.shape)
            maps[t] = (m.astype(np.float64) + beta * noise).astype(np.float32)
    return out


OCCLUDER_RGB = (0.1, 0.1, 0.1)


def occlude_region(scene: SyntheticScene, frame_index: int, rect: tuple[int, int, int, int]) -> SyntheticScene:
    """Paint ``rect = (x, y, w, h)`` of one frame with a flat occluder.

    The region takes the reserved class ``L-1`` and its forward/backward flow
    is zeroed in that frame only.
    """
    if not 0 <= frame_index < scene.n_frames:
        raise IndexError(f"frame {frame_index} outside [0, {scene.n_frames})")
    x, y, w, h = (int(v) for v in rect)
    if w < 0 or h < 0 or x < 0 or y < 0 or x + w > scene.width or y + h > scene.height:
        raise ValueError(f"rect {rect} exceeds image bounds {scene.width}x{scene.height}")
    out = scene.copy()
    if w == 0 or h == 0:
        return out
    sl = (frame_index, slice(y, y + h), slice(x, x + w))
    out.frames[sl] = quantize_rgb(np.array(OCCLUDER_RGB))
    out.labels[sl] = scene.num_classes - 1
    out.flow_fwd[sl] = 0.0
    out.flow_bwd[sl] = 0.0
    out.fg_classes = tuple(c for c in scene.fg_classes if c != scene.num_classes - 1)
    return out


# --------------------------------------------------------------------------- dataset io

def _write_map(path: Path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_map(path: Path, magic: bytes, channels: int) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"{path}: {e.strerror}") from e
    if len(raw) < 12:
        raise DatasetError(f"{path}: truncated header")
    if raw[:4] != magic:
        raise DatasetError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    w, h = struct.unpack("<II", raw[4:12])
    need = 12 + 4 * w * h * channels
    if len(raw) != need:
        raise DatasetError(f"{path}: expected {need} bytes for {w}x{h}, found {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4", offset=12).astype(np.float32)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def write_flow(path, flow: np.ndarray) -> None:
    _write_map(Path(path), FLOW_MAGIC, flow)


def read_flow(path) -> np.ndarray:
    return _read_map(Path(path), FLOW_MAGIC, 2)


def write_depth(path, depth: np.ndarray) -> None:
    _write_map(Path(path), DEPTH_MAGIC, depth)


def read_depth(path) -> np.ndarray:
    return _read_map(Path(path), DEPTH_MAGIC, 1)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_dataset(scene: SyntheticScene, directory) -> Path:
    root = Path(directory)
    for sub in ("frames", "labels", "flow", "depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for t in range(scene.n_frames):
        rgb8 = np.round(scene.frames[t].astype(np.float64) * 255.0).astype(np.uint8)
        Image.fromarray(rgb8, "RGB").save(root / "frames" / f"frame_{t:03d}.png")
        Image.fromarray(scene.labels[t], "L").save(root / "labels" / f"label_{t:03d}.png")
        write_flow(root / "flow" / f"fwd_{t:03d}.bin", scene.flow_fwd[t])
        write_flow(root / "flow" / f"bwd_{t:03d}.bin", scene.flow_bwd[t])
        write_depth(root / "depth" / f"depth_{t:03d}.bin", scene.depth[t])
    with open(root / "poses.txt", "w") as f:
        for pose in scene.poses:
            f.write(" ".join(_fmt(v) for v in pose.as_row()) + "\n")
    meta = {
        "N": scene.n_frames, "W": scene.width, "H": scene.height, "L": scene.num_classes,
        "seed": scene.seed, "recipe": scene.recipe,
        "fg_classes": ",".join(str(c) for c in scene.fg_classes),
        "near": _fmt(scene.near), "far": _fmt(scene.far),
        "box_min": ",".join(_fmt(v) for v in scene.box_min),
        "box_max": ",".join(_fmt(v) for v in scene.box_max),
    }
    with open(root / "meta.txt", "w") as f:
        for k, v in meta.items():
            f.write(f"{k}={v}\n")
    return root


def read_meta(path) -> dict[str, str]:
    meta = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise DatasetError(f"{path}: {e.strerror}") from e
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"{path}: malformed line {line!r}")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    return meta


def read_poses(path) -> list[CameraPose]:
    try:
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    except OSError as e:
        raise DatasetError(f"{path}: {e.strerror}") from e
    try:
        return [CameraPose.from_row(ln.split()) for ln in lines]
    except (ValueError, SceneError) as e:
        raise DatasetError(f"{path}: {e}") from e


def _read_png(path: Path, mode: str, shape) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                raise DatasetError(f"{path}: expected PNG mode {mode}, found {im.mode}")
            arr = np.array(im)
    except OSError as e:
        raise DatasetError(f"{path}: {e}") from e
    if arr.shape != shape:
        raise DatasetError(f"{path}: shape {arr.shape} does not match meta {shape}")
    return arr


def read_dataset(directory) -> SyntheticScene:
    root = Path(directory)
    meta = read_meta(root / "meta.txt")
    try:
        N, W, H, L = (int(meta[k]) for k in ("N", "W", "H", "L"))
        seed = int(meta.get("seed", 0))
    except (KeyError, ValueError) as e:
        raise DatasetError(f"{root / 'meta.txt'}: missing or invalid key {e}") from e
    poses = read_poses(root / "poses.txt")
    if len(poses) != N:
        raise DatasetError(f"{root / 'poses.txt'}: {len(poses)} poses for N={N}")
    frames = np.zeros((N, H, W, 3), np.float32)
    labels = np.zeros((N, H, W), np.uint8)
    depth = np.zeros((N, H, W), np.float32)
    fwd = np.zeros((N, H, W, 2), np.float32)
    bwd = np.zeros((N, H, W, 2), np.float32)
    for t in range(N):
        rgb8 = _read_png(root / "frames" / f"frame_{t:03d}.png", "RGB", (H, W, 3))
        frames[t] = rgb8.astype(np.float32) / np.float32(255.0)
        labels[t] = _read_png(root / "labels" / f"label_{t:03d}.png", "L", (H, W))
        for arr, name, reader in ((fwd, f"flow/fwd_{t:03d}.bin", read_flow),
                                  (bwd, f"flow/bwd_{t:03d}.bin", read_flow),
                                  (depth, f"depth/depth_{t:03d}.bin", read_depth)):
            m = reader(root / name)
            if m.shape[:2] != (H, W):
                raise DatasetError(f"{root / name}: dimensions {m.shape[1]}x{m.shape[0]} do not match meta {W}x{H}")
            arr[t] = m
    if labels.max(initial=0) >= L:
        raise DatasetError(f"{root / 'labels'}: class id >= L={L}")
    fg = tuple(int(c) for c in meta.get("fg_classes", "").split(",") if c != "")

    def vec(key, default):
        return np.array([float(v) for v in meta[key].split(",")]) if key in meta else default

    return SyntheticScene(N, W, H, L, seed, poses, frames, labels, depth, fwd, bwd, fg,
                          float(meta.get("near", 1.5)), float(meta.get("far", 5.0)),
                          vec("box_min", np.zeros(3)), vec("box_max", np.ones(3)),
                          meta.get("recipe", "custom"))


def scenes_equal(a: SyntheticScene, b: SyntheticScene) -> bool:
    """Bit-exact comparison of every map, pose and metadata field."""
    arrays = ("frames", "labels", "depth", "flow_fwd", "flow_bwd", "box_min", "box_max")
    if any(getattr(a, k).tobytes() != getattr(b, k).tobytes() for k in arrays):
        return False
    if [p.as_row() for p in a.poses] != [p.as_row() for p in b.poses]:
        return False
    scalars = ("n_frames", "width", "height", "num_classes", "seed", "fg_classes", "near", "far", "recipe")
    return all(getattr(a, k) == getattr(b, k) for k in scalars)
