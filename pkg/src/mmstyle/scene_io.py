"""Posed multi-view scenes: disk format, synthetic generator, exact flow.

A scene directory holds ``manifest.json`` plus one PNG per view::

    {"scene_id": "s0", "width": 64, "height": 64,
     "views": [{"image": "v000.png", "intrinsics": [9 floats, row-major],
                "extrinsics": [16 floats, row-major], "near": 1.0, "far": 3.5}]}

Synthetic scenes also carry ``geometry.json`` (plane depth, box AABBs and
texture seed), which is what :func:`ground_truth_flow` needs.

Cameras follow the OpenCV convention (x right, y down, z forward) and the
extrinsics map world points into the camera frame. Pixel ``(x, y)`` covers
the continuous image square ``[x, x+1) x [y, y+1)``; rays go through pixel
centres. Flow vectors are expressed in pixel-index units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .validation import ValidationError, check_image, to_uint8


class SceneLoadError(ValueError):
    pass


class UnsupportedError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class CameraModel:
    intrinsics: np.ndarray
    extrinsics: np.ndarray
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        E = np.asarray(self.extrinsics, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", E)
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValidationError("intrinsics: focal entries must be positive")
        R = E[:3, :3]
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            raise ValidationError("extrinsics: rotation block is not orthonormal within 1e-6")
        if not np.allclose(E[3], [0, 0, 0, 1]):
            raise ValidationError("extrinsics: last row must be [0, 0, 0, 1]")
        if not self.near < self.far:
            raise ValidationError(f"near ({self.near}) must be < far ({self.far})")
        if self.width < 1 or self.height < 1:
            raise ValidationError("width and height must be positive")

    @property
    def center(self) -> np.ndarray:
        R, t = self.extrinsics[:3, :3], self.extrinsics[:3, 3]
        return -R.T @ t

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space origins and unit directions, one per pixel, row-major."""
        ys, xs = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        pix = np.stack([xs + 0.5, ys + 0.5, np.ones_like(xs)], axis=-1).reshape(-1, 3)
        d_cam = pix @ np.linalg.inv(self.intrinsics).T
        R = self.extrinsics[:3, :3]
        d = d_cam @ R
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.center, d.shape).copy()
        return o, d

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-index coordinates ``(x, y)`` and camera depth of world points."""
        R, t = self.extrinsics[:3, :3], self.extrinsics[:3, 3]
        pc = points @ R.T + t
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uvw = pc @ self.intrinsics.T
            uv = uvw[:, :2] / uvw[:, 2:3] - 0.5
        return uv, z


@dataclass(frozen=True)
class SceneGeometry:
    """Fronto-parallel textured plane at ``z = plane_depth`` plus AABB boxes."""

    plane_depth: float
    boxes: tuple  # of (min_xyz, max_xyz) tuples
    texture_seed: int
    cell: float = 0.12

    def to_json(self) -> dict:
        return {
            "plane_depth": self.plane_depth,
            "boxes": [[list(map(float, lo)), list(map(float, hi))] for lo, hi in self.boxes],
            "texture_seed": self.texture_seed,
            "cell": self.cell,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SceneGeometry":
        boxes = tuple((tuple(lo), tuple(hi)) for lo, hi in obj["boxes"])
        return cls(float(obj["plane_depth"]), boxes, int(obj["texture_seed"]), float(obj.get("cell", 0.12)))

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """First hit distance along each ray and surface id (0 plane, k box k, -1 miss)."""
        n = origins.shape[0]
        t_best = np.full(n, np.inf)
        sid = np.full(n, -1, dtype=np.int64)
        with np.errstate(divide="ignore", invalid="ignore"):
            tp = (self.plane_depth - origins[:, 2]) / dirs[:, 2]
        hit = np.isfinite(tp) & (tp > 1e-9)
        t_best[hit] = tp[hit]
        sid[hit] = 0
        for k, (lo, hi) in enumerate(self.boxes, start=1):
            lo = np.asarray(lo)
            hi = np.asarray(hi)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dirs
                t0 = (lo - origins) * inv
                t1 = (hi - origins) * inv
            tmin = np.nanmax(np.minimum(t0, t1), axis=1)
            tmax = np.nanmin(np.maximum(t0, t1), axis=1)
            hit = (tmax >= tmin) & (tmin > 1e-9) & (tmin < t_best)
            t_best[hit] = tmin[hit]
            sid[hit] = k
        return t_best, sid

    def shade(self, points: np.ndarray, sid: np.ndarray) -> np.ndarray:
        """Albedo at surface points; no lighting, so colour is view-independent."""
        out = np.zeros((points.shape[0], 3))
        for s in np.unique(sid):
            sel = sid == s
            if s < 0:
                continue
            out[sel] = _textured(points[sel], self.texture_seed * 7919 + int(s), self.cell)
        return out


def _value_noise(points: np.ndarray, seed: int, cell: float, size: int = 48) -> np.ndarray:
    rng = np.random.default_rng(seed)
    lattice = rng.random((size, size, size))
    g = points / cell + size / 2.0
    g = np.clip(g, 0, size - 1.001)
    i0 = np.floor(g).astype(np.int64)
    f = g - i0
    f = f * f * (3 - 2 * f)
    i1 = np.minimum(i0 + 1, size - 1)
    out = np.zeros(points.shape[0])
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1 - f[:, 0]
        ix = i1[:, 0] if dx else i0[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1 - f[:, 1]
            iy = i1[:, 1] if dy else i0[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1 - f[:, 2]
                iz = i1[:, 2] if dz else i0[:, 2]
                out += wx * wy * wz * lattice[ix, iy, iz]
    return out


def _textured(points: np.ndarray, seed: int, cell: float) -> np.ndarray:
    rng = np.random.default_rng(seed)
    c0, c1, c2 = rng.uniform(0.1, 0.9, size=(3, 3))
    a = _value_noise(points, seed + 1, cell)
    b = _value_noise(points, seed + 2, cell * 2.5)
    col = (1 - a)[:, None] * c0 + a[:, None] * c1
    col = (1 - 0.5 * b)[:, None] * col + (0.5 * b)[:, None] * c2
    return np.clip(col, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class SceneBundle:
    views: tuple  # of (CameraModel, image array)
    scene_id: str
    gt_flow_available: bool = False
    geometry: Optional[SceneGeometry] = None

    def __post_init__(self):
        views = tuple((cam, np.clip(check_image(img, f"view {i}"), 0.0, 1.0))
                      for i, (cam, img) in enumerate(self.views))
        if len(views) < 2:
            raise ValidationError(f"a scene needs at least 2 views, got {len(views)}")
        shape = views[0][1].shape
        for i, (cam, img) in enumerate(views):
            if img.shape != shape:
                raise ValidationError(f"view {i} image shape {img.shape} differs from {shape}")
            if (cam.height, cam.width) != img.shape[:2]:
                raise ValidationError(f"view {i} camera size does not match its image")
        for _, img in views:
            img.setflags(write=False)
        object.__setattr__(self, "views", views)

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def cameras(self) -> list:
        return [c for c, _ in self.views]

    @property
    def images(self) -> list:
        return [im for _, im in self.views]

    @property
    def shape(self) -> tuple:
        return self.views[0][1].shape[:2]


@dataclass
class FlowField:
    """Per-pixel displacement ``(dx, dy)`` from ``src`` pixels into ``dst``."""

    flow: np.ndarray
    src: int = -1
    dst: int = -1
    valid: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64)
        if self.flow.ndim != 3 or self.flow.shape[2] != 2:
            raise ValidationError(f"flow must have shape (H, W, 2), got {self.flow.shape}")
        if not np.all(np.isfinite(self.flow)):
            raise ValidationError("flow contains non-finite values")
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.flow.shape[:2]:
                raise ValidationError("validity mask shape does not match flow")

    @property
    def shape(self) -> tuple:
        return self.flow.shape[:2]


# ---------------------------------------------------------------------------
# disk format


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def write_png(path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = image if image.dtype == np.uint8 else to_uint8(image)
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    return _read_png(Path(path))


def load_scene(path) -> SceneBundle:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise SceneLoadError(f"{root}: manifest.json not found")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneLoadError(f"{manifest_path}: invalid JSON ({exc})") from exc
    for key in ("scene_id", "width", "height", "views"):
        if key not in manifest:
            raise SceneLoadError(f"{manifest_path}: missing field '{key}'")
    views = []
    for i, v in enumerate(manifest["views"]):
        for key in ("image", "intrinsics", "extrinsics", "near", "far"):
            if key not in v:
                raise SceneLoadError(f"{manifest_path}: views[{i}] missing field '{key}'")
        if len(v["intrinsics"]) != 9:
            raise SceneLoadError(f"{manifest_path}: views[{i}].intrinsics must have 9 entries")
        if len(v["extrinsics"]) != 16:
            raise SceneLoadError(f"{manifest_path}: views[{i}].extrinsics must have 16 entries")
        img_path = root / v["image"]
        if not img_path.is_file():
            raise SceneLoadError(f"{manifest_path}: views[{i}].image '{v['image']}' not found")
        img = _read_png(img_path)
        if img.shape[:2] != (manifest["height"], manifest["width"]):
            raise ValidationError(
                f"views[{i}].image is {img.shape[1]}x{img.shape[0]}, "
                f"manifest says {manifest['width']}x{manifest['height']}"
            )
        cam = CameraModel(
            np.array(v["intrinsics"], dtype=np.float64).reshape(3, 3),
            np.array(v["extrinsics"], dtype=np.float64).reshape(4, 4),
            int(manifest["width"]), int(manifest["height"]), float(v["near"]), float(v["far"]),
        )
        views.append((cam, img))
    geometry = None
    geo_path = root / "geometry.json"
    if geo_path.is_file():
        geometry = SceneGeometry.from_json(json.loads(geo_path.read_text()))
    return SceneBundle(tuple(views), str(manifest["scene_id"]), geometry is not None, geometry)


def save_scene(scene: SceneBundle, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    h, w = scene.shape
    entries = []
    for i, (cam, img) in enumerate(scene.views):
        name = f"v{i:03d}.png"
        write_png(root / name, img)
        entries.append({
            "image": name,
            "intrinsics": cam.intrinsics.reshape(-1).tolist(),
            "extrinsics": cam.extrinsics.reshape(-1).tolist(),
            "near": cam.near,
            "far": cam.far,
        })
    manifest = {"scene_id": scene.scene_id, "width": w, "height": h, "views": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    if scene.geometry is not None:
        (root / "geometry.json").write_text(json.dumps(scene.geometry.to_json(), indent=2))
    return root


# ---------------------------------------------------------------------------
# synthetic scenes


def look_at(center, target=(0.0, 0.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``center`` looking at ``target`` (y down)."""
    c = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - c
    fwd /= np.linalg.norm(fwd)
    right = np.cross([0.0, 1.0, 0.0], fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = -R @ c
    return E


def arc_cameras(n: int, resolution: int, span_deg: float = 40.0, radius: float = 2.2,
                phase: float = 0.0, fov_deg: float = 40.0) -> list:
    """Cameras on a horizontal arc around the origin, ordered left to right.

    ``phase`` shifts every angle by that fraction of the inter-view step, which
    gives held-out views in between the training views.
    """
    f = (resolution / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
    K = np.array([[f, 0, resolution / 2.0], [0, f, resolution / 2.0], [0, 0, 1.0]])
    angles = np.linspace(-span_deg / 2, span_deg / 2, n)
    step = angles[1] - angles[0] if n > 1 else 0.0
    cams = []
    for a in angles + phase * step:
        th = np.deg2rad(a)
        center = (radius * np.sin(th), -0.15, -radius * np.cos(th))
        cams.append(CameraModel(K, look_at(center), resolution, resolution, 1.0, radius + 1.4))
    return cams


def synthetic_geometry(seed: int) -> SceneGeometry:
    rng = np.random.default_rng(seed)
    c1 = np.array([-0.3, 0.05, 0.0]) + rng.uniform(-0.05, 0.05, 3)
    c2 = np.array([0.3, -0.1, -0.3]) + rng.uniform(-0.05, 0.05, 3)
    h1 = np.array([0.18, 0.28, 0.18])
    h2 = np.array([0.14, 0.14, 0.14])
    boxes = (
        (tuple(c1 - h1), tuple(c1 + h1)),
        (tuple(c2 - h2), tuple(c2 + h2)),
    )
    return SceneGeometry(plane_depth=0.6, boxes=boxes, texture_seed=int(seed))


def render_geometry(geometry: SceneGeometry, camera: CameraModel) -> np.ndarray:
    o, d = camera.pixel_rays()
    t, sid = geometry.intersect(o, d)
    pts = o + d * np.where(np.isfinite(t), t, 0.0)[:, None]
    img = geometry.shade(pts, sid)
    return img.reshape(camera.height, camera.width, 3)


def surface_ids(geometry: SceneGeometry, camera: CameraModel) -> np.ndarray:
    o, d = camera.pixel_rays()
    _, sid = geometry.intersect(o, d)
    return sid.reshape(camera.height, camera.width)


def scene_from_cameras(geometry: SceneGeometry, cameras, scene_id: str) -> SceneBundle:
    views = tuple((cam, render_geometry(geometry, cam)) for cam in cameras)
    return SceneBundle(views, scene_id, True, geometry)


def generate_synthetic_scene(seed: int, n_views: int, resolution: int = 64) -> SceneBundle:
    """Textured plane plus two boxes seen from ``n_views`` cameras on an arc."""
    if n_views < 2:
        raise ValueError(f"n_views must be >= 2, got {n_views}")
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    geometry = synthetic_geometry(seed)
    cams = arc_cameras(n_views, resolution)
    return scene_from_cameras(geometry, cams, f"synth-s{seed}-n{n_views}-r{resolution}")


def held_out_views(scene: SceneBundle) -> SceneBundle:
    """Test views placed halfway between consecutive training views."""
    if scene.geometry is None:
        raise UnsupportedError(f"scene {scene.scene_id!r} carries no geometry metadata")
    cams = arc_cameras(scene.n_views, scene.shape[1], phase=0.5)[:-1]
    return scene_from_cameras(scene.geometry, cams, scene.scene_id + "-test")


def ground_truth_flow(scene: SceneBundle, src: int, dst: int, occlusion_tol: float = 1e-4) -> FlowField:
    """Exact reprojection flow from view ``src`` to view ``dst``.

    ``valid`` is false where the surface seen in ``src`` is outside the
    ``dst`` frustum or hidden behind another surface there.
    """
    if not scene.gt_flow_available or scene.geometry is None:
        raise UnsupportedError(f"scene {scene.scene_id!r} has no geometry metadata for exact flow")
    geo = scene.geometry
    cam_s, cam_d = scene.cameras[src], scene.cameras[dst]
    o, d = cam_s.pixel_rays()
    t, sid = geo.intersect(o, d)
    hit = np.isfinite(t)
    pts = o + d * np.where(hit, t, 0.0)[:, None]
    uv, z = cam_d.project(pts)
    h, w = cam_s.height, cam_s.width
    ys, xs = np.mgrid[0:h, 0:w]
    base = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1).astype(np.float64)
    flow = np.where(np.isfinite(uv), uv - base, 0.0)
    inside = hit & (z > 0) & np.all(np.isfinite(uv), axis=1)
    inside &= (uv[:, 0] >= 0) & (uv[:, 0] <= cam_d.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= cam_d.height - 1)
    # visibility: the dst ray towards the point must hit it first
    cd = cam_d.center
    vec = pts - cd
    dist = np.linalg.norm(vec, axis=1)
    dirs = vec / np.where(dist > 0, dist, 1.0)[:, None]
    t_d, _ = geo.intersect(np.broadcast_to(cd, pts.shape).copy(), dirs)
    visible = np.abs(t_d - dist) <= occlusion_tol * np.maximum(dist, 1.0)
    valid = inside & visible
    return FlowField(flow.reshape(h, w, 2), src, dst, valid.reshape(h, w))
