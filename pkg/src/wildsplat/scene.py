"""Synthetic multi-view scenes with known 2D occluders, and their on-disk layout.

Layout of a scene directory::

    spec.txt          generator spec, key=value lines
    cameras.txt       one line per view: id, width, height, fx, fy, cx, cy,
                      then the 16 entries of the 4x4 world-to-camera matrix
    points.txt        sparse coloured point cloud (x y z r g b), stands in for SfM
    images/####.png   occluded training inputs
    clean/####.png    the same views without occluders
    masks/####.png    255 where an occluder changed the clean pixel

Every text file starts with a ``format_version`` line.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import raster
from .diffcore import Tensor
from .splat import SH_C0, Camera, StaticGaussians, project_static

FORMAT_VERSION = 1
PRESETS = {"none": 0.0, "low": 0.05, "medium": 0.15, "high": 0.30}


class SceneSpecError(ValueError):
    pass


@dataclass
class OccluderSpec:
    coverage: float = 0.15
    max_count: int = 3
    size_range: tuple = (0.15, 0.45)   # side length as a fraction of image size
    color_mode: str = "solid"          # solid | textured
    tolerance: float = 0.05


@dataclass
class SceneSpec:
    n_views: int = 20
    width: int = 64
    height: int = 64
    n_gaussians: int = 300
    n_points: int = 300
    ring_radius: float = 3.2
    ring_height: float = 1.2
    fov_deg: float = 50.0
    occluders: OccluderSpec = field(default_factory=OccluderSpec)

    def validate(self):
        o = self.occluders
        if self.n_views < 4:
            raise SceneSpecError("need at least 4 views")
        if not 0.0 <= o.coverage <= 0.5:
            raise SceneSpecError("coverage target must lie in [0, 0.5]")
        if o.color_mode not in ("solid", "textured"):
            raise SceneSpecError(f"unknown colour mode {o.color_mode!r}")
        lo, hi = o.size_range
        if not 0 < lo <= hi <= 1:
            raise SceneSpecError("size range must satisfy 0 < lo <= hi <= 1")
        if o.coverage > 0 and o.max_count * hi * hi < o.coverage - o.tolerance:
            raise SceneSpecError(
                f"coverage {o.coverage:.2f} unreachable: {o.max_count} occluders of side "
                f"<= {hi:.2f} cover at most {o.max_count * hi * hi:.2f}")
        if o.coverage > 0 and lo * lo * np.pi / 4 > o.coverage + o.tolerance:
            raise SceneSpecError(
                f"coverage {o.coverage:.2f} unreachable: the smallest occluder already covers "
                f"{lo * lo * np.pi / 4:.2f}")

    def to_lines(self) -> list[str]:
        flat = {k: v for k, v in asdict(self).items() if k != "occluders"}
        flat.update({f"occluders.{k}": v for k, v in asdict(self.occluders).items()})
        out = [f"format_version={FORMAT_VERSION}"]
        for k, v in flat.items():
            if isinstance(v, (tuple, list)):
                v = ",".join(repr(float(x)) for x in v)
            out.append(f"{k}={v}")
        return out

    @classmethod
    def from_lines(cls, lines) -> "SceneSpec":
        kv = dict(line.split("=", 1) for line in lines if "=" in line)
        kv.pop("format_version", None)
        spec, occ = cls(), OccluderSpec()
        for f in fields(cls):
            if f.name in kv:
                setattr(spec, f.name, type(getattr(spec, f.name))(kv[f.name]))
        for f in fields(OccluderSpec):
            key = f"occluders.{f.name}"
            if key in kv:
                cur = getattr(occ, f.name)
                val = tuple(float(x) for x in kv[key].split(",")) if isinstance(cur, tuple) else type(cur)(kv[key])
                setattr(occ, f.name, val)
        spec.occluders = occ
        return spec


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    gt: dict                      # generator-owned static field arrays
    cameras: list
    clean: np.ndarray             # (V, H, W, 3) uint8
    images: np.ndarray            # (V, H, W, 3) uint8
    masks: np.ndarray             # (V, H, W) bool
    points: np.ndarray            # (P, 6) xyz rgb


def ring_cameras(spec: SceneSpec) -> list[Camera]:
    f = 0.5 * spec.width / np.tan(np.radians(spec.fov_deg) / 2)
    cams = []
    for i in range(spec.n_views):
        a = 2 * np.pi * i / spec.n_views
        eye = [spec.ring_radius * np.cos(a), -spec.ring_height, spec.ring_radius * np.sin(a)]
        cams.append(Camera.look_at(eye, [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], f, f, spec.width, spec.height))
    return cams


def _palette(p):
    """Smooth colour field over space; keeps textures recoverable at 64 px."""
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    r = 0.5 + 0.4 * np.sin(2.1 * x + 0.5)
    g = 0.5 + 0.4 * np.sin(1.7 * z - 0.3 * y + 1.0)
    b = 0.5 + 0.4 * np.cos(1.3 * y + 0.9 * x)
    return np.clip(np.stack([r, g, b], axis=1), 0.05, 0.95)


def gt_field(spec: SceneSpec, rng) -> dict:
    """Ground disk plus a few blobby objects."""
    n = spec.n_gaussians
    n_ground = n // 2
    ang = rng.uniform(0, 2 * np.pi, n_ground)
    rad = 1.6 * np.sqrt(rng.uniform(0, 1, n_ground))
    ground = np.stack([rad * np.cos(ang), np.full(n_ground, 0.5), rad * np.sin(ang)], 1)
    centers = np.array([[0.0, 0.0, 0.0], [0.7, 0.15, -0.4], [-0.6, 0.2, 0.5]])
    k = n - n_ground
    which = rng.integers(0, len(centers), k)
    blobs = centers[which] + rng.normal(0, 0.28, (k, 3)) * np.array([1.0, 0.8, 1.0])
    mu = np.concatenate([ground, blobs])
    log_scale = np.log(rng.uniform(0.08, 0.16, (n, 3)))
    log_scale[:n_ground, 1] = np.log(0.03)
    q = rng.normal(size=(n, 4))
    q[:n_ground] = [1, 0, 0, 0]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    color = _palette(mu)
    checker = (np.floor(mu[:n_ground, 0] * 1.5) + np.floor(mu[:n_ground, 2] * 1.5)) % 2
    color[:n_ground] = 0.7 * color[:n_ground] + 0.25 * checker[:, None]
    sh = np.zeros((n, 4, 3))
    sh[:, 0] = (color - 0.5) / SH_C0
    return dict(mu=mu, log_scale=log_scale, rot=q, opacity_logit=np.full(n, 3.0), sh=sh,
                uncert_logit=np.zeros(n))


def render_field(arrays: dict, cam: Camera, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    f = StaticGaussians(**{k: Tensor(np.asarray(v, dtype=np.float64)) for k, v in arrays.items()})
    out = raster.rasterize(project_static(f, cam), cam.height, cam.width, background)
    return out.image.data


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def _shape_mask(kind, cy, cx, hh, hw, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "rect":
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    return ((yy - cy) / max(hh, 0.5)) ** 2 + ((xx - cx) / max(hw, 0.5)) ** 2 <= 1.0


def _occluder_color(rng):
    c = rng.uniform(0.0, 1.0, 3)
    c[rng.integers(0, 3)] = rng.choice([0.0, 1.0])
    return c


def _occlude_view(clean, rng, occ: OccluderSpec):
    h, w = clean.shape[:2]
    lo, hi = occ.size_range
    for _ in range(200):
        img = clean.astype(np.float64) / 255.0
        shape_union = np.zeros((h, w), bool)
        for _ in range(occ.max_count):
            kind = rng.choice(["rect", "ellipse"])
            sh, sw = rng.uniform(lo, hi, 2) * [h, w]
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            m = _shape_mask(kind, cy, cx, sh / 2, sw / 2, h, w)
            if occ.color_mode == "solid":
                img[m] = _occluder_color(rng)
            else:
                c1, c2 = _occluder_color(rng), _occluder_color(rng)
                yy, xx = np.mgrid[0:h, 0:w]
                stripe = ((xx + yy) // 4) % 2 == 0
                img[m & stripe] = c1
                img[m & ~stripe] = c2
            shape_union |= m
            if shape_union.mean() >= occ.coverage - occ.tolerance / 2:
                break
        out = to_uint8(img)
        mask = np.any(out != clean, axis=2)
        if abs(mask.mean() - occ.coverage) <= occ.tolerance:
            return out, mask
    raise SceneSpecError(f"could not reach coverage {occ.coverage:.2f} within tolerance")


def generate_scene(spec: SceneSpec, seed: int) -> SyntheticScene:
    spec.validate()
    rng = np.random.default_rng(seed)
    gt = gt_field(spec, rng)
    cams = ring_cameras(spec)
    clean = np.stack([to_uint8(render_field(gt, c)) for c in cams])
    images, masks = clean.copy(), np.zeros(clean.shape[:3], bool)
    if spec.occluders.coverage > 0:
        for v in range(spec.n_views):
            images[v], masks[v] = _occlude_view(clean[v], rng, spec.occluders)
        # a static pixel must be visible in at least one view
        while np.logical_and.reduce(masks).any():
            v = int(rng.integers(spec.n_views))
            images[v], masks[v] = _occlude_view(clean[v], rng, spec.occluders)
    pick = rng.choice(len(gt["mu"]), size=spec.n_points, replace=spec.n_points > len(gt["mu"]))
    pts = gt["mu"][pick] + rng.normal(0, 0.02, (spec.n_points, 3))
    cols = np.clip(SH_C0 * gt["sh"][pick, 0] + 0.5 + rng.normal(0, 0.03, (spec.n_points, 3)), 0, 1)
    return SyntheticScene(spec, seed, gt, cams, clean, images, masks, np.concatenate([pts, cols], 1))


# -- I/O -------------------------------------------------------------------

def _write_png(path: Path, arr: np.ndarray):
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def write_cameras(path: Path, cams: list[Camera]):
    lines = [f"format_version={FORMAT_VERSION}",
             "# id width height fx fy cx cy m00 m01 m02 m03 m10 ... m33 (world_to_camera, row-major)"]
    for i, c in enumerate(cams):
        vals = [c.fx, c.fy, c.cx, c.cy] + list(c.world_to_camera.ravel())
        lines.append(" ".join([str(i), str(c.width), str(c.height)] + [repr(float(v)) for v in vals]))
    path.write_text("\n".join(lines) + "\n")


def read_cameras(path: Path) -> list[Camera]:
    cams = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#") or line.startswith("format_version"):
            continue
        p = line.split()
        w, h = int(p[1]), int(p[2])
        fx, fy, cx, cy = (float(v) for v in p[3:7])
        m = np.array([float(v) for v in p[7:23]]).reshape(4, 4)
        cams.append(Camera(m, fx, fy, cx, cy, w, h))
    return cams


def save_scene(scene: SyntheticScene, root) -> Path:
    root = Path(root)
    for sub in ("images", "clean", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "spec.txt").write_text("\n".join(scene.spec.to_lines() + [f"seed={scene.seed}"]) + "\n")
    write_cameras(root / "cameras.txt", scene.cameras)
    pts = [f"format_version={FORMAT_VERSION}", "# x y z r g b"]
    pts += [" ".join(repr(float(v)) for v in row) for row in scene.points]
    (root / "points.txt").write_text("\n".join(pts) + "\n")
    for v in range(len(scene.cameras)):
        _write_png(root / "images" / f"{v:04d}.png", scene.images[v])
        _write_png(root / "clean" / f"{v:04d}.png", scene.clean[v])
        _write_png(root / "masks" / f"{v:04d}.png", scene.masks[v].astype(np.uint8) * 255)
    return root


@dataclass
class Dataset:
    """A scene as read back from disk; images are float in [0, 1]."""

    root: Path
    spec: SceneSpec
    cameras: list
    images: np.ndarray
    clean: np.ndarray | None
    masks: np.ndarray | None
    points: np.ndarray
    holdout_every: int = 8

    @property
    def n_views(self):
        return len(self.cameras)

    @property
    def test_ids(self) -> list[int]:
        return list(range(0, self.n_views, self.holdout_every))

    @property
    def train_ids(self) -> list[int]:
        return [v for v in range(self.n_views) if v % self.holdout_every != 0]

    @property
    def extent(self) -> float:
        centers = np.stack([c.center for c in self.cameras])
        return float(1.1 * np.linalg.norm(centers - centers.mean(0), axis=1).max())


def _read_dir(d: Path):
    files = sorted(d.glob("*.png")) if d.exists() else []
    return [np.asarray(Image.open(f)) for f in files]


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "cameras.txt").exists():
        raise FileNotFoundError(f"{root} has no cameras.txt")
    spec_lines = (root / "spec.txt").read_text().splitlines() if (root / "spec.txt").exists() else []
    spec = SceneSpec.from_lines(spec_lines)
    cams = read_cameras(root / "cameras.txt")
    images = np.stack(_read_dir(root / "images")).astype(np.float64) / 255.0
    clean = _read_dir(root / "clean")
    masks = _read_dir(root / "masks")
    rows = [line.split() for line in (root / "points.txt").read_text().splitlines()
            if line and not line.startswith(("#", "format_version"))] if (root / "points.txt").exists() else []
    points = np.array(rows, dtype=np.float64).reshape(-1, 6)
    if len(images) != len(cams):
        raise ValueError(f"{len(images)} images but {len(cams)} cameras")
    return Dataset(root, spec, cams, images,
                   np.stack(clean).astype(np.float64) / 255.0 if clean else None,
                   np.stack(masks) > 127 if masks else None, points)
