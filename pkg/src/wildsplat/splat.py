"""Gaussian primitives, covariance construction, SH colour and EWA projection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
NEAR_PLANE = 0.01
LOWPASS = 0.3
CULL_SIGMA = 3.0


@dataclass
class StaticGaussians:
    """Structure-of-arrays static field.  All attributes are learnable tensors."""

    mu: Tensor            # (N, 3)
    log_scale: Tensor     # (N, 3)
    rot: Tensor           # (N, 4) quaternion (w, x, y, z)
    opacity_logit: Tensor  # (N,)
    sh: Tensor            # (N, 4, 3)
    uncert_logit: Tensor  # (N,)

    FIELDS = ("mu", "log_scale", "rot", "opacity_logit", "sh", "uncert_logit")

    def __len__(self):
        return self.mu.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in self.FIELDS}

    @property
    def opacity(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logit.data))

    @property
    def uncertainty(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.uncert_logit.data))

    @classmethod
    def from_arrays(cls, **arrays):
        return cls(**{k: Tensor(np.array(arrays[k]), requires_grad=True, name=k) for k in cls.FIELDS})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k).data for k in self.FIELDS}

    def normalize_rotations(self):
        q = self.rot.data
        q /= np.linalg.norm(q, axis=1, keepdims=True)


@dataclass
class TransientSeeds:
    """Shared transient seed set; colours come from the colour network plus a per-seed bias."""

    mu: Tensor
    log_scale: Tensor
    rot: Tensor
    opacity_logit: Tensor
    color_bias: Tensor    # (N, 3)

    FIELDS = ("mu", "log_scale", "rot", "opacity_logit", "color_bias")

    def __len__(self):
        return self.mu.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in self.FIELDS}

    @classmethod
    def from_arrays(cls, **arrays):
        return cls(**{k: Tensor(np.array(arrays[k]), requires_grad=True, name=k) for k in cls.FIELDS})

    def normalize_rotations(self):
        q = self.rot.data
        q /= np.linalg.norm(q, axis=1, keepdims=True)


@dataclass
class Camera:
    world_to_camera: np.ndarray  # (4, 4)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        r = self.rotation
        if not (np.allclose(r @ r.T, np.eye(3), atol=1e-6) and np.linalg.det(r) > 0):
            raise ValueError("camera rotation must be orthonormal with determinant +1")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None):
        """Camera at ``eye`` looking at ``target``; +x right, +y down, +z forward."""
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        r = np.stack([x, y, z])
        m = np.eye(4)
        m[:3, :3] = r
        m[:3, 3] = -r @ eye
        cx = (width - 1) / 2 if cx is None else cx
        cy = (height - 1) / 2 if cy is None else cy
        return cls(m, fx, fy, cx, cy, width, height)


@dataclass
class Projection:
    """Screen-space Gaussians for one view (only the visible subset).

    ``source_ids`` index the originating field.
    """

    mean2d: Tensor   # (K, 2)
    cov2d: Tensor    # (K, 2, 2)
    depth: np.ndarray  # (K,)
    color: Tensor    # (K, C)
    alpha: Tensor    # (K,)
    source_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.depth)


def quat_to_rotmat(q: Tensor) -> Tensor:
    """Rotation matrices (N, 3, 3) from unit quaternions (w, x, y, z)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return dc.stack([dc.stack(r, axis=1) for r in rows], axis=1)


def normalize_quat(q: Tensor) -> Tensor:
    return q / dc.sqrt((q * q).sum(axis=1, keepdims=True))


def covariance3d(log_scale: Tensor, rot: Tensor) -> Tensor:
    """Sigma = R S S^T R^T, batched."""
    m = quat_to_rotmat(rot) * dc.exp(log_scale).reshape(-1, 1, 3)
    return m @ dc.swapaxes(m, 1, 2)


def eval_sh(sh: Tensor, dirs: Tensor) -> Tensor:
    """Degree <= 1 SH colour with the +0.5 offset; not clamped here."""
    x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
    return (SH_C0 * sh[:, 0] + 0.5
            - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3])


def _visible(mean2d, cov2d, depth, cam):
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    r = CULL_SIGMA * np.sqrt(lam)
    inside = ((mean2d[:, 0] + r >= -0.5) & (mean2d[:, 0] - r <= cam.width - 0.5)
              & (mean2d[:, 1] + r >= -0.5) & (mean2d[:, 1] - r <= cam.height - 0.5))
    return (depth > NEAR_PLANE) & inside


def project_means(mu: Tensor, cam: Camera):
    """Camera-space positions and pixel means; returns (t_cam, mean2d)."""
    r = Tensor(cam.rotation.astype(mu.dtype))
    t = mu @ r.T + Tensor(cam.translation.astype(mu.dtype))
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    return t, dc.stack([u, v], axis=1)


def project(mu: Tensor, cov3d: Tensor, color: Tensor, alpha: Tensor, cam: Camera) -> Projection:
    """EWA-project Gaussians; culled ones are dropped from the result.

    Culling (depth <= near plane, or 3-sigma ellipse outside the image) is
    decided on forward values before any differentiable work on the subset.
    """
    t_np = mu.data @ cam.rotation.T + cam.translation
    z_np = t_np[:, 2]
    front = np.nonzero(z_np > NEAR_PLANE)[0]
    mu_f, cov_f = dc.getitem(mu, front), dc.getitem(cov3d, front)
    t, mean2d = project_means(mu_f, cam)
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    zero = Tensor(np.zeros(len(front), dtype=mu.dtype))
    inv_z = 1.0 / z
    jac = dc.stack([
        dc.stack([cam.fx * inv_z, zero, -cam.fx * x * inv_z * inv_z], axis=1),
        dc.stack([zero, cam.fy * inv_z, -cam.fy * y * inv_z * inv_z], axis=1),
    ], axis=1)
    w = Tensor(cam.rotation.astype(mu.dtype))
    jw = jac @ w
    cov2d = jw @ cov_f @ dc.swapaxes(jw, 1, 2) + Tensor(LOWPASS * np.eye(2, dtype=mu.dtype))
    keep = np.nonzero(_visible(mean2d.data, cov2d.data, z.data, cam))[0]
    ids = front[keep]
    return Projection(
        mean2d=dc.getitem(mean2d, keep),
        cov2d=dc.getitem(cov2d, keep),
        depth=z.data[keep].copy(),
        color=dc.getitem(color, ids),
        alpha=dc.getitem(alpha, ids),
        source_ids=ids,
    )


def view_dirs(mu: Tensor, cam: Camera) -> Tensor:
    d = mu - Tensor(cam.center.astype(mu.dtype))
    return d / dc.sqrt((d * d).sum(axis=1, keepdims=True))


def project_static(field: StaticGaussians, cam: Camera) -> Projection:
    cov = covariance3d(field.log_scale, normalize_quat(field.rot))
    color = eval_sh(field.sh, view_dirs(field.mu, cam))
    return project(field.mu, cov, color, dc.sigmoid(field.opacity_logit), cam)
