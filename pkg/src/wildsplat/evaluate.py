"""Held-out evaluation of a trained state against a synthetic scene."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .maskgen import build_mask_pair, predict_mask, superpixels
from .metrics import boundary_f, iou, psnr, ssim_np
from .splat import Camera
from .trainer import TrainState, render_static
from .transient import per_view_baseline_bytes, transient_memory_bytes

REPORT_VERSION = 1
STATIC_FLOATS = 3 + 3 + 4 + 1 + 12 + 1   # mu, scale, rotation, opacity, SH, uncertainty
FLOAT_BYTES = 4


@dataclass
class EvalReport:
    view_psnr: dict[int, float] = field(default_factory=dict)
    view_ssim: dict[int, float] = field(default_factory=dict)
    mask_iou: dict[int, float] = field(default_factory=dict)
    mask_bf: dict[int, float] = field(default_factory=dict)        # refined mask
    mask_bf_raw: dict[int, float] = field(default_factory=dict)    # binarised network mask
    static_bytes: int = 0
    transient_bytes: int = 0
    baseline_bytes: int = 0
    centroid_fraction: float = 0.0
    n_static: int = 0

    @staticmethod
    def _mean(d):
        return float(np.mean(list(d.values()))) if d else float("nan")

    @property
    def psnr(self):
        return self._mean(self.view_psnr)

    @property
    def ssim(self):
        return self._mean(self.view_ssim)

    @property
    def iou(self):
        return self._mean(self.mask_iou)

    @property
    def boundary_f(self):
        return self._mean(self.mask_bf)

    @property
    def boundary_f_raw(self):
        return self._mean(self.mask_bf_raw)

    _PER_VIEW = ("view_psnr", "view_ssim", "mask_iou", "mask_bf", "mask_bf_raw")
    _SCALARS = ("static_bytes", "transient_bytes", "baseline_bytes", "centroid_fraction", "n_static")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["format_version", REPORT_VERSION])
        w.writerow(["table", "view", "value"])
        for name in self._PER_VIEW:
            for v, x in sorted(getattr(self, name).items()):
                w.writerow([name, v, repr(float(x))])
        for name in self._SCALARS:
            w.writerow([name, "", repr(getattr(self, name))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][0] != "format_version" or int(rows[0][1]) != REPORT_VERSION:
            raise ValueError("unsupported report format")
        rep = cls()
        for name, view, value in rows[2:]:
            if name in cls._PER_VIEW:
                getattr(rep, name)[int(view)] = float(value)
            elif name in ("centroid_fraction",):
                setattr(rep, name, float(value))
            elif name in cls._SCALARS:
                setattr(rep, name, int(value))
            else:
                raise ValueError(f"unknown report row {name!r}")
        return rep

    def summary(self) -> str:
        lines = [
            f"format_version: {REPORT_VERSION}",
            f"held-out PSNR: {self.psnr:.3f} dB over {len(self.view_psnr)} views",
            f"held-out SSIM: {self.ssim:.4f}",
            f"mask IoU (refined): {self.iou:.4f} over {len(self.mask_iou)} views",
            f"mask boundary F (refined / raw): {self.boundary_f:.4f} / {self.boundary_f_raw:.4f}",
            f"static Gaussians: {self.n_static} ({self.static_bytes} bytes)",
            f"transient field: {self.transient_bytes} bytes; per-view baseline: {self.baseline_bytes} bytes",
            f"centroids inside occluders: {self.centroid_fraction:.4f}",
        ]
        return "\n".join(lines) + "\n"


def centroid_fraction(mu: np.ndarray, cameras: list[Camera], masks: np.ndarray, views) -> float:
    """Fraction of projected static centroids (in front of the camera and
    inside the image) that land on occluder pixels, pooled over ``views``."""
    inside = total = 0
    for v in views:
        cam = cameras[v]
        pc = mu @ cam.rotation.T + cam.translation
        front = pc[:, 2] > 0.01
        x = cam.fx * pc[front, 0] / pc[front, 2] + cam.cx
        y = cam.fy * pc[front, 1] / pc[front, 2] + cam.cy
        xi, yi = np.round(x).astype(int), np.round(y).astype(int)
        ok = (xi >= 0) & (xi < cam.width) & (yi >= 0) & (yi < cam.height)
        total += int(ok.sum())
        inside += int(masks[v][yi[ok], xi[ok]].sum())
    return inside / total if total else 0.0


def mask_pairs(state: TrainState, data, views, n_superpixels: int):
    """Final network mask and its superpixel refinement for each view."""
    out = {}
    for v in views:
        cam = data.cameras[v]
        render = render_static(state, cam, state.config.background)
        m_o = predict_mask(state.masknet, data.images[v], render).data
        out[v] = build_mask_pair(m_o, superpixels(data.images[v], n_superpixels).labels)
    return out


def evaluate(state: TrainState, data) -> EvalReport:
    if data.clean is None or data.masks is None:
        raise ValueError("evaluation needs clean images and ground-truth masks")
    cam0 = data.cameras[0]
    if data.clean.shape[1:3] != (cam0.height, cam0.width):
        raise ValueError(f"image size {data.clean.shape[1:3]} does not match camera {(cam0.height, cam0.width)}")
    rep = EvalReport()
    for v in data.test_ids:
        img = render_static(state, data.cameras[v], state.config.background)
        rep.view_psnr[v] = psnr(img, data.clean[v])
        rep.view_ssim[v] = ssim_np(img, data.clean[v])
    if state.config.pipeline == "full":
        for v, pair in mask_pairs(state, data, data.train_ids, state.config.n_superpixels).items():
            rep.mask_iou[v] = iou(pair.m_s, data.masks[v])
            rep.mask_bf[v] = boundary_f(pair.m_s, data.masks[v])
            rep.mask_bf_raw[v] = boundary_f(pair.m_o_star, data.masks[v])
    cfg = state.config
    n_seeds, n_views = len(state.seeds), len(state.embeddings)
    rep.n_static = len(state.static)
    rep.static_bytes = FLOAT_BYTES * STATIC_FLOATS * rep.n_static
    rep.transient_bytes = transient_memory_bytes(n_seeds, n_views, cfg.embed_dim, state.nets.n_params())
    rep.baseline_bytes = per_view_baseline_bytes(n_seeds, n_views)
    rep.centroid_fraction = centroid_fraction(state.static.mu.data.astype(np.float64), data.cameras,
                                              data.masks, data.train_ids)
    return rep
