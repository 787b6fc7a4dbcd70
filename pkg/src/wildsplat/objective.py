"""Loss terms: mask composition, L1, D-SSIM, BCE, stage losses and the
uncertainty loss."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .raster import coverage_matrix, rasterize
from .splat import Projection

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PROB_EPS = 1e-6


@dataclass
class LossWeights:
    lambda_dssim: float = 0.2
    lambda0: float = 3e-2
    lambda1: float = 5e-4

    def __post_init__(self):
        if min(self.lambda_dssim, self.lambda0, self.lambda1) < 0:
            raise ValueError("loss weights must be non-negative")


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x) if dtype is None else np.asarray(x, dtype=dtype))


def compose(i_d, i_s, m) -> Tensor:
    """m * I_d + (1 - m) * I_s with an (H, W) mask broadcast over channels."""
    i_d, i_s = _t(i_d), _t(i_s)
    m = _t(m, i_s)
    m = m.reshape(m.shape + (1,))
    return m * i_d + (1.0 - m) * i_s


def l1(a, b) -> Tensor:
    a = _t(a)
    return dc.absolute(a - _t(b, a)).mean()


@lru_cache(maxsize=16)
def _blur_matrix(n: int, size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Row-normalised banded Gaussian filter; windows cropped at the border."""
    half = size // 2
    idx = np.arange(n)
    d = idx[:, None] - idx[None, :]
    k = np.where(np.abs(d) <= half, np.exp(-(d ** 2) / (2 * sigma ** 2)), 0.0)
    return k / k.sum(axis=1, keepdims=True)


def _blur(x: Tensor) -> Tensor:
    """x: (C, H, W)."""
    a = Tensor(_blur_matrix(x.shape[1]).astype(x.dtype))
    b = Tensor(_blur_matrix(x.shape[2]).T.astype(x.dtype))
    return a @ x @ b


def ssim(a, b) -> Tensor:
    """Mean SSIM of two (H, W, C) images, 11x11 Gaussian window, sigma 1.5."""
    a = _t(a)
    b = _t(b, a)
    a = dc.transpose(a, (2, 0, 1))
    b = dc.transpose(b, (2, 0, 1))
    mu_a, mu_b = _blur(a), _blur(b)
    s_aa = _blur(a * a) - mu_a * mu_a
    s_bb = _blur(b * b) - mu_b * mu_b
    s_ab = _blur(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * s_ab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (s_aa + s_bb + SSIM_C2)
    return (num / den).mean()


def dssim(a, b) -> Tensor:
    return (1.0 - ssim(a, b)) * 0.5


def bce(p, target) -> Tensor:
    """Binary cross-entropy with probabilities clamped to [1e-6, 1 - 1e-6]."""
    p = dc.clip(_t(p), PROB_EPS, 1.0 - PROB_EPS)
    y = _t(target, p)
    return -(y * dc.log(p) + (1.0 - y) * dc.log(1.0 - p)).mean()


def photometric(render, gt, w: LossWeights) -> Tensor:
    return (1.0 - w.lambda_dssim) * l1(render, gt) + w.lambda_dssim * dssim(render, gt)


def loss_init(i_s, i_gt, w: LossWeights = LossWeights()) -> Tensor:
    """Static render alone against the full image."""
    return photometric(i_s, i_gt, w)


def loss_total(i_composed, i_gt, m_o, m_s, w: LossWeights = LossWeights()) -> Tensor:
    m_o = _t(m_o)
    return (photometric(i_composed, i_gt, w) + w.lambda0 * bce(m_o, m_s)
            + w.lambda1 * (m_o * m_o).mean())


def loss_mid(i_composed, i_gt, m_o, m_s, i_d, w: LossWeights = LossWeights(),
             complement: bool = True) -> Tensor:
    """``loss_total`` plus an L1 on the transient render restricted to
    ``1 - m_s`` (or to ``m_s`` with ``complement=False``)."""
    ms = np.asarray(m_s, dtype=np.float64)
    gate = (1.0 - ms) if complement else ms
    i_d = _t(i_d)
    gate = Tensor(gate[..., None].astype(i_d.dtype))
    gt = _t(i_gt, i_d)
    return loss_total(i_composed, i_gt, m_o, m_s, w) + l1(i_d * gate, gt * gate)


def render_uncertainty(proj: Projection, uncertainty: Tensor, m_s, height: int, width: int,
                       gate_by_mask: bool = False, literal_sum: bool = False) -> Tensor:
    """Per-pixel uncertainty of the static field, (H, W).

    ``uncertainty`` holds per-Gaussian values in (0, 1) indexed by
    ``proj.source_ids``.  By default the values are composited with the same
    blending weights as colour; ``literal_sum`` instead sums them over every
    Gaussian covering the pixel.  Only the uncertainty values receive gradient.
    """
    l = dc.getitem(uncertainty, proj.source_ids)
    if literal_sum:
        cover = coverage_matrix(proj, height, width).astype(l.dtype)
        out = (l.reshape(1, -1) @ Tensor(cover)).reshape(height, width)
    else:
        frozen = Projection(dc.stop_gradient(proj.mean2d), dc.stop_gradient(proj.cov2d), proj.depth,
                            l.reshape(-1, 1), dc.stop_gradient(proj.alpha), proj.source_ids)
        out = rasterize(frozen, height, width, [0.0]).raw.reshape(height, width)
    if gate_by_mask:
        out = out * Tensor(np.asarray(m_s, dtype=out.dtype))
    return out


def loss_t(uncert_map: Tensor, m_s) -> Tensor:
    return bce(uncert_map, np.asarray(m_s, dtype=np.float64))
