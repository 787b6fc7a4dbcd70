"""Image and mask quality measures on plain arrays."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .objective import SSIM_C1, SSIM_C2, _blur_matrix

BOUNDARY_TOLERANCE = 2.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; ``inf`` when identical."""
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


def ssim_np(a: np.ndarray, b: np.ndarray) -> float:
    """Same windowing as the differentiable loss, evaluated in float64."""
    a = np.asarray(a, np.float64).transpose(2, 0, 1)
    b = np.asarray(b, np.float64).transpose(2, 0, 1)
    rows, cols = _blur_matrix(a.shape[1]), _blur_matrix(a.shape[2]).T

    def blur(x):
        return rows @ x @ cols

    mu_a, mu_b = blur(a), blur(b)
    s_aa = blur(a * a) - mu_a ** 2
    s_bb = blur(b * b) - mu_b ** 2
    s_ab = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * s_ab + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (s_aa + s_bb + SSIM_C2)
    return float(np.mean(num / den))


def iou(pred: np.ndarray, target: np.ndarray) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    p, t = np.asarray(pred, bool), np.asarray(target, bool)
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def _boundary(m: np.ndarray) -> np.ndarray:
    return m & ~ndimage.binary_erosion(m, border_value=1)


def boundary_f(pred: np.ndarray, target: np.ndarray, tolerance: float = BOUNDARY_TOLERANCE) -> float:
    """F-score of boundary pixels matched within ``tolerance`` pixels."""
    bp, bt = _boundary(np.asarray(pred, bool)), _boundary(np.asarray(target, bool))
    if not bp.any() and not bt.any():
        return 1.0
    if not bp.any() or not bt.any():
        return 0.0
    dist_t = ndimage.distance_transform_edt(~bt)
    dist_p = ndimage.distance_transform_edt(~bp)
    precision = float(np.mean(dist_t[bp] <= tolerance))
    recall = float(np.mean(dist_p[bt] <= tolerance))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)
