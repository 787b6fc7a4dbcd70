"""Depth-sorted alpha compositing of screen-space Gaussians.

The fast path bins Gaussians into 16x16 tiles and composites front to back
with early termination; ``rasterize_reference`` is the dense brute-force
compositor used as its oracle.  The fast path is exposed to the autodiff
tape as one custom op whose backward is derived by hand.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .splat import Projection

TILE = 16
T_MIN = 1e-4
COVER_EPS = 1.0 / 255.0
# pixels where alpha * G would fall below this are skipped; keeps truncation
# error per Gaussian far below the 1e-4 oracle tolerance
SKIP_EPS = 1e-7


@dataclass
class RenderOutput:
    image: Tensor              # (H, W, C), clamped to [0, 1]
    raw: Tensor                # (H, W, C), before clamping
    alpha_map: np.ndarray      # (H, W)
    pixel_count: np.ndarray    # (K,) pixels covered per Gaussian
    contrib: np.ndarray        # (K,) summed blending weight per Gaussian
    source_ids: np.ndarray     # (K,)
    height: int
    width: int
    # filled by the backward pass of ``raw``
    grads: dict = field(default_factory=dict)

    @property
    def mean2d_grad(self) -> np.ndarray | None:
        return self.grads.get("mean2d")


# -- kernels ---------------------------------------------------------------

@numba.njit(cache=True)
def _bin_tiles(order, xmin, xmax, ymin, ymax, tiles_x, tiles_y):
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for g in order:
        if xmax[g] < xmin[g]:
            continue
        for ty in range(ymin[g], ymax[g] + 1):
            for tx in range(xmin[g], xmax[g] + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    items = np.empty(offsets[-1], dtype=np.int64)
    for g in order:
        if xmax[g] < xmin[g]:
            continue
        for ty in range(ymin[g], ymax[g] + 1):
            for tx in range(xmin[g], xmax[g] + 1):
                t = ty * tiles_x + tx
                items[fill[t]] = g
                fill[t] += 1
    return offsets, items


@numba.njit(cache=True)
def _forward(offsets, items, mean, conic, opac, qmax, color, bg, height, width, tiles_x):
    n, c = color.shape
    out = np.empty((height, width, c))
    final_t = np.empty((height, width))
    last = np.full((height, width), -1, dtype=np.int64)
    count = np.zeros(n, dtype=np.int64)
    contrib = np.zeros(n)
    for py in range(height):
        for px in range(width):
            tile = (py // 16) * tiles_x + px // 16
            t = 1.0
            acc = np.zeros(c)
            stop = -1
            for j in range(offsets[tile], offsets[tile + 1]):
                g = items[j]
                dx = px - mean[g, 0]
                dy = py - mean[g, 1]
                q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                if q > qmax[g]:
                    continue
                a = opac[g] * np.exp(-0.5 * q)
                if a > COVER_EPS:
                    count[g] += 1
                w = a * t
                for ch in range(c):
                    acc[ch] += w * color[g, ch]
                contrib[g] += w
                t *= 1.0 - a
                stop = j
                if t < T_MIN:
                    break
            for ch in range(c):
                out[py, px, ch] = acc[ch] + t * bg[ch]
            final_t[py, px] = t
            last[py, px] = stop
    return out, final_t, last, count, contrib


@numba.njit(cache=True)
def _backward(offsets, items, last, mean, conic, opac, qmax, color, bg, grad_out, height, width, tiles_x):
    n, c = color.shape
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_color = np.zeros((n, c))
    max_len = 0
    for tile in range(len(offsets) - 1):
        max_len = max(max_len, offsets[tile + 1] - offsets[tile])
    a_buf = np.empty(max_len)
    t_buf = np.empty(max_len)
    r = np.empty(c)
    for py in range(height):
        for px in range(width):
            stop = last[py, px]
            if stop < 0:
                continue
            tile = (py // 16) * tiles_x + px // 16
            start = offsets[tile]
            t = 1.0
            for j in range(start, stop + 1):
                g = items[j]
                dx = px - mean[g, 0]
                dy = py - mean[g, 1]
                q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                if q > qmax[g]:
                    a_buf[j - start] = -1.0
                    continue
                a = opac[g] * np.exp(-0.5 * q)
                a_buf[j - start] = a
                t_buf[j - start] = t
                t *= 1.0 - a
            for ch in range(c):
                r[ch] = bg[ch]
            for j in range(stop, start - 1, -1):
                a = a_buf[j - start]
                if a < 0.0:
                    continue
                g = items[j]
                tk = t_buf[j - start]
                w = a * tk
                ga = 0.0
                for ch in range(c):
                    gc = grad_out[py, px, ch]
                    g_color[g, ch] += gc * w
                    ga += gc * tk * (color[g, ch] - r[ch])
                    r[ch] = color[g, ch] * a + (1.0 - a) * r[ch]
                dx = px - mean[g, 0]
                dy = py - mean[g, 1]
                g_opac[g] += ga * a / opac[g]
                gp = ga * a  # d/d(power), power = -q/2
                qx = conic[g, 0] * dx + conic[g, 1] * dy
                qy = conic[g, 1] * dx + conic[g, 2] * dy
                g_mean[g, 0] += gp * qx
                g_mean[g, 1] += gp * qy
                g_conic[g, 0] += -0.5 * gp * dx * dx
                g_conic[g, 1] += -0.5 * gp * dx * dy
                g_conic[g, 2] += -0.5 * gp * dy * dy
    return g_mean, g_conic, g_opac, g_color


# -- setup -----------------------------------------------------------------

def _conics(cov):
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    bad = ~(det > 0) | ~(cov[:, 0, 0] > 0)
    det = np.where(bad, 1.0, det)
    conic = np.stack([cov[:, 1, 1] / det, -0.5 * (cov[:, 0, 1] + cov[:, 1, 0]) / det, cov[:, 0, 0] / det], axis=1)
    return conic, bad


def _prepare(mean, cov, opac, height, width):
    conic, bad = _conics(cov)
    with np.errstate(divide="ignore"):
        qmax = np.where(opac > SKIP_EPS, 2.0 * np.log(np.maximum(opac, SKIP_EPS) / SKIP_EPS), -1.0)
    qmax[bad] = -1.0
    rx = np.sqrt(np.maximum(qmax, 0.0) * np.abs(cov[:, 0, 0]))
    ry = np.sqrt(np.maximum(qmax, 0.0) * np.abs(cov[:, 1, 1]))
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    x0 = np.floor(mean[:, 0] - rx)
    x1 = np.ceil(mean[:, 0] + rx)
    y0 = np.floor(mean[:, 1] - ry)
    y1 = np.ceil(mean[:, 1] + ry)
    x0, x1 = np.clip(x0, 0, width - 1), np.clip(x1, -1, width - 1)
    y0, y1 = np.clip(y0, 0, height - 1), np.clip(y1, -1, height - 1)
    empty = (qmax < 0) | (x1 < x0) | (y1 < y0) | (mean[:, 0] + rx < 0) | (mean[:, 0] - rx > width - 1) \
        | (mean[:, 1] + ry < 0) | (mean[:, 1] - ry > height - 1)
    xmin = (x0 // TILE).astype(np.int64)
    xmax = np.where(empty, -1, x1 // TILE).astype(np.int64)
    ymin = (y0 // TILE).astype(np.int64)
    ymax = np.where(empty, -1, y1 // TILE).astype(np.int64)
    xmin[empty], ymin[empty] = 0, 0
    return conic, bad, qmax, xmin, xmax, ymin, ymax, tiles_x, tiles_y


def depth_order(depth: np.ndarray) -> np.ndarray:
    """Global front-to-back order; ties broken by index for determinism."""
    return np.lexsort((np.arange(len(depth)), depth)).astype(np.int64)


def rasterize(proj: Projection, height: int, width: int, background) -> RenderOutput:
    """Composite a projection; the returned ``raw`` tensor is differentiable
    in mean2d, cov2d, color and alpha."""
    dtype = proj.mean2d.dtype
    bg = np.asarray(background, dtype=np.float64).reshape(-1)
    n = len(proj)
    channels = proj.color.shape[1] if n else len(bg)
    if n == 0:
        img = np.broadcast_to(bg, (height, width, channels)).astype(dtype)
        raw = Tensor(img)
        return RenderOutput(dc.clip(raw, 0.0, 1.0), raw, np.zeros((height, width)),
                            np.zeros(0, np.int64), np.zeros(0), proj.source_ids, height, width)
    mean = proj.mean2d.data.astype(np.float64)
    cov = proj.cov2d.data.astype(np.float64)
    opac = proj.alpha.data.astype(np.float64)
    color = np.ascontiguousarray(proj.color.data, dtype=np.float64)
    conic, bad, qmax, xmin, xmax, ymin, ymax, tiles_x, tiles_y = _prepare(mean, cov, opac, height, width)
    order = depth_order(proj.depth)
    offsets, items = _bin_tiles(order, xmin, xmax, ymin, ymax, tiles_x, tiles_y)
    img, final_t, last, count, contrib = _forward(offsets, items, mean, conic, opac, qmax, color, bg,
                                                  height, width, tiles_x)
    grads: dict = {}

    def backward(g):
        gm, gq, go, gc = _backward(offsets, items, last, mean, conic, opac, qmax, color, bg,
                                   np.ascontiguousarray(g, dtype=np.float64), height, width, tiles_x)
        # d/dSigma = -Q^T (dL/dQ) Q^T with Q the conic
        gQ = np.stack([np.stack([gq[:, 0], gq[:, 1]], 1), np.stack([gq[:, 1], gq[:, 2]], 1)], 1)
        q = np.stack([np.stack([conic[:, 0], conic[:, 1]], 1), np.stack([conic[:, 1], conic[:, 2]], 1)], 1)
        gcov = -q @ gQ @ q
        gcov[bad] = 0.0
        grads.update(mean2d=gm, cov2d=gcov, color=gc, alpha=go)
        return gm.astype(dtype), gcov.astype(dtype), gc.astype(dtype), go.astype(dtype)

    raw = dc.custom_op("rasterize", (proj.mean2d, proj.cov2d, proj.color, proj.alpha), img.astype(dtype), backward)
    return RenderOutput(dc.clip(raw, 0.0, 1.0), raw, 1.0 - final_t, count, contrib, proj.source_ids,
                        height, width, grads)


def rasterize_reference(mean, cov, opac, color, depth, height, width, background):
    """Dense brute-force compositor: every Gaussian at every pixel, no early
    termination, same global depth order.  Returns (image, alpha_map)."""
    mean, cov, opac, color = (np.asarray(a, dtype=np.float64) for a in (mean, cov, opac, color))
    bg = np.asarray(background, dtype=np.float64).reshape(-1)
    ys, xs = np.mgrid[0:height, 0:width]
    img = np.zeros((height, width, color.shape[1] if len(color) else len(bg)))
    t = np.ones((height, width))
    for g in depth_order(np.asarray(depth)):
        inv = np.linalg.inv(cov[g])
        dx, dy = xs - mean[g, 0], ys - mean[g, 1]
        q = inv[0, 0] * dx * dx + (inv[0, 1] + inv[1, 0]) * dx * dy + inv[1, 1] * dy * dy
        a = opac[g] * np.exp(-0.5 * q)
        img += (a * t)[..., None] * color[g]
        t = t * (1.0 - a)
    return img + t[..., None] * bg, 1.0 - t


def coverage_matrix(proj: Projection, height: int, width: int) -> np.ndarray:
    """(K, H*W) indicator of alpha * G > 1/255, ignoring occlusion."""
    mean = proj.mean2d.data.astype(np.float64)
    conic, _ = _conics(proj.cov2d.data.astype(np.float64))
    opac = proj.alpha.data.astype(np.float64)
    ys, xs = np.mgrid[0:height, 0:width]
    dx = xs.reshape(1, -1) - mean[:, :1]
    dy = ys.reshape(1, -1) - mean[:, 1:]
    q = conic[:, :1] * dx * dx + 2 * conic[:, 1:2] * dx * dy + conic[:, 2:] * dy * dy
    return opac[:, None] * np.exp(-0.5 * q) > COVER_EPS


def positional_gradient_norms(renders: list[RenderOutput], n_total: int):
    """Average screen-space positional gradient and pixel-coverage fraction
    per Gaussian over a window of renders whose backward has run.

    Returns (grad (n_total, 2), coverage (n_total,)).  Averages are taken over
    the renders in which a Gaussian was visible; never-visible ones get zeros.
    """
    grad = np.zeros((n_total, 2))
    cover = np.zeros(n_total)
    seen = np.zeros(n_total)
    for r in renders:
        if r.mean2d_grad is None:
            raise ValueError("render has no backward state; call backward first")
        ids = r.source_ids
        np.add.at(grad, ids, r.mean2d_grad)
        np.add.at(cover, ids, r.pixel_count / float(r.height * r.width))
        np.add.at(seen, ids, 1.0)
    nz = seen > 0
    grad[nz] /= seen[nz, None]
    cover[nz] /= seen[nz]
    return grad, cover
