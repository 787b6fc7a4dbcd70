"""Learned transient mask, SLIC-style superpixels and superpixel-aware refinement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab

from . import diffcore as dc
from .diffcore import Tensor

_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


class MaskNetwork:
    """Compact U-Net: three stride-2 stages (8 -> 16 -> 32 channels), three
    nearest-upsample stages with skip connections, sigmoid head."""

    in_channels = 6

    def __init__(self, rng, dtype=np.float32, weight_scale=1.0, init_prob=0.5):
        def conv(cin, cout, k=3, scale=1.0):
            w = rng.normal(0.0, scale * np.sqrt(2.0 / (cin * k * k)), (cout, cin, k, k))
            return (Tensor(w.astype(dtype), requires_grad=True),
                    Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))

        s = weight_scale
        self.layers = {
            "stem": conv(self.in_channels, 8, scale=s),
            "down1": conv(8, 16, scale=s),
            "down2": conv(16, 32, scale=s),
            "down3": conv(32, 32, scale=s),
            "up3": conv(64, 32, scale=s),
            "up2": conv(48, 16, scale=s),
            "up1": conv(24, 8, scale=s),
            "head": conv(8, 1, k=1, scale=0.1 * s),
        }
        # start the mask near init_prob everywhere
        self.layers["head"][1].data[...] = np.log(init_prob / (1.0 - init_prob))

    def parameters(self) -> list[Tensor]:
        return [t for pair in self.layers.values() for t in pair]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for k, (w, b) in self.layers.items():
            out[f"{k}.w"], out[f"{k}.b"] = w, b
        return out

    def _conv(self, name, x, stride=1):
        w, b = self.layers[name]
        return dc.relu(dc.conv2d(x, w, b, stride=stride, padding=w.shape[-1] // 2))

    def __call__(self, x: Tensor) -> Tensor:
        """x: (C, H, W) -> (H, W) mask in (0, 1)."""
        c, h, w = x.shape
        ph, pw = (-h) % 8, (-w) % 8
        x = x.reshape(1, c, h, w)
        if ph or pw:
            x = dc.pad2d(x, ph, pw)
        e0 = self._conv("stem", x)
        e1 = self._conv("down1", e0, 2)
        e2 = self._conv("down2", e1, 2)
        e3 = self._conv("down3", e2, 2)
        d2 = self._conv("up3", dc.concat([dc.upsample_nearest2x(e3), e2], axis=1))
        d1 = self._conv("up2", dc.concat([dc.upsample_nearest2x(d2), e1], axis=1))
        d0 = self._conv("up1", dc.concat([dc.upsample_nearest2x(d1), e0], axis=1))
        hw, hb = self.layers["head"]
        logits = dc.conv2d(d0, hw, hb)
        return dc.sigmoid(logits[0, 0, :h, :w])


def mask_inputs(gt: np.ndarray, static_render: np.ndarray) -> Tensor:
    """Ground truth plus the absolute static-render residual, channels first."""
    res = np.abs(gt - static_render)
    return Tensor(np.concatenate([gt, res], axis=2).transpose(2, 0, 1).copy())


def predict_mask(net: MaskNetwork, gt: np.ndarray, static_render: np.ndarray) -> Tensor:
    return net(mask_inputs(gt.astype(net.layers["stem"][0].dtype),
                           static_render.astype(net.layers["stem"][0].dtype)))


@dataclass
class SuperpixelLabels:
    labels: np.ndarray  # (H, W) int
    n_segments: int


@dataclass
class MaskPair:
    m_o: np.ndarray
    m_o_star: np.ndarray
    m_s: np.ndarray
    rho: np.ndarray
    labels: np.ndarray


def _grid(n, h, w):
    rows = max(1, min(h, int(round(np.sqrt(n * h / w)))))
    cols = max(1, min(w, int(round(n / rows))))
    ys = (np.arange(rows) + 0.5) * h / rows - 0.5
    xs = (np.arange(cols) + 0.5) * w / cols - 0.5
    return np.array([(y, x) for y in ys for x in xs])


def _assign(feat, yx, centers, spatial_w):
    """Nearest centre in joint (colour, scaled position) space."""
    d_col = ((feat[:, None, :] - centers[None, :, 2:]) ** 2).sum(-1)
    d_pos = ((yx[:, None, :] - centers[None, :, :2]) ** 2).sum(-1)
    return np.argmin(d_col + spatial_w * d_pos, axis=1)


def superpixels(image: np.ndarray, n: int, compactness: float = 10.0, iterations: int = 10) -> SuperpixelLabels:
    """k-means over (Lab colour, position) from grid-placed centres, then
    reassign every non-primary connected piece of a label to its neighbour."""
    h, w = image.shape[:2]
    if n < 1:
        raise ValueError("segment count must be >= 1")
    if n > h * w:
        raise ValueError(f"cannot make {n} segments from {h * w} pixels")
    lab = rgb2lab(np.clip(image[..., :3], 0, 1).astype(np.float64)).reshape(-1, 3)
    yy, xx = np.mgrid[0:h, 0:w]
    yx = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    grid = _grid(n, h, w)
    step = np.sqrt(h * w / len(grid))
    spatial_w = (compactness / step) ** 2
    gi = np.clip(np.round(grid).astype(int), 0, [h - 1, w - 1])
    centers = np.concatenate([grid, lab.reshape(h, w, 3)[gi[:, 0], gi[:, 1]]], axis=1)
    assign = None
    for _ in range(iterations):
        new = _assign(lab, yx, centers, spatial_w)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for k in range(len(centers)):
            sel = assign == k
            if sel.any():
                centers[k, :2] = yx[sel].mean(0)
                centers[k, 2:] = lab[sel].mean(0)
    labels = _enforce_connectivity(assign.reshape(h, w), lab.reshape(h, w, 3))
    return SuperpixelLabels(labels, int(labels.max()) + 1)


def _enforce_connectivity(labels, lab):
    out = -np.ones_like(labels)
    next_id = 0
    orphans = []
    for k in np.unique(labels):
        comp, n = ndimage.label(labels == k, structure=_FOUR)
        if n == 0:
            continue
        sizes = ndimage.sum(np.ones_like(comp), comp, index=np.arange(1, n + 1))
        keep = int(np.argmax(sizes)) + 1
        out[comp == keep] = next_id
        next_id += 1
        orphans.extend(comp == i for i in range(1, n + 1) if i != keep)
    # orphans join the adjacent segment with the closest mean colour. Merges
    # are committed best-first, one at a time: an orphan whose natural home is
    # another, still unassigned orphan would otherwise be pushed across an edge
    rings = [ndimage.binary_dilation(r, structure=_FOUR) & ~r for r in orphans]
    cols = [lab[r].mean(0) for r in orphans]
    while orphans:
        best = None
        for i, ring in enumerate(rings):
            for k in np.unique(out[ring]):
                if k < 0:
                    continue
                dist = float(np.sum((lab[out == k].mean(0) - cols[i]) ** 2))
                if best is None or dist < best[0]:
                    best = (dist, i, k)
        if best is None:
            raise RuntimeError("orphan regions with no labelled neighbour")
        _, i, k = best
        out[orphans.pop(i)] = k
        del rings[i], cols[i]
    _, relabel = np.unique(out, return_inverse=True)
    return relabel.reshape(out.shape)


def coverage_ratio(labels: np.ndarray, m_o_star: np.ndarray) -> np.ndarray:
    """Fraction of each segment's pixels set in the binary mask."""
    labels = np.asarray(labels).ravel()
    n = int(labels.max()) + 1 if labels.size else 0
    size = np.bincount(labels, minlength=n)
    hit = np.bincount(labels, weights=np.asarray(m_o_star, dtype=np.float64).ravel(), minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(size > 0, hit / np.maximum(size, 1), 0.0)


def refine_mask(labels: np.ndarray, m_o_star: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Fill majority-masked segments solid; leave the rest pixelwise."""
    labels = np.asarray(labels)
    m = np.asarray(m_o_star).astype(bool)
    n = len(rho)
    seg_max = np.zeros(n, dtype=bool)
    np.logical_or.at(seg_max, labels.ravel(), m.ravel())
    full = (np.asarray(rho) >= 0.5) & seg_max
    return np.where(full[labels], True, m)


def build_mask_pair(m_o: np.ndarray, labels: np.ndarray) -> MaskPair:
    m_o_star = m_o > 0.5
    rho = coverage_ratio(labels, m_o_star)
    return MaskPair(m_o, m_o_star, refine_mask(labels, m_o_star, rho), rho, labels)
