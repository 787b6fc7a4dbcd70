"""Adaptive density control for the static field.

Two policies share one code path: ``adc`` is the classic clone/split/prune
schedule, ``uad`` additionally shifts new Gaussians along the accumulated
descent direction (scaled by pixel coverage and parent size) and prunes
Gaussians whose learned uncertainty exceeds a threshold.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .splat import Camera

SPLIT_CHILDREN = 2
SPLIT_SHRINK = 1.6


@dataclass
class DensifyThresholds:
    grad: float = 2e-4
    scale: float = 0.01      # absolute scene units (caller scales by extent)
    opacity: float = 0.005
    uncertainty: float = 0.9
    budget: int = 2000


@dataclass
class DensifyStats:
    """Per-Gaussian running sums since the last densification event."""

    grad_norm: np.ndarray
    coverage: np.ndarray
    count: np.ndarray
    view_grad: np.ndarray    # (N, V, 2) summed screen gradients per view
    view_cover: np.ndarray   # (N, V) summed coverage fractions per view

    @classmethod
    def empty(cls, n: int, n_views: int):
        return cls(np.zeros(n), np.zeros(n), np.zeros(n, dtype=np.int64),
                   np.zeros((n, n_views, 2)), np.zeros((n, n_views)))

    def reset(self, n: int | None = None):
        n = len(self.grad_norm) if n is None else n
        fresh = DensifyStats.empty(n, self.view_cover.shape[1])
        self.__dict__.update(fresh.__dict__)

    @property
    def mean_grad_norm(self) -> np.ndarray:
        return np.where(self.count > 0, self.grad_norm / np.maximum(self.count, 1), 0.0)

    @property
    def mean_coverage(self) -> np.ndarray:
        return np.where(self.count > 0, self.coverage / np.maximum(self.count, 1), 0.0)

    def descent_direction(self):
        """(dominant view per Gaussian, unit screen-space descent direction)."""
        dom = np.argmax(self.view_cover, axis=1)
        g = self.view_grad[np.arange(len(dom)), dom]
        # hypot does not underflow, so any nonzero gradient gives a unit vector
        norm = np.hypot(g[:, :1], g[:, 1:])
        return dom, -np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)


def accumulate(stats: DensifyStats, grad2d: np.ndarray, coverage: np.ndarray,
               ids: np.ndarray, view: int) -> DensifyStats:
    """Fold one view's screen gradients and coverage into the running sums."""
    ids = np.asarray(ids)
    np.add.at(stats.grad_norm, ids, np.linalg.norm(grad2d, axis=1))
    np.add.at(stats.coverage, ids, coverage)
    np.add.at(stats.count, ids, 1)
    np.add.at(stats.view_grad[:, view], ids, grad2d)
    np.add.at(stats.view_cover[:, view], ids, coverage)
    return stats


@dataclass
class DensifyResult:
    arrays: dict[str, np.ndarray]
    origin: np.ndarray          # per new row: source row in the old field, or -1 if newly created
    ids: np.ndarray             # persistent Gaussian ids
    events: list[dict] = field(default_factory=list)


def _quat_rotmat(q):
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], 1)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def shift_vectors(stats: DensifyStats, max_scale: np.ndarray, cameras: list[Camera]) -> np.ndarray:
    """World-space shift: descent direction (back-projected through the view
    with the largest accumulated coverage) * mean coverage * max scale."""
    dom, d2 = stats.descent_direction()
    rots = np.stack([c.rotation for c in cameras])[dom]           # (N, 3, 3)
    d3 = np.concatenate([d2, np.zeros((len(d2), 1))], axis=1)
    world = np.einsum("nji,nj->ni", rots, d3)
    return world * (stats.mean_coverage * max_scale)[:, None]


def densify_and_prune(arrays: dict[str, np.ndarray], ids: np.ndarray, stats: DensifyStats,
                      th: DensifyThresholds, cameras: list[Camera], rng: np.random.Generator,
                      step: int = 0, mode: str = "uad", next_id: int | None = None,
                      sample_pdf: bool = True) -> DensifyResult:
    """Clone/split high-gradient Gaussians and prune; resets ``stats``."""
    if mode not in ("uad", "adc"):
        raise ValueError(f"unknown densification mode {mode!r}")
    n = len(arrays["mu"])
    next_id = int(ids.max()) + 1 if next_id is None and n else (next_id or 0)
    events: list[dict] = []
    grad = stats.mean_grad_norm
    scales = np.exp(arrays["log_scale"])
    max_scale = scales.max(axis=1)
    eligible = (stats.count > 0) & (grad > th.grad)
    split = eligible & (max_scale > th.scale)
    clone = eligible & ~split

    # net growth: +1 per clone, +(children - 1) per split
    cand = np.nonzero(eligible)[0]
    growth = np.where(split[cand], SPLIT_CHILDREN - 1, 1)
    room = th.budget - n
    if growth.sum() > room:
        order = cand[np.lexsort((cand, -grad[cand]))]
        gr = np.where(split[order], SPLIT_CHILDREN - 1, 1)
        keep = np.cumsum(gr) <= max(room, 0)
        for i in order[~keep]:
            events.append(dict(step=step, op="skip-budget", id=int(ids[i])))
        clone &= np.isin(np.arange(n), order[keep])
        split &= np.isin(np.arange(n), order[keep])

    if mode == "uad":
        shift = shift_vectors(stats, max_scale, cameras)
    else:
        shift = np.zeros((n, 3))

    new_rows, origin, new_ids = [], [], []

    ci = np.nonzero(clone)[0]
    if len(ci):
        rows = {k: v[ci].copy() for k, v in arrays.items()}
        rows["mu"] = rows["mu"] + shift[ci]
        new_rows.append(rows)
        origin.append(np.full(len(ci), -1))
        for j, i in enumerate(ci):
            new_ids.append(next_id)
            events.append(dict(step=step, op="clone", id=next_id, parent=int(ids[i]), pos=rows["mu"][j].tolist()))
            next_id += 1

    si = np.nonzero(split)[0]
    if len(si):
        rep = np.repeat(si, SPLIT_CHILDREN)
        std = scales[rep]
        noise = rng.standard_normal((len(rep), 3)) * std if sample_pdf else np.zeros((len(rep), 3))
        rot = _quat_rotmat(arrays["rot"][rep])
        rows = {k: v[rep].copy() for k, v in arrays.items()}
        rows["mu"] = arrays["mu"][rep] + shift[rep] + np.einsum("nij,nj->ni", rot, noise)
        rows["log_scale"] = np.log(std / SPLIT_SHRINK)
        new_rows.append(rows)
        origin.append(np.full(len(rep), -1))
        for j, i in enumerate(rep):
            new_ids.append(next_id)
            events.append(dict(step=step, op="split", id=next_id, parent=int(ids[i]), pos=rows["mu"][j].tolist()))
            next_id += 1

    keep_old = ~split
    out = {k: v[keep_old] for k, v in arrays.items()}
    out_origin = [np.nonzero(keep_old)[0]] + origin
    out_ids = [ids[keep_old], np.asarray(new_ids, dtype=ids.dtype)]
    for rows in new_rows:
        for k in out:
            out[k] = np.concatenate([out[k], rows[k].astype(out[k].dtype)])
    origin_arr = np.concatenate(out_origin)
    ids_arr = np.concatenate(out_ids)

    alpha = _sigmoid(out["opacity_logit"])
    prune_a = alpha < th.opacity
    prune_u = (_sigmoid(out["uncert_logit"]) > th.uncertainty) if mode == "uad" else np.zeros_like(prune_a)
    for i in np.nonzero(prune_a)[0]:
        events.append(dict(step=step, op="prune-a", id=int(ids_arr[i]), pos=out["mu"][i].tolist()))
    for i in np.nonzero(prune_u & ~prune_a)[0]:
        events.append(dict(step=step, op="prune-u", id=int(ids_arr[i]), pos=out["mu"][i].tolist()))
    keep = ~(prune_a | prune_u)
    out = {k: v[keep] for k, v in out.items()}
    stats.reset(int(keep.sum()))
    return DensifyResult(out, origin_arr[keep], ids_arr[keep], events)


def adc_baseline(arrays, ids, stats, th, cameras, rng, step=0, next_id=None, sample_pdf=True) -> DensifyResult:
    """Classic density control: no shift, no uncertainty pruning."""
    return densify_and_prune(arrays, ids, stats, th, cameras, rng, step, mode="adc",
                             next_id=next_id, sample_pdf=sample_pdf)


def format_event(ev: dict) -> str:
    """One structured-text log line: tab-separated key=value pairs."""
    parts = [f"step={ev['step']}", f"op={ev['op']}", f"id={ev['id']}"]
    if "parent" in ev:
        parts.append(f"parent={ev['parent']}")
    if "pos" in ev:
        parts.append("pos=" + ",".join(repr(float(v)) for v in ev["pos"]))
    return "\t".join(parts)


def parse_event(line: str) -> dict:
    ev = {}
    for part in line.rstrip("\n").split("\t"):
        k, v = part.split("=", 1)
        if k == "pos":
            ev[k] = [float(x) for x in v.split(",")]
        elif k in ("step", "id", "parent"):
            ev[k] = int(v)
        else:
            ev[k] = v
    return ev
