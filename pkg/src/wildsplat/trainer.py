"""Multi-stage optimisation: static warm-up, mask/transient training, joint training."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import objective as obj
from .densify import DensifyStats, DensifyThresholds, accumulate, densify_and_prune, format_event
from .maskgen import MaskNetwork, build_mask_pair, predict_mask, superpixels
from .raster import positional_gradient_norms, rasterize
from .scene import Dataset
from .splat import SH_C0, StaticGaussians, TransientSeeds, project_static
from .transient import DeformNetworks, project_transient, transient_memory_bytes

log = logging.getLogger(__name__)

STAGES = ("init", "mid", "joint", "polish")
METRIC_FIELDS = ["step", "stage", "view", "loss", "l1", "dssim", "bce", "mask_reg", "mid_extra", "loss_t",
                 "eval_psnr", "eval_ssim", "n_static", "transient_bytes"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 2000
    stage_fractions: tuple = (0.5, 0.25, 0.25)
    polish_fraction: float = 0.0
    pipeline: str = "full"           # full | static (stage-1 loss for the whole budget)
    seed: int = 0
    dtype: str = "float32"
    background: tuple = (0.0, 0.0, 0.0)
    # learning rates; the position rate is multiplied by the scene extent
    lr_mu: float = 1.6e-4
    lr_mu_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rot: float = 1e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_uncert: float = 5e-2
    lr_embed: float = 1e-3
    lr_net: float = 1e-3
    lr_mask: float = 1e-3
    # losses
    lambda_dssim: float = 0.2
    lambda0: float = 3e-2
    lambda1: float = 5e-4
    lambda_t: float = 1.0
    mid_complement: bool = True
    uncert_mask_gate: bool = False
    uncert_literal_sum: bool = False
    # fields
    n_static: int = 200
    n_transient: int = 500
    transient_init: str = "static"   # static: copy the static field when stage 2 begins | points
    embed_dim: int = 16
    mu_freqs: int = 6
    t_freqs: int = 4
    color_from_position: bool = True
    n_superpixels: int = 20
    mask_init: float = 0.1
    mask_warmup: float = 0.5         # fraction of stage 2 before the mask network starts training
    init_opacity: float = 0.1
    init_uncertainty: float = 0.1
    # density control
    densify_mode: str = "uad"        # uad | adc | none
    densify_from: int = 500
    densify_until_frac: float = 0.9
    densify_interval: int = 100
    densify_grad: float = 1e-4
    densify_scale_frac: float = 0.01
    prune_opacity: float = 0.005
    prune_uncertainty: float = 0.9
    max_gaussians: int = 2000
    eval_interval: int = 250

    def validate(self):
        if abs(sum(self.stage_fractions) - 1.0) > 1e-9:
            raise ValueError("stage fractions must sum to 1")
        rates = [getattr(self, f.name) for f in fields(self) if f.name.startswith("lr_")]
        if min(rates) <= 0:
            raise ValueError("learning rates must be positive")
        if self.pipeline not in ("full", "static"):
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        if self.transient_init not in ("static", "points"):
            raise ValueError(f"unknown transient init {self.transient_init!r}")
        if self.densify_mode not in ("uad", "adc", "none"):
            raise ValueError(f"unknown densify mode {self.densify_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(getattr(cls(), k), tuple) else v for k, v in d.items()}
        return cls(**kw).validate()

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls.from_dict({**PRESETS[name], **overrides})

    def stage_at(self, step: int) -> str:
        if self.pipeline == "static":
            return "init"
        b1 = self.stage_fractions[0] * self.total_steps
        b2 = b1 + self.stage_fractions[1] * self.total_steps
        b3 = self.total_steps * (1.0 - self.polish_fraction)
        if step < b1:
            return "init"
        if step < b2:
            return "mid"
        if step < b3:
            return "joint"
        return "polish"


# The desk-scale benchmark schedule.  The transient field gets most of stage 2
# to fit the views before the mask network starts, the mask learns slowly, and
# the stage-2 transient term is gated by the mask itself rather than its
# complement (the complement lets the transient copy static pixels, after
# which nothing pushes the mask back down there).
PRESETS = {
    "default": {},
    "benchmark": dict(total_steps=10000, stage_fractions=(0.3, 0.5, 0.2), mask_warmup=0.6, lr_mask=3e-5,
                      mid_complement=False),
}


# -- optimiser -------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """In-place bias-corrected Adam update without weight decay.

    Returns False (and leaves everything untouched) for a non-finite gradient.
    """
    if not np.all(np.isfinite(grad)):
        return False
    state.t += 1
    state.m *= beta1
    state.m += (1 - beta1) * grad
    state.v *= beta2
    state.v += (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1 ** state.t)
    v_hat = state.v / (1 - beta2 ** state.t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)
    return True


# -- state -----------------------------------------------------------------

@dataclass
class TrainState:
    """Everything that determines how training continues."""

    config: TrainConfig
    static: StaticGaussians
    static_ids: np.ndarray
    next_id: int
    seeds: TransientSeeds
    nets: DeformNetworks
    embeddings: list
    masknet: MaskNetwork
    adam: dict = field(default_factory=dict)
    stats: DensifyStats | None = None
    step: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    skipped_updates: int = 0

    def groups(self) -> dict[str, tuple[dc.Tensor, str]]:
        """name -> (tensor, parameter group)."""
        g = {f"static.{k}": (t, "uncert" if k == "uncert_logit" else "static") for k, t in self.static.tensors().items()}
        g.update({f"seeds.{k}": (t, "transient") for k, t in self.seeds.tensors().items()})
        for i, p in enumerate(self.nets.f_d.parameters()):
            g[f"f_d.{i}"] = (p, "transient")
        for i, p in enumerate(self.nets.f_c.parameters()):
            g[f"f_c.{i}"] = (p, "transient")
        for i, e in enumerate(self.embeddings):
            g[f"embed.{i}"] = (e, "transient")
        for k, p in self.masknet.named_parameters().items():
            g[f"mask.{k}"] = (p, "mask")
        return g


def _knn_scale(points, k=3):
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    near = np.sort(d2, axis=1)[:, :k]
    return np.sqrt(np.maximum(near.mean(1), 1e-7))


def _logit(p):
    return float(np.log(p / (1 - p)))


def init_state(config: TrainConfig, data: Dataset) -> TrainState:
    config.validate()
    rng = np.random.default_rng(config.seed)
    dt = np.dtype(config.dtype)
    pts = data.points
    if len(pts) == 0:
        pts = np.concatenate([rng.uniform(-1, 1, (config.n_static, 3)), np.full((config.n_static, 3), 0.5)], 1)
    pick = rng.choice(len(pts), size=config.n_static, replace=config.n_static > len(pts))
    p = pts[pick]
    mu = p[:, :3] + rng.normal(0, 0.01, (config.n_static, 3))
    scale = np.clip(_knn_scale(mu), 1e-3, 0.3)
    sh = np.zeros((config.n_static, 4, 3))
    sh[:, 0] = (p[:, 3:] - 0.5) / SH_C0
    n = config.n_static
    static = StaticGaussians.from_arrays(
        mu=mu.astype(dt), log_scale=np.log(np.repeat(scale[:, None], 3, 1)).astype(dt),
        rot=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)).astype(dt),
        opacity_logit=np.full(n, _logit(config.init_opacity), dt), sh=sh.astype(dt),
        uncert_logit=np.full(n, _logit(config.init_uncertainty), dt))
    m = config.n_transient
    tp = pts[rng.choice(len(pts), size=m, replace=m > len(pts)), :3] + rng.normal(0, 0.05, (m, 3))
    seeds = TransientSeeds.from_arrays(
        mu=tp.astype(dt), log_scale=np.full((m, 3), np.log(0.08), dt),
        rot=np.tile([1.0, 0.0, 0.0, 0.0], (m, 1)).astype(dt),
        opacity_logit=np.full(m, _logit(config.init_opacity), dt),
        color_bias=rng.normal(0, 0.1, (m, 3)).astype(dt))
    nets = DeformNetworks(rng, config.embed_dim, config.mu_freqs, config.t_freqs, dtype=dt,
                          color_from_position=config.color_from_position)
    embeds = [dc.Tensor(rng.normal(0, 1.0, config.embed_dim).astype(dt), requires_grad=True)
              for _ in range(data.n_views)]
    masknet = MaskNetwork(rng, dtype=dt, init_prob=config.mask_init)
    state = TrainState(config, static, np.arange(n, dtype=np.int64), n, seeds, nets, embeds, masknet,
                       stats=DensifyStats.empty(n, data.n_views), rng=rng)
    state.adam = {k: AdamState(np.zeros_like(t.data), np.zeros_like(t.data)) for k, (t, _) in state.groups().items()}
    return state


def _lr(config: TrainConfig, name: str, group: str, step: int, extent: float) -> float:
    if name == "static.mu":
        r = min(step / max(config.total_steps, 1), 1.0)
        lo, hi = np.log(config.lr_mu_final), np.log(config.lr_mu)
        return float(np.exp(hi * (1 - r) + lo * r)) * extent
    if group == "uncert":
        return config.lr_uncert
    if group == "mask":
        return config.lr_mask
    key = name.split(".", 1)[1]
    if name.startswith("static."):
        return {"log_scale": config.lr_scale, "rot": config.lr_rot, "opacity_logit": config.lr_opacity,
                "sh": config.lr_sh}[key]
    if name.startswith("seeds."):
        return {"mu": config.lr_mu * extent, "log_scale": config.lr_scale, "rot": config.lr_rot,
                "opacity_logit": config.lr_opacity, "color_bias": config.lr_sh * 4}[key]
    if name.startswith("embed."):
        return config.lr_embed
    return config.lr_net


def trainable_groups(stage: str) -> set[str]:
    return {"init": {"static"}, "mid": {"transient", "mask", "uncert"},
            "joint": {"static", "transient", "mask", "uncert"}, "polish": {"static"}}[stage]


# -- one step ----------------------------------------------------------------

@dataclass
class StepResult:
    loss: float
    terms: dict
    render: object
    masks: object = None


class Trainer:
    def __init__(self, config: TrainConfig, data: Dataset, state: TrainState | None = None):
        self.config = config.validate()
        self.data = data
        self.state = state or init_state(config, data)
        self.labels = {}
        self.extent = data.extent
        self.events: list[str] = []
        self.dtype = np.dtype(config.dtype)
        self.weights = obj.LossWeights(config.lambda_dssim, config.lambda0, config.lambda1)

    def superpixel_labels(self, v: int) -> np.ndarray:
        if v not in self.labels:
            self.labels[v] = superpixels(self.data.images[v], self.config.n_superpixels).labels
        return self.labels[v]

    def forward(self, v: int, stage: str):
        """Loss for view ``v`` under ``stage``; must run inside a tape."""
        s, cfg = self.state, self.config
        cam = self.data.cameras[v]
        gt = self.data.images[v].astype(self.dtype)
        bg = np.asarray(cfg.background)
        proj_s = project_static(s.static, cam)
        out_s = rasterize(proj_s, cam.height, cam.width, bg)
        if stage in ("init", "polish"):
            l1 = obj.l1(out_s.image, gt)
            ds = obj.dssim(out_s.image, gt)
            loss = (1 - cfg.lambda_dssim) * l1 + cfg.lambda_dssim * ds
            return loss, dict(l1=l1.item(), dssim=ds.item()), out_s, None
        proj_d = project_transient(s.seeds, s.nets, s.embeddings[v], cam)
        out_d = rasterize(proj_d, cam.height, cam.width, np.zeros(3))
        m_o = predict_mask(s.masknet, gt, out_s.image.data)
        pair = build_mask_pair(m_o.data, self.superpixel_labels(v))
        m_s = pair.m_s.astype(self.dtype)
        comp = obj.compose(out_d.image, out_s.image, m_o)
        l1 = obj.l1(comp, gt)
        ds = obj.dssim(comp, gt)
        b = obj.bce(m_o, m_s)
        reg = (m_o * m_o).mean()
        loss = (1 - cfg.lambda_dssim) * l1 + cfg.lambda_dssim * ds + cfg.lambda0 * b + cfg.lambda1 * reg
        terms = dict(l1=l1.item(), dssim=ds.item(), bce=b.item(), mask_reg=reg.item())
        if stage == "mid":
            gate = (1.0 - m_s) if cfg.mid_complement else m_s
            gate_t = dc.Tensor(gate[..., None])
            extra = obj.l1(out_d.image * gate_t, dc.Tensor(gt * gate[..., None]))
            loss = loss + extra
            terms["mid_extra"] = extra.item()
        umap = obj.render_uncertainty(proj_s, dc.sigmoid(s.static.uncert_logit), m_s, cam.height, cam.width,
                                      gate_by_mask=cfg.uncert_mask_gate, literal_sum=cfg.uncert_literal_sum)
        lt = obj.loss_t(umap, m_s)
        loss = loss + cfg.lambda_t * lt
        terms["loss_t"] = lt.item()
        return loss, terms, out_s, pair

    def step(self) -> StepResult:
        s, cfg = self.state, self.config
        stage = cfg.stage_at(s.step)
        if stage == "mid" and cfg.transient_init == "static" and (s.step == 0 or cfg.stage_at(s.step - 1) == "init"):
            self.seed_transient_from_static()
        train = self.data.train_ids
        v = train[s.step % len(train)]
        groups = s.groups()
        with dc.Tape() as tape:
            loss, terms, out_s, pair = self.forward(v, stage)
        if not np.isfinite(loss.item()):
            raise TrainingError(f"non-finite loss at step {s.step} (view {v})")
        active = trainable_groups(stage)
        if stage == "mid" and s.step < self.mask_start():
            active = active - {"mask"}
        params = [t for t, g in groups.values() if g in active or g == "static"]
        grads = tape.backward(loss, params)
        for name, (t, g) in groups.items():
            if g not in active:
                continue
            ok = adam_step(t.data, grads[t.id], s.adam[name], _lr(cfg, name, g, s.step, self.extent))
            if not ok:
                s.skipped_updates += 1
                log.warning("non-finite gradient for %s at step %d; update skipped", name, s.step)
        for t, _ in groups.values():
            t.grad = None
        # renormalising a frozen group would still perturb it in the last bit
        if "static" in active:
            s.static.normalize_rotations()
        if "transient" in active:
            s.seeds.normalize_rotations()

        if cfg.densify_mode != "none" and out_s.mean2d_grad is not None:
            g2, cov = positional_gradient_norms([out_s], len(s.static))
            ids = out_s.source_ids
            accumulate(s.stats, g2[ids], cov[ids], ids, v)
        s.step += 1
        if self._densify_due():
            self._densify()
        return StepResult(loss.item(), terms, out_s, pair)

    def mask_start(self) -> int:
        cfg = self.config
        b1 = cfg.stage_fractions[0] * cfg.total_steps
        return int(np.ceil(b1 + cfg.mask_warmup * cfg.stage_fractions[1] * cfg.total_steps))

    def seed_transient_from_static(self):
        """Copy the static field into the transient seeds so the transient
        render starts out equal to the static one; seeds beyond the static
        count are near-transparent copies."""
        s = self.state
        n, m = len(s.seeds), len(s.static)
        src = s.static.arrays()
        pick = np.concatenate([s.rng.permutation(m)[:n], s.rng.integers(0, m, max(n - m, 0))])
        rgb = np.clip(SH_C0 * src["sh"][pick, 0].astype(np.float64) + 0.5, 0.02, 0.98)
        opac = src["opacity_logit"][pick].copy()
        opac[m:] = _logit(0.01)
        arrays = dict(mu=src["mu"][pick], log_scale=src["log_scale"][pick], rot=src["rot"][pick],
                      opacity_logit=opac, color_bias=np.log(rgb / (1 - rgb)))
        for k, t in s.seeds.tensors().items():
            t.data[...] = arrays[k]
            s.adam[f"seeds.{k}"] = AdamState(np.zeros_like(t.data), np.zeros_like(t.data))

    def _densify_due(self) -> bool:
        cfg, step = self.config, self.state.step
        # only while the static field is trainable on the following step
        return (cfg.densify_mode != "none" and step >= cfg.densify_from
                and step <= cfg.densify_until_frac * cfg.total_steps and step % cfg.densify_interval == 0
                and step < cfg.total_steps and "static" in trainable_groups(cfg.stage_at(step)))

    def _densify(self):
        s, cfg = self.state, self.config
        th = DensifyThresholds(cfg.densify_grad, cfg.densify_scale_frac * self.extent, cfg.prune_opacity,
                               cfg.prune_uncertainty, cfg.max_gaussians)
        res = densify_and_prune(s.static.arrays(), s.static_ids, s.stats, th, self.data.cameras, s.rng,
                                step=s.step, mode=cfg.densify_mode, next_id=s.next_id)
        s.next_id += sum(1 for e in res.events if e["op"] in ("clone", "split"))
        self.events.extend(format_event(e) for e in res.events)
        self._replace_static(res.arrays, res.origin)
        s.static_ids = res.ids

    def _replace_static(self, arrays, origin):
        s = self.state
        new = StaticGaussians.from_arrays(**arrays)
        for k in StaticGaussians.FIELDS:
            name = f"static.{k}"
            old = s.adam[name]
            m = np.zeros_like(arrays[k])
            v = np.zeros_like(arrays[k])
            src = origin >= 0
            m[src] = old.m[origin[src]]
            v[src] = old.v[origin[src]]
            s.adam[name] = AdamState(m, v, old.t)
        s.static = new

    def evaluate(self) -> tuple[float, float]:
        """Mean PSNR/SSIM of static renders on held-out views vs clean images."""
        from .metrics import psnr, ssim_np
        ref = self.data.clean if self.data.clean is not None else self.data.images
        ps, ss = [], []
        for v in self.data.test_ids:
            img = render_static(self.state, self.data.cameras[v], self.config.background)
            ps.append(psnr(img, ref[v]))
            ss.append(ssim_np(img, ref[v]))
        return float(np.mean(ps)), float(np.mean(ss))

    def run(self, until: int | None = None, metrics_path=None, events_path=None, progress=None):
        cfg, s = self.config, self.state
        until = cfg.total_steps if until is None else min(until, cfg.total_steps)
        writer = None
        fh = None
        if metrics_path is not None:
            new = not Path(metrics_path).exists()
            fh = open(metrics_path, "a", newline="")
            writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            if new:
                writer.writeheader()
        try:
            while s.step < until:
                view = self.data.train_ids[s.step % len(self.data.train_ids)]
                stage = cfg.stage_at(s.step)
                res = self.step()
                last = s.step == cfg.total_steps
                if writer is not None and (s.step % cfg.eval_interval == 0 or last):
                    p, q = self.evaluate()
                    row = dict(step=s.step, stage=stage, view=view, loss=_fmt(res.loss),
                               eval_psnr=_fmt(p), eval_ssim=_fmt(q), n_static=len(s.static),
                               transient_bytes=self.transient_bytes())
                    row.update({k: _fmt(v) for k, v in res.terms.items()})
                    writer.writerow(row)
                    fh.flush()
                if progress is not None:
                    progress(s.step, stage, res)
        finally:
            if fh is not None:
                fh.close()
        if events_path is not None and self.events:
            with open(events_path, "a") as f:
                f.write("".join(line + "\n" for line in self.events))
            self.events.clear()
        return s

    def transient_bytes(self) -> int:
        s = self.state
        return transient_memory_bytes(len(s.seeds), len(s.embeddings), self.config.embed_dim, s.nets.n_params())


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def render_static(state: TrainState, cam, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    out = rasterize(project_static(state.static, cam), cam.height, cam.width, np.asarray(background))
    return out.image.data.astype(np.float64)


def train(config: TrainConfig, data: Dataset, out_dir=None, progress=None) -> TrainState:
    """Run the whole schedule; writes metrics.csv, events.txt and checkpoint.bin
    into ``out_dir`` when given."""
    from .checkpoint import save_checkpoint
    trainer = Trainer(config, data)
    if out_dir is None:
        return trainer.run(progress=progress)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("metrics.csv", "events.txt"):
        (out / name).unlink(missing_ok=True)
    trainer.run(metrics_path=out / "metrics.csv", events_path=out / "events.txt", progress=progress)
    save_checkpoint(trainer.state, out / "checkpoint.bin")
    return trainer.state
