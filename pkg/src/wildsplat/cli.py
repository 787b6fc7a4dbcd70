"""Command-line entry point.

Exit codes: 0 success, 2 invalid input (bad config, spec, paths or files),
1 failure while running.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .scene import PRESETS, SceneSpec, SceneSpecError, generate_scene, load_dataset, save_scene, to_uint8
from .trainer import PRESETS as TRAIN_PRESETS
from .trainer import TrainConfig, Trainer, render_static

log = logging.getLogger("wildsplat")

RULE = "=" * 60


class UsageError(ValueError):
    pass


def _block(title: str, body: str):
    print(f"{RULE}\n{title}\n{RULE}")
    print(body.rstrip("\n"))
    print(RULE)


def _load_config(args) -> TrainConfig:
    """Preset values first, then keys from --config, then --seed/--steps."""
    values = dict(TRAIN_PRESETS[args.preset]) if getattr(args, "preset", None) else {}
    if args.config:
        values.update(json.loads(Path(args.config).read_text()))
    cfg = TrainConfig.from_dict(values)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "steps", None) is not None:
        cfg.total_steps = args.steps
    return cfg.validate()


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n for n in missing))


def cmd_genscene(args):
    _require(args, "out")
    if args.config:
        spec = SceneSpec.from_lines(Path(args.config).read_text().splitlines())
    else:
        spec = SceneSpec()
    if args.preset is not None:
        spec.occluders.coverage = PRESETS[args.preset]
    if args.coverage is not None:
        spec.occluders.coverage = args.coverage
    if args.views is not None:
        spec.n_views = args.views
    if args.size is not None:
        spec.width = spec.height = args.size
    scene = generate_scene(spec, args.seed if args.seed is not None else 0)
    root = save_scene(scene, args.out)
    frac = scene.masks.mean(axis=(1, 2))
    _block("genscene", f"out={root}\nviews={len(scene.cameras)}\nmean_masked_fraction={frac.mean():.4f}\n"
                       f"min_masked_fraction={frac.min():.4f}\nmax_masked_fraction={frac.max():.4f}")


def cmd_train(args):
    _require(args, "scene", "out")
    data = load_dataset(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint, data)
        cfg = state.config
        if args.steps is not None:
            cfg.total_steps = args.steps
        trainer = Trainer(cfg, data, state)
    else:
        cfg = _load_config(args)
        trainer = Trainer(cfg, data)
        for name in ("metrics.csv", "events.txt"):
            (out / name).unlink(missing_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")

    def progress(step, stage, res):
        if step % cfg.eval_interval == 0:
            log.info("step %d [%s] loss %.5f", step, stage, res.loss)

    state = trainer.run(metrics_path=out / "metrics.csv", events_path=out / "events.txt", progress=progress)
    ckpt = save_checkpoint(state, out / "checkpoint.bin")
    p, s = trainer.evaluate()
    _block("train", f"checkpoint={ckpt}\nsteps={state.step}\nstatic_gaussians={len(state.static)}\n"
                    f"heldout_psnr={p:.4f}\nheldout_ssim={s:.4f}\nskipped_updates={state.skipped_updates}")


def cmd_render(args):
    _require(args, "scene", "checkpoint", "out")
    from PIL import Image
    data = load_dataset(args.scene)
    state = load_checkpoint(args.checkpoint, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for v, cam in enumerate(data.cameras):
        Image.fromarray(to_uint8(render_static(state, cam, state.config.background))).save(out / f"{v:04d}.png")
    _block("render", f"out={out}\nviews={data.n_views}")


def cmd_eval(args):
    _require(args, "scene", "checkpoint", "out")
    from . import plots
    from .evaluate import evaluate
    data = load_dataset(args.scene)
    state = load_checkpoint(args.checkpoint, data)
    rep = evaluate(state, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(rep.to_csv())
    (out / "summary.txt").write_text(rep.summary())
    renders = {v: render_static(state, data.cameras[v], state.config.background) for v in data.test_ids}
    figs = [plots.render_grid(renders, data.clean, out / "heldout.png"),
            plots.view_psnr_bars(rep.view_psnr, out / "psnr.png")]
    metrics = Path(args.checkpoint).with_name("metrics.csv")
    if metrics.exists():
        curve = plots.training_curves(metrics, out / "curves.png")
        if curve is not None:
            figs.append(curve)
    _block("eval", rep.summary() + "figures=" + ",".join(str(f) for f in figs))


def cmd_maskviz(args):
    _require(args, "scene", "checkpoint", "out")
    from PIL import Image
    from . import plots
    from .evaluate import mask_pairs
    data = load_dataset(args.scene)
    state = load_checkpoint(args.checkpoint, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = mask_pairs(state, data, data.train_ids, state.config.n_superpixels)
    for v, p in pairs.items():
        Image.fromarray(to_uint8(p.m_o)).save(out / f"m_o_{v:04d}.png")
        Image.fromarray(plots.label_colors(p.labels)).save(out / f"labels_{v:04d}.png")
        Image.fromarray(p.m_s.astype(np.uint8) * 255).save(out / f"m_s_{v:04d}.png")
    fig = plots.mask_panel(data.images, pairs, data.masks, out / "masks.png")
    _block("maskviz", f"out={out}\nviews={len(pairs)}\nfigure={fig}")


def cmd_config(args):
    if not args.dump:
        raise UsageError("config: nothing to do (use --dump)")
    print(_load_config(args).to_json())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wildsplat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *flags):
        for f in flags:
            sp.add_argument(f"--{f}", type=int if f == "seed" else str, default=None)
        return sp

    g = common(sub.add_parser("genscene", help="write a synthetic scene"), "out", "seed", "config")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--coverage", type=float)
    g.add_argument("--views", type=int)
    g.add_argument("--size", type=int)
    t = common(sub.add_parser("train", help="train on a scene"), "scene", "out", "config", "seed", "checkpoint")
    t.add_argument("--steps", type=int)
    t.add_argument("--preset", choices=sorted(TRAIN_PRESETS))
    common(sub.add_parser("render", help="render the static field for every view"), "scene", "checkpoint", "out")
    common(sub.add_parser("eval", help="evaluate a checkpoint"), "scene", "checkpoint", "out")
    common(sub.add_parser("maskviz", help="write transient masks"), "scene", "checkpoint", "out")
    c = common(sub.add_parser("config", help="print configuration"), "config", "seed")
    c.add_argument("--dump", action="store_true")
    c.add_argument("--preset", choices=sorted(TRAIN_PRESETS))
    return p


COMMANDS = {"genscene": cmd_genscene, "train": cmd_train, "render": cmd_render, "eval": cmd_eval,
            "maskviz": cmd_maskviz, "config": cmd_config}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, SceneSpecError, CheckpointError, FileNotFoundError, json.JSONDecodeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001  (includes TrainingError)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
