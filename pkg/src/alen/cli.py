"""Command line front end.

Subcommands: ``train``, ``infer``, ``eval``, ``gradcheck``, ``synth``,
``params``.  Data goes to stdout, logs and the resolved configuration go to
stderr.  Exit codes: 0 success, 1 failed verification, 2 bad arguments or
configuration, 3 broken input data, 4 training diverged to a non-finite loss.
``ALEN_THREADS`` caps evaluation worker threads.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck as G
from .errors import (ConfigurationError, DataError, DimensionError,
                     NonFiniteLossError)
from .losses import LossConfig
from .network import (ModelConfig, build, enhance, model_config_from_kv,
                      model_config_to_kv, parse_config_file)
from .rawdata import (NoiseModel, load_dataset, load_raw, load_rgb,
                      procedural_rgb, save_rgb, synth_lowlight, write_dataset)
from .training import (TrainConfig, evaluate, format_report, load_checkpoint,
                       model_predictor, restore, save_checkpoint, train,
                       write_history_csv, write_metrics_csv)

_ABLATIONS = {
    "backbone": (False, False, False),
    "cab": (True, False, False),
    "mab": (True, True, False),
    "full": (True, True, True),
}


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _echo(section: str, kv: dict) -> None:
    for k, v in kv.items():
        _log(f"{section}.{k} = {v}")


# ---------------------------------------------------------------------------
# configuration assembly (file < scale preset < explicit flags < --ablation)


def _model_config(args) -> ModelConfig:
    base = ModelConfig.desk_scale() if getattr(args, "desk", False) else ModelConfig()
    kv = model_config_to_kv(base)
    if getattr(args, "config", None):
        kv.update(parse_config_file(args.config))
    cfg = model_config_from_kv(kv)
    over = {}
    for name in ("base_width", "depth", "nonlocal_downsample", "cab_reduction", "seed"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    if getattr(args, "ratios", None) is not None:
        try:
            over["ratios"] = tuple(float(x) for x in args.ratios.split(","))
        except ValueError:
            raise ConfigurationError(f"bad --ratios value {args.ratios!r}")
    if getattr(args, "ablation", None) is not None:
        cab, mab, isl = _ABLATIONS[args.ablation]
        over.update(enable_cab=cab, enable_mab=mab, enable_isl=isl)
    return replace(cfg, **over) if over else cfg


def _parse_schedule(text: str):
    text = text.strip()
    if not text:
        return ()
    steps = []
    for part in text.split(","):
        if ":" not in part:
            raise ConfigurationError(f"bad schedule entry {part!r}, expected EPOCH:LR")
        epoch, lr = part.split(":", 1)
        try:
            steps.append((int(epoch), float(lr)))
        except ValueError:
            raise ConfigurationError(f"bad schedule entry {part!r}")
    return tuple(steps)


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.desk_scale() if args.desk else TrainConfig()
    over = {}
    for name in ("epochs", "lr0", "crop", "batch_size", "checkpoint_every", "seed"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    if args.schedule is not None:
        over["schedule"] = _parse_schedule(args.schedule)
    if args.no_augment:
        over["use_augment"] = False
    return replace(cfg, **over) if over else cfg


def _loss_config(args) -> LossConfig:
    if getattr(args, "alpha", None) is not None:
        return LossConfig(alpha=args.alpha)
    return LossConfig()


def _echo_train_config(model_cfg, train_cfg, loss_cfg) -> None:
    _echo("model", model_config_to_kv(model_cfg))
    _echo("train", {
        "lr0": repr(train_cfg.lr0),
        "schedule": ",".join(f"{t}:{lr:g}" for t, lr in train_cfg.schedule),
        "epochs": train_cfg.epochs,
        "batch_size": train_cfg.batch_size,
        "crop": train_cfg.crop,
        "use_augment": str(train_cfg.use_augment).lower(),
        "checkpoint_every": train_cfg.checkpoint_every,
        "seed": train_cfg.seed,
    })
    _echo("loss", {"alpha": repr(loss_cfg.alpha),
                   "ssim_window": loss_cfg.ssim_window,
                   "ssim_sigma": repr(loss_cfg.ssim_sigma)})


def _eval_workers(requested) -> int:
    workers = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get("ALEN_THREADS")
    if cap is not None:
        try:
            workers = min(workers, int(cap))
        except ValueError:
            raise ConfigurationError(f"ALEN_THREADS={cap!r} is not an integer")
    return max(1, workers)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_train(args) -> int:
    model_cfg = _model_config(args)
    train_cfg = _train_config(args)
    loss_cfg = _loss_config(args)
    _echo_train_config(model_cfg, train_cfg, loss_cfg)
    pairs = [pair for _, pair in load_dataset(args.data)]
    resume = load_checkpoint(args.resume) if args.resume else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(model_cfg, train_cfg, pairs, loss_cfg=loss_cfg,
                   resume=resume, out_dir=out, log=_log)
    final = out / "final.alck"
    save_checkpoint(final, result.checkpoint)
    write_history_csv(out / "history.csv", result.history)
    if result.history:
        _log(f"final loss {result.history[-1][1]:.6f}")
    print(final)
    return 0


def _cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    _echo("model", model_config_to_kv(ckpt.config))
    weights, _, _ = restore(ckpt)
    raw = load_raw(args.raw)
    _log(f"input {raw.mosaic.shape[0]}x{raw.mosaic.shape[1]} {raw.pattern} "
         f"exposure {raw.exposure_s:g}s ratio {args.ratio:g}")
    rgb = enhance(weights, raw, args.ratio)
    save_rgb(args.out, rgb)
    print(args.out)
    return 0


def _cmd_eval(args) -> int:
    items = load_dataset(args.data)
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        _echo("model", model_config_to_kv(ckpt.config))
        weights, _, _ = restore(ckpt)
        predict_fn = model_predictor(weights)
    else:
        pred_dir = Path(args.predictions)
        scene_of = {id(pair): scene for scene, pair in items}

        def predict_fn(pair):
            path = pred_dir / f"{scene_of[id(pair)]}.ppm"
            if not path.exists():
                raise DataError(f"{path}: missing prediction image")
            return load_rgb(path)

    workers = _eval_workers(args.workers)
    _log(f"evaluating {len(items)} pairs with {workers} worker(s)")
    report = evaluate(items, predict_fn, loss_cfg=_loss_config(args),
                      max_workers=workers)
    if args.out:
        write_metrics_csv(args.out, report)
        _log(f"wrote {args.out}")
    print(format_report(report))
    return 0


def _cmd_gradcheck(args) -> int:
    names = args.ops.split(",") if args.ops else None
    try:
        results = G.run_checks(names=names, seed=args.seed, tol=args.tol,
                               perturb=args.perturb)
    except KeyError as e:
        raise ConfigurationError(str(e))
    for r in results:
        print(f"{r.name:24s} max_rel_err={r.max_rel_err:.3e}  "
              f"{'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        _log(f"FAILED: {', '.join(failed)}")
        return 1
    _log(f"all {len(results)} gradient checks passed")
    return 0


def _cmd_synth(args) -> int:
    if args.size % 2:
        raise ConfigurationError(f"--size {args.size} must be even")
    try:
        ratios = [float(x) for x in args.ratios.split(",")]
    except ValueError:
        raise ConfigurationError(f"bad --ratios value {args.ratios!r}")
    nm_args = dict(shot_gain=args.shot_gain, read_noise=args.read_noise)
    rng = np.random.default_rng(args.seed)
    if args.rgb_dir:
        files = sorted(Path(args.rgb_dir).glob("*.ppm"))
        if not files:
            raise DataError(f"no .ppm images under {args.rgb_dir}")
        targets = [(f.stem, load_rgb(f)) for f in files]
    else:
        targets = [(f"s{i:03d}", procedural_rgb(rng, args.size, args.size))
                   for i in range(args.scenes)]
    items = []
    for i, (scene, rgb) in enumerate(targets):
        w = ratios[i % len(ratios)]
        nm = NoiseModel(seed=args.seed + i, **nm_args)
        items.append((scene, synth_lowlight(rgb, w, nm, pattern=args.pattern)))
    write_dataset(args.out, items)
    _log(f"wrote {len(items)} scenes under {args.out}")
    print(Path(args.out) / "pairs.csv")
    return 0


def _cmd_params(args) -> int:
    cfg = _model_config(args)
    _echo("model", model_config_to_kv(cfg))
    print(build(cfg).parameter_count())
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="model config file (key = value lines)")
    p.add_argument("--desk", action="store_true",
                   help="workstation-sized preset (3 levels, 8 channels, short schedule)")
    p.add_argument("--base-width", dest="base_width", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--ratios", help="comma-separated amplification multipliers")
    p.add_argument("--ablation", choices=sorted(_ABLATIONS),
                   help="backbone | cab | mab | full attention configuration")
    p.add_argument("--nonlocal-downsample", dest="nonlocal_downsample", type=int)
    p.add_argument("--cab-reduction", dest="cab_reduction", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alen", description="Low-light raw image enhancement")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    _add_model_flags(p)
    p.add_argument("--data", required=True, help="dataset directory with pairs.csv")
    p.add_argument("--out", required=True, help="output directory for checkpoints")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--schedule", help='learning-rate steps, e.g. "100:2e-5,150:1e-5"')
    p.add_argument("--crop", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--no-augment", dest="no_augment", action="store_true")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--alpha", type=float, help="L1 weight in the combined loss")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="enhance one raw capture")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--raw", required=True, help="input .alrw file")
    p.add_argument("--ratio", type=float, required=True,
                   help="exposure amplification factor")
    p.add_argument("--out", required=True, help="output .ppm path")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM over a dataset")
    p.add_argument("--data", required=True, help="dataset directory with pairs.csv")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="evaluate a trained model")
    src.add_argument("--predictions",
                     help="directory of precomputed <scene>.ppm predictions")
    p.add_argument("--out", help="write per-scene metrics CSV here")
    p.add_argument("--workers", type=int)
    p.add_argument("--alpha", type=float, help=argparse.SUPPRESS)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--ops", help="comma-separated check names (default: all)")
    p.add_argument("--perturb", help="corrupt this check's backward pass "
                                     "(negative control; the run must fail)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=G.DEFAULT_TOL)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic raw/reference dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--size", type=int, default=64, help="square scene size (pixels)")
    p.add_argument("--ratios", default="100,250,300",
                   help="amplification factors cycled across scenes")
    p.add_argument("--rgb-dir", dest="rgb_dir",
                   help="use these .ppm images as references instead of "
                        "procedural scenes")
    p.add_argument("--shot-gain", dest="shot_gain", type=float, default=1e-4)
    p.add_argument("--read-noise", dest="read_noise", type=float, default=1e-6)
    p.add_argument("--pattern", default="RGGB",
                   choices=("RGGB", "BGGR", "GRBG", "GBRG"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("params", help="print the parameter count for a configuration")
    _add_model_flags(p)
    p.set_defaults(func=_cmd_params)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, DimensionError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
