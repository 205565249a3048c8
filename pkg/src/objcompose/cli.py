"""Command line entry point: ``objcompose <command> [flags]``.

Every command accepts ``--config FILE`` (``key = value`` lines naming flags,
or TrainConfig keys for ``train``).  Explicit flags win over the file, the
file wins over built-in defaults, and the resolved settings are written to
``resolved_config.txt`` in the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import apply_overrides, format_config, parse_text
from .errors import DataError, ObjComposeError, ParameterError

log = logging.getLogger("objcompose")

RESOLVED_NAME = "resolved_config.txt"


# --------------------------------------------------------------------------
# argument plumbing


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="objcompose", description="Object customization with a masked diffusion transformer.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text):
        s = sub.add_parser(name, help=help_text, description=help_text)
        s.add_argument("--config", help="key = value file with flag defaults")
        return s

    s = add("synth-data", "Generate a synthetic scene dataset.")
    s.add_argument("--out", help="output dataset directory")
    s.add_argument("--num", type=int, default=100)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--downsample-factor", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--views", type=int, default=0, help="extra views of each source object (0 or >= 2)")

    s = add("fit-codec", "Fit a latent codec on a dataset.")
    s.add_argument("--data", help="dataset directory")
    s.add_argument("--mode", choices=["block", "learned"], default="block")
    s.add_argument("--out", help="codec file to write")
    s.add_argument("--steps", type=int, default=None, help="learned-mode optimisation steps")
    s.add_argument("--seed", type=int, default=0)

    s = add("train", "Train the customizer.")
    s.add_argument("--data", help="dataset directory")
    s.add_argument("--out", help="run directory")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--codec", help="codec file from fit-codec (default: fit one on --data)")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    def sampling_flags(s):
        s.add_argument("--ckpt", help="training checkpoint")
        s.add_argument("--data", help="dataset directory")
        s.add_argument("--out", help="output directory")
        s.add_argument("--steps", type=int, default=50, help="DDIM steps")
        s.add_argument("--beta", type=float, default=2.0, help="peak guidance weight")
        s.add_argument("--gamma", type=float, default=0.01, help="guidance schedule exponent")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--no-ema", action="store_true", help="sample with raw weights")

    s = add("sample", "Generate images for selected scenes.")
    sampling_flags(s)
    s.add_argument("--ids", help="comma-separated scene ids")

    s = add("eval", "Sample a dataset and write metrics.")
    sampling_flags(s)
    s.add_argument("--limit", type=int, default=None, help="score only the first N scenes")

    s = add("profile", "Time single-image sampling.")
    s.add_argument("--ckpt", help="training checkpoint")
    s.add_argument("--runs", type=int, default=10)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="optional directory for profile.json")
    return p


REQUIRED = {
    "synth-data": ("out",),
    "fit-codec": ("data", "out"),
    "train": ("data", "out"),
    "sample": ("ckpt", "data", "ids", "out"),
    "eval": ("ckpt", "data", "out"),
    "profile": ("ckpt",),
}
_NOT_SETTINGS = {"command", "config", "verbose", "set"}


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        return action.choices[command]


def _settings(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in _NOT_SETTINGS}


def _apply_file_defaults(parser, args, argv):
    """Re-parse with config-file values as defaults so explicit flags still win."""
    if args.command == "train" or not args.config:
        return args
    sub = _subparser(parser, args.command)
    known = {a.dest: a for a in sub._actions}
    values = {}
    for key, raw in parse_text(Path(args.config).read_text()).items():
        dest = key.replace("-", "_")
        if dest not in known or dest in _NOT_SETTINGS:
            raise ParameterError(f"unknown config key {key!r} for {args.command}")
        if raw in ("None", ""):
            values[dest] = None
            continue
        action = known[dest]
        if isinstance(action, argparse._StoreTrueAction):
            values[dest] = raw.lower() in ("true", "1", "yes")
        else:
            values[dest] = action.type(raw) if action.type else raw
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def _check_required(args) -> None:
    missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command] if getattr(args, k) in (None, "")]
    if missing:
        raise ParameterError(f"{args.command} needs {', '.join(missing)}")


def _write_resolved(out: Path, command: str, settings: dict, train_config=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"# objcompose {command}"]
    if train_config is not None:
        lines.append(format_config(train_config).rstrip())
        lines.extend(f"# {k} = {v}" for k, v in settings.items())
    else:
        lines.extend(f"{k} = {v}" for k, v in settings.items())
    (out / RESOLVED_NAME).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> None:
    from .data import SynthParams, synthesize, write_dataset

    params = SynthParams(image_size=args.image_size, downsample_factor=args.downsample_factor,
                         box_min=min(20, args.image_size // 2), box_max=min(40, args.image_size))
    if args.num < 1:
        raise ParameterError("--num must be >= 1")
    if args.views == 1:
        raise ParameterError("--views must be 0 or >= 2")
    scenes = synthesize(args.num, seed=args.seed, params=params, views=args.views)
    write_dataset(scenes, args.out, downsample_factor=args.downsample_factor)
    _write_resolved(Path(args.out), args.command, _settings(args))
    log.info("wrote %d scenes to %s", len(scenes), args.out)


def cmd_fit_codec(args) -> None:
    from .codec import CodecConfig, dataset_images, fit_codec, save_codec
    from .data import load_dataset

    manifest, _ = load_dataset(args.data)
    cfg = CodecConfig(mode=args.mode, image_size=manifest.image_size, factor=manifest.downsample_factor,
                      seed=args.seed)
    if args.steps is not None:
        cfg.steps = args.steps
    codec = fit_codec(dataset_images(args.data), cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_codec(codec, out)
    _write_resolved(out.parent, args.command, _settings(args))
    log.info("saved %s codec (latent scale %.4f) to %s", args.mode, codec.scale.item(), out)


def _train_config(args):
    from .training import TrainConfig

    values = parse_text(Path(args.config).read_text()) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise ParameterError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.steps is not None:
        values["steps"] = str(args.steps)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return apply_overrides(TrainConfig(), values)


def cmd_train(args) -> None:
    from .codec import load_codec
    from .data import load_dataset
    from .training import fit_data_codec, load_checkpoint, train

    config = _train_config(args)
    manifest, store = load_dataset(args.data)
    if manifest.image_size != config.codec.image_size or manifest.downsample_factor != config.codec.factor:
        raise DataError(
            f"dataset is {manifest.image_size}px / f={manifest.downsample_factor} but config expects "
            f"{config.codec.image_size}px / f={config.codec.factor}"
        )
    config.validate()
    samples = list(store)
    out = Path(args.out)
    _write_resolved(out, args.command, _settings(args), train_config=config)
    state = None
    codec = None
    if args.resume:
        state = load_checkpoint(args.resume, config)
        log.info("resuming from step %d", state.step)
    elif args.codec:
        codec = load_codec(args.codec)
        if codec.config.mode != config.codec.mode:
            log.warning("codec file mode %r overrides config mode %r", codec.config.mode, config.codec.mode)
    else:
        codec = fit_data_codec(config, samples)
    state = train(config, samples=samples, out_dir=out, state=state, codec=codec)
    log.info("finished at step %d", state.step)


def _load_for_sampling(args):
    from .data import load_dataset
    from .sampler import SamplerSchedule
    from .training import load_checkpoint

    state = load_checkpoint(args.ckpt)
    manifest, store = load_dataset(args.data)
    if manifest.image_size != state.config.codec.image_size:
        raise DataError(f"dataset is {manifest.image_size}px but checkpoint expects {state.config.codec.image_size}px")
    sched = SamplerSchedule(T=state.schedule.T, ddim_steps=args.steps, beta_max=args.beta, gamma=args.gamma)
    sched.validate()
    return state, store, sched


def cmd_sample(args) -> None:
    from .data import save_png
    from .evaluation import generate_images, outside_box_psnr

    state, store, sched = _load_for_sampling(args)
    ids = [i.strip() for i in args.ids.split(",") if i.strip()]
    if not ids:
        raise ParameterError("--ids is empty")
    samples = [store.by_id(i) for i in ids]
    images = generate_images(state, samples, sched, seed=args.seed, use_ema=not args.no_ema)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = []
    for s, img in zip(samples, images):
        path = out / f"{s.scene_id}.png"
        save_png(path, img)
        meta.append({
            "scene_id": s.scene_id,
            "image": path.name,
            "box": s.box.as_list(),
            "outside_box_psnr": outside_box_psnr(img, s.hint_image, s.box),
        })
    blob = {"checkpoint": str(args.ckpt), "step": state.step, "seed": args.seed, "ddim_steps": args.steps,
            "beta": args.beta, "gamma": args.gamma, "ema": not args.no_ema, "samples": meta}
    (out / "samples.json").write_text(json.dumps(blob, indent=1))
    _write_resolved(out, args.command, _settings(args))
    log.info("wrote %d samples to %s", len(meta), out)


def cmd_eval(args) -> None:
    from .data import save_png
    from .evaluation import cross_view_alignment, generate_images, groups_from_samples, score_samples

    state, store, sched = _load_for_sampling(args)
    samples = list(store)[: args.limit] if args.limit else list(store)
    if not samples:
        raise DataError("no scenes to evaluate")
    images = generate_images(state, samples, sched, seed=args.seed, use_ema=not args.no_ema)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"checkpoint": str(args.ckpt), "step": state.step, "seed": args.seed, "ddim_steps": args.steps,
            "beta": args.beta, "gamma": args.gamma, "num_scenes": len(samples)}
    groups = groups_from_samples(samples)
    if len(groups) >= 2:
        res = cross_view_alignment(state, groups, use_ema=not args.no_ema, plot_path=out / "alignment.png")
        meta["alignment_within"], meta["alignment_between"] = res.within, res.between
    report = score_samples(images, samples, out_dir=out, metadata=meta)
    grid = np.concatenate([np.concatenate([s.hint_image, g, s.target_image], axis=1)
                           for s, g in zip(samples[:8], images[:8])], axis=0)
    save_png(out / "samples_grid.png", grid)
    _write_resolved(out, args.command, _settings(args))
    print(json.dumps({**report.aggregate, "histogram_divergence": report.histogram_divergence}))


def cmd_profile(args) -> None:
    from .evaluation import profile_run
    from .training import load_checkpoint

    if args.runs < 1:
        raise ParameterError("--runs must be >= 1")
    state = load_checkpoint(args.ckpt)
    result = profile_run(state, n=args.runs, steps=args.steps, seed=args.seed)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "profile.json").write_text(json.dumps(result, indent=1))
        _write_resolved(out, args.command, _settings(args))
    print(json.dumps(result))


COMMANDS = {
    "synth-data": cmd_synth,
    "fit-codec": cmd_fit_codec,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "profile": cmd_profile,
}


def run_command(argv=None) -> int:
    """Run one command; returns the process exit code."""
    parser = _parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args = _apply_file_defaults(parser, args, argv)
        _check_required(args)
        COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ObjComposeError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: load: {exc}", file=sys.stderr)
        return 1
    except KeyError as exc:
        print(f"error: data: unknown key {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())
