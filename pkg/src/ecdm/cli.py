"""Command-line entry point: ``ecdm <command> [options]``.

Exit codes: 0 success, 2 configuration/usage error, 3 data error (missing or
malformed inputs), 4 numeric failure (non-finite values), 1 anything else.
Relative paths resolve against ``--workdir``.  ``ECDM_WORKERS`` caps the
number of threads torch may use.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointError
from .config import ConfigError, apply_overrides, dump_config, flatten, load_config, parse_set_args

log = logging.getLogger("ecdm")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
COMMANDS = ("gen-data", "edges", "train", "sample", "eval", "augment", "selftest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits on its own; route its complaints through our exit codes instead
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_usage()}")


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _jsonable(value):
    if dataclasses.is_dataclass(value):
        return {k: _jsonable(v) for k, v in flatten(value).items()}
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (tuple, list)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def write_run_json(out_dir: Path, command: str, config: dict, seed, started: float) -> Path:
    path = out_dir / "run.json"
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "config": _jsonable(config),
        "seed": seed,
        "version": version_string(),
        "wall_time_s": round(time.time() - started, 3),
    }
    path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    return path


def _apply_workers() -> None:
    raw = os.environ.get("ECDM_WORKERS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ECDM_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("ECDM_WORKERS must be >= 1")
    torch.set_num_threads(n)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, wd: Path) -> int:
    from .data import GenConfig, generate_dataset
    from .edges import HighPassConfig

    cfg = GenConfig(args.height, args.width, args.max_objects, HighPassConfig(args.cutoff))
    out = wd / args.out
    started = time.time()
    generate_dataset(args.n, out, seed=args.seed, cfg=cfg, split=args.split, name=args.name)
    write_run_json(out, "gen-data", {"n": args.n, "split": args.split, "name": args.name, "gen": dataclasses.asdict(cfg)},
                   args.seed, started)
    print(f"wrote {args.n} pairs to {out}")
    return EXIT_OK


def cmd_edges(args, wd: Path) -> int:
    from .data import IMAGE_SUFFIXES, load_image, save_image
    from .edges import HighPassConfig, edge_condition

    src, out = wd / args.input, wd / args.out
    if not src.is_dir():
        raise FileNotFoundError(f"input directory not found: {src}")
    cfg = HighPassConfig(args.cutoff, args.soft_width)
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no images in {src}")
    started = time.time()
    out.mkdir(parents=True, exist_ok=True)
    for p in files:
        img = torch.from_numpy(load_image(p))
        save_image(edge_condition(img, cfg), out / f"{p.stem}.png")
    (out / "highpass.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True) + "\n")
    write_run_json(out, "edges", {"input": str(src), "highpass": cfg}, None, started)
    print(f"wrote {len(files)} edge maps to {out}")
    return EXIT_OK


def _train_config(args, wd: Path):
    from .tmat import TmatConfig

    base = TmatConfig()
    if args.config:
        return load_config(wd / args.config, base, args.set)
    return apply_overrides(base, parse_set_args(args.set))


def cmd_train(args, wd: Path) -> int:
    from .data import load_images, load_manifest
    from .tmat import prepare_data, run_tmat

    cfg = _train_config(args, wd)
    out = wd / args.out
    data_dir = wd / args.data
    thermal_m = load_manifest(data_dir / "manifest.json")
    visible_path = data_dir / "manifest_visible.json"
    visible = load_images(load_manifest(visible_path), channels=3) if visible_path.exists() else None
    if visible is None and cfg.s_adv > 0:
        raise FileNotFoundError(f"stage 2 needs visible images: {visible_path} not found")
    started = time.time()
    data = prepare_data(load_images(thermal_m, channels=1), visible, cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    ckpt = run_tmat(data, cfg, out, resume=(wd / args.resume) if args.resume else None)
    write_run_json(out, "train", {"data": str(data_dir), "resume": args.resume, "tmat": cfg}, cfg.seed, started)
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _sampler_config(base, args):
    items = {}
    if args.steps is not None:
        items["timesteps"] = str(args.steps)
        if base.order > args.steps:
            items["order"] = str(args.steps)
    if args.scale is not None:
        items["condition_scale"] = str(args.scale)
    if args.no_guidance:
        items["guidance"] = "false"
    prefixed = {k.partition(".")[2]: v for k, v in parse_set_args(args.set).items() if k.startswith("fast_sampler.")}
    stray = [k for k in parse_set_args(args.set) if not k.startswith("fast_sampler.")]
    if stray:
        raise ConfigError(f"only fast_sampler.* keys can be set at sampling time, got {stray}")
    items.update(prefixed)
    return apply_overrides(base, items)


def cmd_sample(args, wd: Path) -> int:
    from .data import IMAGE_SUFFIXES, load_image, record_seed, save_image
    from .samplers import fast_sample
    from .tmat import load_generator

    model, tcfg, _ = load_generator(wd / args.ckpt)
    scfg = _sampler_config(tcfg.fast_sampler, args)
    src, out = wd / args.edges, wd / args.out
    if not src.is_dir():
        raise FileNotFoundError(f"edge directory not found: {src}")
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no edge maps in {src}")
    started = time.time()
    out.mkdir(parents=True, exist_ok=True)
    schedule = tcfg.schedule()
    entries = []
    for i, p in enumerate(files):
        cond = torch.from_numpy(load_image(p, channels=1))[None]
        seed_i = record_seed(args.seed, i)
        with torch.no_grad():
            img = fast_sample(model, cond, schedule, scfg, seed=seed_i)
        name = f"{p.stem}.png"
        save_image(img[0], out / name)
        entries.append({"condition": str(p), "output": name, "seed": seed_i})
    (out / "samples.json").write_text(json.dumps({"ckpt": str(wd / args.ckpt), "seed": args.seed,
                                                  "samples": entries}, indent=1) + "\n")
    write_run_json(out, "sample", {"ckpt": str(wd / args.ckpt), "edges": str(src), "fast_sampler": scfg}, args.seed, started)
    print(f"wrote {len(entries)} samples to {out}")
    return EXIT_OK


def cmd_eval(args, wd: Path) -> int:
    from .metrics import FeatureExtractor, evaluate_set

    extractor = FeatureExtractor(seed=args.seed, feature_dim=args.feature_dim)
    started = time.time()
    report = evaluate_set(wd / args.gen, wd / args.ref, extractor)
    out = wd / args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    write_run_json(out.parent, "eval", {"gen": str(wd / args.gen), "ref": str(wd / args.ref),
                                        "extractor": extractor}, args.seed, started)
    print(report.to_json())
    return EXIT_OK


def cmd_augment(args, wd: Path) -> int:
    from .augment import materialize, merge_datasets, plan_counts, synthesize_pseudo
    from .data import load_manifest, save_manifest
    from .edges import HighPassConfig
    from .tmat import load_generator

    real = load_manifest(wd / args.real)
    visible = load_manifest(wd / args.visible)
    model, tcfg, _ = load_generator(wd / args.ckpt)
    scfg = _sampler_config(tcfg.fast_sampler, args)
    plan = plan_counts(len(real), args.ratio, args.mode)
    out = wd / args.out
    expected = None
    hp_file = Path(visible.root or ".") / "highpass.json"
    if hp_file.exists():
        expected = HighPassConfig(**json.loads(hp_file.read_text()))
    started = time.time()
    pseudo = synthesize_pseudo(visible, model, tcfg.schedule(), out / "pseudo", scfg, tcfg.highpass,
                               expected_highpass=expected, seed=args.seed)
    merged = merge_datasets(real, pseudo, plan, seed=args.seed)
    final = materialize(merged, out / "merged")
    save_manifest(final, out / "manifest.json")
    write_run_json(out, "augment", {"real": args.real, "visible": args.visible, "ckpt": args.ckpt,
                                    "plan": dataclasses.asdict(plan), "fast_sampler": scfg}, args.seed, started)
    print(f"merged {plan.n_real_used} real + {plan.n_pseudo} pseudo records into {out / 'manifest.json'}")
    return EXIT_OK


def cmd_selftest(args, wd: Path) -> int:
    from .selftest import run_selftest

    started = time.time()
    out = wd / args.out if args.out else None
    results = run_selftest(out)
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} checks passed in {time.time() - started:.1f}s")
    if out is not None:
        write_run_json(out, "selftest", {"checks": {r.name: r.passed for r in results}}, 0, started)
    return EXIT_OK if passed == len(results) else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser


def _add_sampler_flags(p):
    p.add_argument("--steps", type=int, default=None, help="solver steps (default from checkpoint)")
    p.add_argument("--scale", type=float, default=None, help="guidance condition scale")
    p.add_argument("--no-guidance", action="store_true", help="use the conditional prediction only")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="fast_sampler.* override")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ecdm", description="Edge-guided conditional diffusion for thermal images.")
    parser.add_argument("--workdir", default=".", help="base directory for relative paths")
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--version", action="version", version=f"ecdm {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="render a synthetic paired visible/thermal dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--name", default="synthetic")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=80)
    p.add_argument("--max-objects", type=int, default=3)
    p.add_argument("--cutoff", type=float, default=0.05)

    p = sub.add_parser("edges", help="write high-pass edge maps for a folder of images")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cutoff", type=float, default=0.05)
    p.add_argument("--soft-width", type=float, default=0.0)

    p = sub.add_parser("train", help="two-stage training on a dataset folder")
    p.add_argument("--config", default=None, help="flat key = value file")
    p.add_argument("--data", required=True, help="dataset folder with manifest.json (+ manifest_visible.json)")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("sample", help="fast-sample thermal images from edge maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_sampler_flags(p)

    p = sub.add_parser("eval", help="FID/KID/PSNR/SSIM of a generated folder against a reference folder")
    p.add_argument("--gen", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", default="report.json")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature-dim", type=int, default=64)

    p = sub.add_parser("augment", help="synthesize pseudo thermal data and merge it with a real set")
    p.add_argument("--real", required=True)
    p.add_argument("--visible", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=("multiple", "mixed"), required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_sampler_flags(p)

    p = sub.add_parser("selftest", help="run the fast invariant suite")
    p.add_argument("--out", default=None, help="keep artifacts here instead of a temp dir")
    return parser


HANDLERS = {
    "gen-data": cmd_gen_data,
    "edges": cmd_edges,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "augment": cmd_augment,
    "selftest": cmd_selftest,
}


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    wd = Path(args.workdir)
    try:
        _apply_workers()
        return HANDLERS[args.command](args, wd)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, CheckpointError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    np.seterr(all="ignore")
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
