"""Command-line entry point: ``sparsepat {simulate,train,infer,eval,params}``.

Exit codes: 0 success, 1 invalid configuration / arguments / inputs,
2 failure while doing the work.  Errors go to stderr as one line:
``sparsepat: error: <kind>: <message>``.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import re
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class InvalidInput(Exception):
    """Raised for anything detected before work begins."""


@contextlib.contextmanager
def validating():
    try:
        yield
    except InvalidInput:
        raise
    except Exception as exc:
        raise InvalidInput(f"{type(exc).__name__}: {exc}") from exc


def _prepare_out(path: Path, force: bool, resume: bool = False):
    if path.exists() and any(path.iterdir()) and not (force or resume):
        raise InvalidInput(f"output directory {path} is not empty (use --force to overwrite)")


def _resolve(args):
    from .config import load_config

    cfg = load_config(args.config)
    changes = {"seed": args.seed, "out": args.out}
    if getattr(args, "arch", None):
        changes["generator.arch"] = args.arch
    if getattr(args, "steps", None):
        changes["train.max_steps"] = args.steps
    if getattr(args, "mode", None):
        changes["metrics.mode"] = args.mode
    if getattr(args, "workers", None):
        changes["workers"] = args.workers
    return cfg.with_overrides(**changes)


# ------------------------------------------------------------------ simulate

def cmd_simulate(args):
    from .dataset import build_dataset

    with validating():
        cfg = _resolve(args)
        out = Path(cfg.out)
        if args.dry_run:
            print(cfg.dumps(), end="")
            return EXIT_OK
        _prepare_out(out, args.force)
    cfg.write_snapshot(out)
    t0 = time.perf_counter()
    manifest = build_dataset(cfg.dataset, out, workers=cfg.workers, config_snapshot=cfg.to_dict())
    c = manifest["counts"]
    print(f"wrote {c['total']} pairs ({c['train']} train / {c['test']} test) to {out} "
          f"in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


# --------------------------------------------------------------------- train

CKPT_RE = re.compile(r"step_(\d+)\.ckpt$")


def latest_checkpoint(run_dir):
    ckpts = [(int(m.group(1)), p) for p in Path(run_dir, "checkpoints").glob("step_*.ckpt")
             if (m := CKPT_RE.search(p.name))]
    return max(ckpts)[1] if ckpts else None


def _truncate_log(log_path: Path, step: int):
    """Drop log lines at or after ``step`` (written after the last checkpoint)."""
    if not log_path.exists():
        return
    keep = [ln for ln in log_path.read_text().splitlines() if ln and json.loads(ln)["step"] < step]
    log_path.write_text("".join(ln + "\n" for ln in keep))


def cmd_train(args):
    from .dataset import load_manifest, load_pairs
    from .gan import Trainer
    from .models import Generator, PatchDiscriminator

    with validating():
        cfg = _resolve(args)
        run = Path(cfg.out)
        if args.dry_run:
            print(cfg.dumps(), end="")
            return EXIT_OK
        _prepare_out(run, args.force, args.resume)
        manifest = load_manifest(args.manifest)
        pairs = load_pairs(manifest, "train")
        if not pairs:
            raise InvalidInput("manifest has no training samples")
        trainer = None
        if args.resume:
            ckpt = latest_checkpoint(run)
            if ckpt is not None:
                trainer = Trainer.from_checkpoint(ckpt, cfg.train)
                if trainer.gen.cfg.to_dict() != cfg.generator.to_dict():
                    raise InvalidInput(f"{ckpt}: generator config differs from the run config")
                if trainer.disc.cfg.to_dict() != cfg.discriminator.to_dict():
                    raise InvalidInput(f"{ckpt}: discriminator config differs from the run config")
        if trainer is None:
            trainer = Trainer(Generator(cfg.generator, seed=cfg.seed),
                              PatchDiscriminator(cfg.discriminator, seed=cfg.seed + 1), cfg.train)
    cfg.write_snapshot(run)
    (run / "checkpoints").mkdir(exist_ok=True)
    log = run / "train_log.jsonl"
    if trainer.step:
        _truncate_log(log, trainer.step)
        print(f"resuming at step {trainer.step}")
    elif log.exists():
        log.unlink()
    total = cfg.train.total_steps(len(pairs))
    t0 = time.perf_counter()

    def progress(rep):
        if rep.step % max(1, total // 20) == 0 or rep.step == total - 1:
            print(f"step {rep.step + 1}/{total}  d={rep.d_loss:.4f}  g_adv={rep.g_adv_loss:.4f}  "
                  f"l1={rep.g_l1_loss:.4f}  ({time.perf_counter() - t0:.0f} s)", flush=True)

    trainer.run(pairs, total, log_path=log, checkpoint_dir=run / "checkpoints", on_report=progress)
    print(f"trained to step {trainer.step}; checkpoint {latest_checkpoint(run)}")
    return EXIT_OK


# --------------------------------------------------------------------- infer

def _read_input(path: Path):
    from .containers import read_image

    if path.suffix == ".pai":
        return read_image(path)[0]
    from PIL import Image

    return np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0


def cmd_infer(args):
    from .containers import write_image, write_png
    from .gan import load_generator, predict

    with validating():
        if not args.inputs:
            raise InvalidInput("no input images given")
        gen = load_generator(args.checkpoint)
        images = [(Path(p), _read_input(Path(p))) for p in args.inputs]
        div = 2 ** gen.cfg.levels
        for p, img in images:
            if img.ndim != 2 or img.shape[0] % div or img.shape[1] % div:
                raise InvalidInput(f"{p}: size {img.shape} not divisible by 2^{gen.cfg.levels}={div}")
        out = Path(args.out or "infer")
        if args.dry_run:
            print(json.dumps({"checkpoint": args.checkpoint, "inputs": args.inputs, "out": str(out)}))
            return EXIT_OK
        _prepare_out(out, args.force)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(
        {"checkpoint": str(args.checkpoint), "generator": gen.cfg.to_dict(),
         "inputs": [str(p) for p, _ in images]}, indent=1, sort_keys=True) + "\n")
    for p, img in images:
        t0 = time.perf_counter()
        pred = predict(gen, img)
        dt = time.perf_counter() - t0
        stem = p.name.split(".")[0]
        write_image(out / f"{stem}.output.pai", pred, provenance={"source": str(p), "checkpoint": str(args.checkpoint)})
        write_png(out / f"{stem}.output.png", pred)
        print(f"{p.name}\t{img.shape[0]}x{img.shape[1]}\t{dt:.3f} s")
    return EXIT_OK


# ---------------------------------------------------------------------- eval

def cmd_eval(args):
    from .dataset import load_manifest
    from .metrics import evaluate_split

    with validating():
        cfg = _resolve(args)
        if bool(args.checkpoint) == bool(args.baseline):
            raise InvalidInput("give exactly one of --checkpoint or --baseline")
        source = args.checkpoint or args.baseline
        manifest = load_manifest(args.manifest)
        out = Path(cfg.out)
        if args.dry_run:
            print(cfg.dumps(), end="")
            return EXIT_OK
        _prepare_out(out, args.force)
        if args.checkpoint:
            from .gan import load_generator

            source = load_generator(args.checkpoint)
    cfg.write_snapshot(out)
    report = evaluate_split(manifest, source, cfg.metrics, split=args.split)
    if args.checkpoint:
        report.source = str(args.checkpoint)
    report.write_json(out / "report.json")
    report.write_csv(out / "samples.csv")
    table = report.table()
    (out / "report.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


# -------------------------------------------------------------------- params

def params_table(archs, base_cfg=None, disc_cfg=None):
    """Rows ``(name, count, reference, deviation)``; deviation = (count - ref) / ref."""
    from .models import (REFERENCE_GAN_TOTAL, REFERENCE_PARAMS, Arch, DiscriminatorConfig,
                         GeneratorConfig, build_discriminator, build_generator, count_parameters,
                         reference_generator_config)

    rows = []
    for a in archs:
        arch = Arch.parse(a)
        if base_cfg is None:
            gcfg = reference_generator_config(arch)
        else:
            gcfg = GeneratorConfig(**dict(base_cfg.to_dict(), arch=arch.value))
        n = count_parameters(build_generator(gcfg))
        ref = REFERENCE_PARAMS[arch]
        rows.append((arch.value, n, ref, (n - ref) / ref))
    dcfg = disc_cfg or DiscriminatorConfig()
    nd = count_parameters(build_discriminator(dcfg))
    rows.append(("discriminator", nd, None, None))
    g_main = next((r[1] for r in rows if r[0] == Arch.FDUNETPP.value), None)
    if g_main is None:
        gcfg = reference_generator_config(Arch.FDUNETPP) if base_cfg is None else base_cfg
        g_main = count_parameters(build_generator(gcfg))
    total = g_main + nd
    rows.append(("fdunetpp+discriminator", total, REFERENCE_GAN_TOTAL,
                 (total - REFERENCE_GAN_TOTAL) / REFERENCE_GAN_TOTAL))
    return rows


def format_params(rows):
    lines = [f"{'model':<24}{'params':>14}{'reference':>12}{'deviation':>11}"]
    for name, n, ref, dev in rows:
        r = f"{ref / 1e6:.1f}M" if ref else "-"
        d = f"{100 * dev:+.1f}%" if dev is not None else "-"
        lines.append(f"{name:<24}{n:>14,}{r:>12}{d:>11}")
    return "\n".join(lines)


def cmd_params(args):
    from .models import Arch

    with validating():
        archs = args.arch or [a.value for a in Arch]
        for a in archs:
            Arch.parse(a)
        cfg = _resolve(argparse.Namespace(config=args.config, seed=args.seed, out=args.out)) if args.config else None
        if args.dry_run:
            print(json.dumps({"archs": archs, "config": cfg.to_dict() if cfg else "reference"}, sort_keys=True))
            return EXIT_OK
    rows = params_table(archs, cfg.generator if cfg else None, cfg.discriminator if cfg else None)
    print(format_params(rows))
    return EXIT_OK


# ---------------------------------------------------------------------- main

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    common.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")

    parser = argparse.ArgumentParser(prog="sparsepat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="synthesize a paired dataset")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="train the GAN on a dataset")
    p.add_argument("--manifest", required=True, help="dataset manifest.json or its directory")
    p.add_argument("--arch", choices=["unet", "unetpp", "fdunet", "fdunetpp"])
    p.add_argument("--steps", type=int, help="override train.max_steps")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="run a trained generator on images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="*", help=".pai containers or grayscale image files")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score a model or baseline on a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=["identity", "input"])
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--mode", choices=["windowed", "global"], help="SSIM mode")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", parents=[common], help="parameter counts vs reference values")
    p.add_argument("--arch", nargs="+", help="architectures (default: all four)")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage; that is a validation error here
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    except InvalidInput as exc:
        msg = " ".join(str(exc).split())
        print(f"sparsepat: error: invalid: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except KeyboardInterrupt:
        print("sparsepat: error: failed: interrupted", file=sys.stderr)
        return EXIT_FAILED
    except Exception as exc:
        msg = " ".join(str(exc).split())
        print(f"sparsepat: error: failed: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
