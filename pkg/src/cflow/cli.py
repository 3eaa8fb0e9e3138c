"""Command-line front end.

Every command prints the resolved configuration first. Failures print a
single ``error: <kind>: <message>`` line to stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .model import (
    ConditionalFlowModel,
    LatentStack,
    ModelConfig,
    densify,
    evaluate,
    interpolate,
    load_checkpoint,
    manipulate,
    partial_embedding,
    read_metrics,
    sample_conditional,
    train,
)
from .pointcloud import HilbertConfig, PointCloud, hilbert_sort, read_xyz, write_xyz
from .tensor import load_tsr, no_grad, save_tsr

CHECKPOINT_NAME = "model.cfw"
METRICS_NAME = "metrics.tsv"


class CLIError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _load_config(args) -> ModelConfig:
    cfg = ModelConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CLIError("config", f"{path}: no such file")
        try:
            cfg = ModelConfig.from_text(path.read_text())
        except (ValueError, TypeError) as exc:
            raise CLIError("config", str(exc)) from None
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "temperature", None) is not None:
        cfg.temperature = args.temperature
    try:
        cfg.validate()
    except ValueError as exc:
        raise CLIError("config", str(exc)) from None
    return cfg


def _model_from_checkpoint(args) -> ConditionalFlowModel:
    if not args.checkpoint:
        raise CLIError("usage", f"{args.command} requires --checkpoint")
    if not Path(args.checkpoint).is_file():
        raise CLIError("checkpoint", f"{args.checkpoint}: no such file")
    model = load_checkpoint(args.checkpoint)
    if getattr(args, "seed", None) is not None:
        model.config.seed = args.seed
    if getattr(args, "temperature", None) is not None:
        model.config.temperature = args.temperature
    return model


def _echo(cfg: ModelConfig) -> None:
    sys.stdout.write("# resolved config\n")
    sys.stdout.write(cfg.to_text())
    sys.stdout.flush()


def _out_dir(args) -> Path:
    if not args.out:
        raise CLIError("usage", f"{args.command} requires --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(args, cfg: ModelConfig, need_b: bool = True):
    if not args.data_a:
        raise CLIError("usage", f"{args.command} requires --data-a")
    if need_b and not args.data_b:
        raise CLIError("usage", f"{args.command} requires --data-b")
    for d in (args.data_a, args.data_b if need_b else None):
        if d is not None and not Path(d).is_dir():
            raise CLIError("data", f"{d}: not a directory")
    if need_b:
        return data_mod.ingest_pairs(args.data_a, args.data_b, cfg)
    return _ingest_single(args.data_a, cfg, "a")


def _ingest_single(directory, cfg: ModelConfig, branch: str):
    files = data_mod._index_dir(directory)
    stems = sorted(files)
    hilbert = HilbertConfig(cfg.hilbert_order)
    xs = [
        data_mod.load_sample(files[s], cfg.shape(branch), np.random.default_rng([cfg.seed, i, ord(branch)]), hilbert)
        for i, s in enumerate(stems)
    ]
    arr = np.stack(xs) if xs else np.zeros((0,) + cfg.shape(branch))
    return stems, arr


def _write_sample(path_stem: Path, x: np.ndarray, pointcloud: bool) -> Path:
    if pointcloud:
        path = path_stem.parent / f"{path_stem.name}.xyz"
        write_xyz(path, x.reshape(-1, 3))
    else:
        path = path_stem.parent / f"{path_stem.name}.tsr"
        save_tsr(path, x)
    return path


# -- commands ----------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config(args)
    _echo(cfg)
    out = _out_dir(args)
    ds = _dataset(args, cfg)
    steps = 1000 if args.steps is None else args.steps
    model = ConditionalFlowModel(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT_NAME
    result = train(model, ds, steps, log_path=out / METRICS_NAME, checkpoint_path=ckpt, final_eval=steps > 0)
    if result.records:
        last = result.records[-1]
        print(f"final\tbpd_a={last.bpd_a!r}\tbpd_b_given_a={last.bpd_b_given_a!r}\tcycle={last.cycle!r}")
    print(f"checkpoint\t{ckpt}")
    return 0


def cmd_sample(args) -> int:
    """Conditional samples from ``--data-a``; with ``--data-b`` re-sample the
    first ``--keep-from-level`` latent levels of each target ``--passes`` times."""
    model = _model_from_checkpoint(args)
    cfg = model.config
    _echo(cfg)
    out = _out_dir(args)
    seed = cfg.seed
    if args.data_b:
        ds = _dataset(args, cfg)
        for i, stem in enumerate(ds.stems):
            rng = np.random.default_rng([seed, i])
            if cfg.pointcloud_b:
                pts = densify(model, ds.b[i], args.passes, rng, ds.a[i], args.keep_from_level)
                path = _write_sample(out / stem, pts, True)
                print(f"wrote\t{path}")
                continue
            for k in range(args.passes):
                x = partial_embedding(model, ds.b[i], args.keep_from_level, rng, ds.a[i])
                path = _write_sample(out / f"{stem}.p{k}", x.data, False)
                print(f"wrote\t{path}")
        return 0
    stems, xa = _dataset(args, cfg, need_b=False)
    for i, stem in enumerate(stems):
        xb = sample_conditional(model, xa[i], cfg.temperature, np.random.default_rng([seed, i]))
        path = _write_sample(out / stem, xb.data, cfg.pointcloud_b)
        print(f"wrote\t{path}")
    return 0


def cmd_encode(args) -> int:
    model = _model_from_checkpoint(args)
    cfg = model.config
    _echo(cfg)
    out = _out_dir(args)
    if args.data_b:
        ds = _dataset(args, cfg)
        stems, xa, xb = ds.stems, ds.a, ds.b
    else:
        stems, xa = _dataset(args, cfg, need_b=False)
        xb = None
    with no_grad():
        for i, stem in enumerate(stems):
            za, zb, _, _ = model.encode(xa[i], None if xb is None else xb[i])
            for tag, stack in (("a", za), ("b", zb)):
                if stack is None:
                    continue
                for lvl, z in enumerate(stack.arrays(), 1):
                    save_tsr(out / f"{stem}.{tag}.z{lvl}.tsr", z)
    print(f"encoded\t{len(stems)}")
    return 0


def _read_stack(directory: Path, stem: str, tag: str, levels: int) -> LatentStack:
    arrays = []
    for lvl in range(1, levels + 1):
        path = directory / f"{stem}.{tag}.z{lvl}.tsr"
        if not path.is_file():
            raise CLIError("data", f"{path}: missing latent level")
        arrays.append(load_tsr(path))
    return LatentStack.from_arrays(arrays, unbatched=True)


def cmd_decode(args) -> int:
    model = _model_from_checkpoint(args)
    cfg = model.config
    _echo(cfg)
    out = _out_dir(args)
    if not args.latents:
        raise CLIError("usage", "decode requires --latents")
    latents = Path(args.latents)
    stems = sorted({p.name.split(".")[0] for p in latents.glob("*.b.z1.tsr")})
    with no_grad():
        for stem in stems:
            zb = _read_stack(latents, stem, "b", cfg.levels)
            za = _read_stack(latents, stem, "a", cfg.levels)
            xb = model.decode(zb, za)
            path = _write_sample(out / stem, xb.data, cfg.pointcloud_b)
            print(f"wrote\t{path}")
    return 0


def cmd_eval(args) -> int:
    model = _model_from_checkpoint(args)
    cfg = model.config
    _echo(cfg)
    ds = _dataset(args, cfg)
    summary = evaluate(model, ds)
    lines = [f"{k}\t{summary[k]!r}" for k in ("bpd_a", "bpd_b_given_a", "bpd_joint", "cycle")]
    lines.append(f"dequantized\t{'a' if cfg.dequantize_a else ''}{'b' if cfg.dequantize_b else ''}")
    if args.log:
        records = [r for r in read_metrics(args.log) if r.phase == "eval"]
        if records:
            ref = records[-1]
            lines.append(f"log_bpd_b_given_a\t{ref.bpd_b_given_a!r}")
            lines.append(f"log_abs_diff\t{abs(ref.bpd_b_given_a - summary['bpd_b_given_a'])!r}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        (_out_dir(args) / "eval.tsv").write_text(text)
    return 0


def cmd_sort_pc(args) -> int:
    cfg = _load_config(args)
    _echo(cfg)
    if not args.input:
        raise CLIError("usage", "sort-pc requires --input")
    if not args.out:
        raise CLIError("usage", "sort-pc requires --out")
    pts = read_xyz(args.input)
    if len(pts) == 0:
        raise CLIError("data", f"{args.input}: no points")
    pc = PointCloud.normalize(pts)
    order = hilbert_sort(pc, HilbertConfig(cfg.hilbert_order))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_xyz(args.out, pts[order])
    print(f"wrote\t{args.out}")
    return 0


def _single(path, cfg: ModelConfig, branch: str) -> np.ndarray:
    if not Path(path).is_file():
        raise CLIError("data", f"{path}: no such file")
    return data_mod.load_sample(path, cfg.shape(branch), cfg.seed, HilbertConfig(cfg.hilbert_order))


def cmd_interpolate(args) -> int:
    model = _model_from_checkpoint(args)
    cfg = model.config
    _echo(cfg)
    out = _out_dir(args)
    if not (args.x1 and args.x2):
        raise CLIError("usage", "interpolate requires --x1 and --x2")
    conditional = bool(args.cond1 or args.cond2)
    branch = "b" if conditional else "a"
    x1, x2 = _single(args.x1, cfg, branch), _single(args.x2, cfg, branch)
    c1 = _single(args.cond1, cfg, "a") if conditional else None
    c2 = _single(args.cond2, cfg, "a") if conditional else None
    pointcloud = cfg.pointcloud_b if conditional else cfg.pointcloud_a
    frames = max(args.frames, 2)
    for k in range(frames):
        t = k / (frames - 1)
        x = interpolate(model, x1, x2, t, c1, c2)
        path = _write_sample(out / f"frame{k:03d}", x.data, pointcloud)
        print(f"wrote\t{path}\tt={t!r}")
    return 0


def cmd_manipulate(args) -> int:
    model = _model_from_checkpoint(args)
    cfg = model.config
    _echo(cfg)
    out = _out_dir(args)
    if not (args.xb1 and args.xa1 and args.xa2):
        raise CLIError("usage", "manipulate requires --xb1, --xa1 and --xa2")
    xb1 = _single(args.xb1, cfg, "b")
    xa1 = _single(args.xa1, cfg, "a")
    xa2 = _single(args.xa2, cfg, "a")
    xb2 = manipulate(model, xb1, xa1, xa2)
    path = _write_sample(out / "manipulated", xb2.data, cfg.pointcloud_b)
    print(f"wrote\t{path}")
    return 0


def cmd_make_toy(args) -> int:
    out = _out_dir(args)
    n = args.count
    if args.task == "image":
        ds = data_mod.toy_image_pairs(n, seed=args.seed or 0)
    else:
        ds = data_mod.toy_pointgrid_pairs(n, seed=args.seed or 0)
    for tag, arr in (("a", ds.a), ("b", ds.b)):
        d = out / tag
        d.mkdir(exist_ok=True)
        for stem, x in zip(ds.stems, arr):
            save_tsr(d / f"{stem}.tsr", x)
    print(f"wrote\t{n} pairs to {out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "sort-pc": cmd_sort_pc,
    "interpolate": cmd_interpolate,
    "manipulate": cmd_manipulate,
    "make-toy": cmd_make_toy,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cflow", description="Two-branch conditional normalizing flow.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--data-a", dest="data_a", help="branch A directory")
        p.add_argument("--data-b", dest="data_b", help="branch B directory")
        p.add_argument("--out", help="output directory (output file for sort-pc)")
        p.add_argument("--seed", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--checkpoint")
        p.add_argument("--temperature", type=float)
        p.add_argument("--keep-from-level", dest="keep_from_level", type=int, default=1)
        p.add_argument("--passes", type=int, default=1)
    cmds = sub.choices
    cmds["eval"].add_argument("--log", help="metrics log to compare against")
    cmds["sort-pc"].add_argument("--input", help="point-cloud text file")
    cmds["decode"].add_argument("--latents", help="directory written by encode")
    cmds["interpolate"].add_argument("--x1")
    cmds["interpolate"].add_argument("--x2")
    cmds["interpolate"].add_argument("--cond1")
    cmds["interpolate"].add_argument("--cond2")
    cmds["interpolate"].add_argument("--frames", type=int, default=5)
    for flag in ("--xb1", "--xa1", "--xa2"):
        cmds["manipulate"].add_argument(flag)
    cmds["make-toy"].add_argument("--task", choices=("image", "pointgrid"), default="image")
    cmds["make-toy"].add_argument("--count", type=int, default=512)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CLIError as exc:
        kind, msg = exc.kind, str(exc)
    except FileNotFoundError as exc:
        kind, msg = "io", str(exc)
    except (ValueError, RuntimeError, OSError) as exc:
        kind, msg = type(exc).__name__, str(exc)
    sys.stderr.write(f"error: {kind}: {' '.join(msg.split())}\n")
    return 1


if __name__ == "__main__":
    sys.exit(main())
