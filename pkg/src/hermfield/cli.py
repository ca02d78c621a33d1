"""Command-line front end: train, eval, gradcheck, export-field, bench."""

import argparse
import hashlib
import os
import sys
import time

import numpy as np

from . import __version__
from .checks import run_gradcheck
from .config import ConfigError, load_config, serialize_config
from .field import make_model
from .io import (
    format_metrics_csv,
    load_checkpoint,
    params_from_checkpoint,
    read_field_dump,
    save_checkpoint,
    write_field_dump,
)
from .losses import DivergenceError
from .problems import make_problem, relative_l2
from .training import TrainingDiverged, train

__all__ = ["main"]


def _build_model(config):
    problem = make_problem(config.problem.name, **config.problem.factory_kwargs())
    model = make_model(
        problem,
        config.encoding.to_encoding_config(problem.dim),
        width=config.mlp.width,
        depth=config.mlp.depth,
        omega0=config.mlp.omega0,
        omega_hidden=config.mlp.omega_hidden,
        activation=config.mlp.activation,
    )
    return problem, model


def _load(args):
    cfg = load_config(args.config, overrides=args.set or ())
    if args.threads is not None:
        cfg.run.threads = args.threads
    if args.deterministic:
        cfg.run.deterministic = True
    return cfg


def _manifest_text(cfg) -> str:
    resolved = serialize_config(cfg)
    build_id = hashlib.sha256(
        (resolved + __version__).encode("utf-8")
    ).hexdigest()[:16]
    return serialize_config(
        cfg,
        extra_sections={
            "manifest": {
                "build_id": build_id,
                "package_version": __version__,
                "seed": cfg.run.seed,
            }
        },
    )


def cmd_train(args) -> int:
    cfg = _load(args)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.ini"), "w", encoding="utf-8") as fh:
        fh.write(_manifest_text(cfg))

    def on_eval(row):
        print(
            f"epoch {row['epoch']:>7d}  loss_pde {row['loss_pde']:.3e}  "
            f"rel_l2 {row['rel_l2']:.3e}  levels {row['active_levels']}",
            flush=True,
        )

    try:
        result = train(cfg, on_eval=on_eval)
    except TrainingDiverged as e:
        res = e.result
        save_checkpoint(
            os.path.join(out_dir, "checkpoint_last.hngp"),
            res.model,
            res.state.params,
        )
        print(f"error: {e}", file=sys.stderr)
        return 1
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(format_metrics_csv(result.history))
    save_checkpoint(
        os.path.join(out_dir, "checkpoint_final.hngp"),
        result.model,
        result.state.params,
    )
    best = result.best_ema if result.best_ema is not None else result.state.ema
    save_checkpoint(os.path.join(out_dir, "checkpoint_ema.hngp"), result.model, best)
    print(f"final rel_l2 {result.history[-1]['rel_l2']:.6e}  best {result.best_rel_l2:.6e}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    problem, model = _build_model(cfg)
    params = params_from_checkpoint(model, load_checkpoint(args.checkpoint))
    rel = relative_l2(
        lambda p: model.forward_value(p, params)[0],
        problem,
        shape=cfg.run.eval_shape or None,
    )
    print(f"rel_l2 {rel:.6e}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load(args)
    report = run_gradcheck(
        cfg,
        num_params=args.num_params,
        seed=args.seed,
        inject_fault=args.inject_fault,
    )
    for line in report.lines():
        print(line)
    if not report.passed():
        print("gradcheck FAILED", file=sys.stderr)
        return 1
    print("gradcheck passed")
    return 0


def _parse_grid(spec: str) -> tuple[int, ...]:
    return tuple(int(s) for s in spec.lower().replace("x", " ").split())


def cmd_export_field(args) -> int:
    cfg = _load(args)
    problem, model = _build_model(cfg)
    params = params_from_checkpoint(model, load_checkpoint(args.checkpoint))
    shape = _parse_grid(args.grid)
    if len(shape) != problem.dim:
        print(
            f"error: grid {args.grid} has {len(shape)} dims, problem has {problem.dim}",
            file=sys.stderr,
        )
        return 1
    axes = [np.linspace(problem.box_lo[i], problem.box_hi[i], shape[i])
            for i in range(problem.dim)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, problem.dim)
    values = np.empty((pts.shape[0], problem.out_dim))
    for lo in range(0, pts.shape[0], 65536):
        block = pts[lo : lo + 65536]
        values[lo : lo + block.shape[0]] = model.forward_value(block, params)[0]
    write_field_dump(args.output, values, shape, problem.box_lo, problem.box_hi)
    if args.error_field:
        err = np.abs(values - problem.exact_value(pts))
        write_field_dump(args.error_field, err, shape, problem.box_lo, problem.box_hi)
    print(f"wrote {args.output} ({pts.shape[0]} points, {problem.out_dim} channels)")
    return 0


def cmd_bench(args) -> int:
    cfg = _load(args)
    cfg.run.epochs = args.warmup + args.epochs
    cfg.run.eval_stride = cfg.run.epochs + 1  # no mid-run evals
    result = train(cfg, collect_timing=True)
    rows = result.timing[args.warmup :]

    def mean(key):
        return 1000.0 * float(np.mean([r.get(key, 0.0) for r in rows]))

    pde, bc = mean("pde_fwd"), mean("bc_fwd")
    bwd, opt = mean("backward"), mean("optimizer")
    total = pde + bc + bwd + opt
    print("collocation,pde_ms,bc_ms,backward_ms,optimizer_ms,total_ms,backward_pct")
    print(
        f"{cfg.collocation.interior},{pde:.3f},{bc:.3f},{bwd:.3f},{opt:.3f},"
        f"{total:.3f},{100.0 * bwd / total:.1f}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="hermfield",
        description="Hermite hash-grid PDE fields: training and tooling",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="config or manifest INI path")
        sp.add_argument(
            "--set",
            action="append",
            metavar="SECTION.KEY=VALUE",
            help="override a config value (repeatable)",
        )
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--deterministic", action="store_true")

    sp = sub.add_parser("train", help="run the training loop")
    common(sp)
    sp.add_argument("--out", default="run_out", help="output directory")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="relative L2 of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference derivative checks")
    common(sp)
    sp.add_argument("--num-params", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument(
        "--inject-fault",
        action="store_true",
        help="perturb analytic derivatives; the checks must then fail",
    )
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("export-field", help="evaluate a checkpoint on a grid")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--grid", required=True, help="e.g. 128x128")
    sp.add_argument("--output", required=True)
    sp.add_argument("--error-field", help="also dump |u - u*| to this path")
    sp.set_defaults(fn=cmd_export_field)

    sp = sub.add_parser("bench", help="per-epoch component timing")
    common(sp)
    sp.add_argument("--warmup", type=int, default=3)
    sp.add_argument("--epochs", type=int, default=10)
    sp.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DivergenceError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
