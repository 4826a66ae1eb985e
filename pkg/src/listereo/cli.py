"""Command-line entry point: gen, train, eval, sweep, colorize, gradcheck.

Exit codes: 0 success, 1 usage/config error, 2 numeric failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import contextlib
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import evaluation, gradcheck, imageio
from .autodiff import ContractError
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .scene import InMemoryDataset, SceneDataset, write_dataset
from .training import NumericError, load_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
MODE_ALIASES = {"self": "self_supervised", "supervised": "supervised"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="listereo", description="Stereo + LIDAR depth completion at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", help="run configuration file (section.key = value)")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--force", action="store_true", help="allow a non-empty output directory")

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--config", help="run configuration file")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="output directory for checkpoints and log")
    t.add_argument("--mode", choices=sorted(MODE_ALIASES), help="override train.mode")
    t.add_argument("--from-checkpoint", help="resume from this checkpoint")
    t.add_argument("--force", action="store_true", help="allow a non-empty output directory")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="checkpoint file")
    src.add_argument("--oracle", action="store_true", help="predict ground truth (metric plumbing check)")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--los", type=float, default=1.0, help="input level of sparsity")
    e.add_argument("--seed", type=int, default=0, help="subsampling seed")
    e.add_argument("--csv", help="also write the metrics as CSV to this file")

    s = sub.add_parser("sweep", help="run a sparsity sweep or loss-weight ablation")
    s.add_argument("kind", choices=("train", "infer", "beta"))
    s.add_argument("--config", help="run configuration file")
    s.add_argument("--data", help="training dataset directory (train and beta sweeps)")
    s.add_argument("--holdout", help="held-out dataset directory (default: generated from sweep.*)")
    s.add_argument("--checkpoint", help="trained checkpoint (infer sweep only)")
    s.add_argument("--out", required=True, help="report directory")
    s.add_argument("--force", action="store_true", help="allow a non-empty output directory")

    c = sub.add_parser("colorize", help="colorize a 16-bit depth PNG as PPM")
    c.add_argument("input", help="depth PNG16")
    c.add_argument("output", help="output PPM")
    c.add_argument("--near", type=float, help="depth mapped to the warmest color")
    c.add_argument("--far", type=float, help="depth mapped to the coolest color")

    k = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    k.add_argument("--tolerance", type=float, default=1e-4, help="primitive relative-error tolerance")
    k.add_argument("--e2e-tolerance", type=float, default=1e-3, help="end-to-end relative-error tolerance")
    k.add_argument("--seed", type=int, default=0, help="random instance seed")
    return p


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return config_mod.load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args) -> int:
    cfg = _load_config(args.config)
    out = _prepare_out(args.out, args.force)
    write_dataset(cfg.scene_specs(), out)
    (out / "config.txt").write_text(config_mod.serialize(cfg))
    print(f"wrote {cfg.scene.count} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.mode:
        cfg = replace(cfg, train=replace(cfg.train, mode=MODE_ALIASES[args.mode]))
        config_mod.validate(cfg)
    dataset = SceneDataset(args.data)
    out = Path(args.out)
    if args.from_checkpoint is None:
        out = _prepare_out(out, args.force)
    (out / "config.txt").write_text(config_mod.serialize(cfg))
    res = train(dataset, cfg.model, cfg.train, cfg.loss_weights(), out_dir=out,
                resume_from=args.from_checkpoint)
    print(f"trained to step {res.step} (epoch {res.epoch}); checkpoints in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = SceneDataset(args.data)
    if not 0 < args.los <= 1:
        raise ConfigError("--los must be in (0, 1]")
    if args.oracle:
        pred = [dataset.gt(i) for i in range(len(dataset))]
        p = np.concatenate([d.depth[d.valid] for d in pred])
        metrics = evaluation._metrics_from_arrays(p, p.copy())
    else:
        model = load_checkpoint(args.checkpoint).model
        metrics = evaluation.evaluate_model(model, dataset, args.los, args.seed)
    report = evaluation.SweepReport([evaluation.SweepRow(args.los, metrics, "oracle" if args.oracle else
                                                         model.config.variant, "eval", "single")])
    print(report.to_table(), end="")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return EXIT_OK


def _holdout(cfg: RunConfig, path):
    if path:
        return SceneDataset(path)
    base = cfg.scene.spec()
    return InMemoryDataset.generate(replace(base, seed=cfg.sweep.holdout_seed + i)
                                    for i in range(cfg.sweep.holdout))


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    if args.kind == "infer" and not args.checkpoint:
        raise UsageError("sweep infer requires --checkpoint")
    if args.kind != "infer" and args.checkpoint:
        raise UsageError("--checkpoint is only used by sweep infer")
    if args.kind != "infer" and not args.data:
        raise UsageError(f"sweep {args.kind} requires --data")
    train_set = SceneDataset(args.data) if args.data else None
    holdout = _holdout(cfg, args.holdout)
    out = _prepare_out(args.out, args.force)
    (out / "config.txt").write_text(config_mod.serialize(cfg))
    sw = cfg.sweep
    if args.kind == "beta":
        rows = evaluation.ablate_loss_weights(sw.betas, train_set, holdout, cfg.model, cfg.train,
                                              cfg.loss.weights("self_supervised"), sw.eval_seed)
        (out / "report.csv").write_text(evaluation.ablation_csv(rows))
        (out / "report.txt").write_text(evaluation.ablation_table(rows))
        print(evaluation.ablation_table(rows), end="")
        return EXIT_OK
    report = evaluation.SweepReport()
    if args.kind == "train":
        for mode in sw.modes:
            tcfg = replace(cfg.train, mode=mode)
            weights = cfg.loss.weights(mode)
            for variant in sw.variants:
                part = evaluation.sweep_train_time(sw.levels, train_set, holdout, cfg.model, tcfg, weights,
                                                   sw.eval_seed, variant, include_paper=False)
                report.rows.extend(part.rows)
            report.add_paper_rows(mode)
    else:
        model = load_checkpoint(args.checkpoint).model
        report = evaluation.sweep_inference_time(sw.levels, model, holdout, sw.eval_seed, cfg.train.mode)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_table())
    (out / "report.ppm").write_bytes(report.plot_ppm())
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_colorize(args) -> int:
    depth = imageio.decode_depth_png16(Path(args.input).read_bytes())
    Path(args.output).write_bytes(imageio.encode_ppm(evaluation.colorize(depth, args.near, args.far)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.check_primitives(args.tolerance, args.seed)
    results += [gradcheck.check_end_to_end(tolerance=args.e2e_tolerance, seed=args.seed, lidar_branch_kind=k)
                for k in ("regular_conv", "sparse_conv")]
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name.ljust(width)}  max_rel_error={r.max_rel_error:.3e}  "
              f"tol={r.tolerance:.0e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "colorize": cmd_colorize, "gradcheck": cmd_gradcheck}


@contextlib.contextmanager
def _thread_cap():
    value = os.environ.get("LISTEREO_THREADS")
    if not value:
        yield
        return
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"LISTEREO_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with _thread_cap():
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, imageio.CodecError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
