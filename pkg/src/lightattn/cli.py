"""``lightattn <train|curve|gradcheck|params|bench> --config <path>``.

Exit codes: 0 success, 1 a verification failed, 2 bad config or data,
3 training diverged.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import experiments as ex
from .config import ExperimentConfig, load_config
from .errors import ConfigurationError, ContractError, DivergenceError, LightAttnError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out) if args.out else Path(cfg.base_dir) / cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(cfg: ExperimentConfig, out: Path) -> int:
    summary = ex.run_train(cfg, out)
    print(f"trained {summary['steps']} steps ({summary['epochs']} epochs); final loss {summary['final_train_loss']:.4f}")
    print(f"wrote {out / 'metrics.csv'} and {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_curve(cfg: ExperimentConfig, out: Path) -> int:
    def progress(row):
        print(
            f"{row['variant']:>12} fold {row['fold']} blocks {row['n_train_blocks']:>3}: "
            f"intent F1 {row['intent_f1']:.3f} speaker acc {row['speaker_acc']:.3f}",
            flush=True,
        )

    rows, fold_seeds = ex.learning_curve(cfg, progress=progress)
    extra = {"split_seed": cfg.curve.seed, "fold_seeds": ",".join(str(s) for s in fold_seeds)}
    ex.write_csv(out / "curve.csv", ex.CURVE_COLUMNS, rows, cfg, cfg.train.seed, extra)
    print(f"wrote {out / 'curve.csv'}")
    return EXIT_OK


def cmd_gradcheck(cfg: ExperimentConfig, out: Path) -> int:
    rows = ex.gradcheck_report(cfg)
    ex.write_csv(out / "gradcheck.csv", ex.GRADCHECK_COLUMNS, rows, cfg, cfg.gradcheck.seed)
    for row in rows:
        flag = "ok" if row["passed"] else "FAIL"
        print(f"{row['check']:<36} {row['max_rel_error']:.3e}  {flag}")
    failed = [r["check"] for r in rows if not r["passed"]]
    if failed:
        print(f"{len(failed)} check(s) at or above {cfg.gradcheck.tolerance}: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_params(cfg: ExperimentConfig, out: Path) -> int:
    rows = ex.parameter_table(cfg)
    ex.write_csv(out / "params.csv", ex.PARAM_COLUMNS, rows, cfg, cfg.train.seed)
    for row in rows:
        print(f"{row['variant']:>12}: encoder {row['encoder_params']:>10,}  position extras {row['position_extras']:>8,}")
    print("ordering light <= concat_abs < relative_dai holds")
    return EXIT_OK


def cmd_bench(cfg: ExperimentConfig, out: Path) -> int:
    rows = ex.bench(cfg)
    ex.write_csv(out / "bench.csv", ex.BENCH_COLUMNS, rows, cfg, cfg.train.seed)
    for row in rows:
        print(f"{row['mode']:>8} L={row['length']:<4} heads={row['heads']}: {row['score_elements']:>10,} score elements  {row['seconds'] * 1e3:8.2f} ms")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "curve": cmd_curve,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lightattn", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--out", help="output directory (default: the config's output_dir)")
    parser.add_argument("--seed", type=int, help="override train.seed")
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, deterministic)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
        if args.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        out = _out_dir(args, cfg)
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](cfg, out)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ContractError as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (LightAttnError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
