"""The work behind each CLI command, returning rows ready for CSV."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .attention import AttentionConfig, ScoreProbe, count_parameters, init_attention, multi_head, position_extras
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, config_hash
from .data import Dataset, generate_synthetic, load_dataset, read_manifest, split_blocks
from .encoder import EncoderConfig, count_encoder_parameters, count_layer_parameters, position_inputs, with_period
from .errors import ConfigurationError, ContractError
from .gradcheck import grad_check
from .training import METRIC_COLUMNS, TrainConfig, evaluate, train


def write_csv(path, columns, rows, cfg: ExperimentConfig, seed: int, extra: Optional[dict] = None) -> None:
    """CSV with a ``# config_hash=... seed=...`` comment line, then header and rows."""
    meta = f"# config_hash={config_hash(cfg)} seed={seed}"
    for key, value in (extra or {}).items():
        meta += f" {key}={value}"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(meta + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.source == "synthetic":
        return generate_synthetic(
            d.task,
            d.n_utt,
            d.n_intents,
            d.n_speakers,
            d.seed,
            input_dim=d.input_dim,
            token_frames=d.token_frames,
            gap_frames=d.gap_frames,
            edge_frames=d.edge_frames,
            noise=d.noise,
            cyclic=d.cyclic,
        )
    if d.source == "manifest":
        if not d.manifest:
            raise ConfigurationError("data.source 'manifest' needs data.manifest")
        return load_dataset(read_manifest(Path(cfg.base_dir) / d.manifest))
    raise ConfigurationError(f"unknown data source {d.source!r}")


def _resolved_encoder(cfg: ExperimentConfig, dataset: Dataset, variant: Optional[str] = None) -> EncoderConfig:
    enc = cfg.encoder
    if enc.input_dim != dataset.input_dim:
        raise ConfigurationError(f"encoder.input_dim={enc.input_dim} but the data has input_dim={dataset.input_dim}")
    if variant is not None:
        enc = dataclasses.replace(enc, attention=dataclasses.replace(enc.attention, variant=variant))
    return with_period(enc, dataset.max_length())


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def run_train(cfg: ExperimentConfig, out_dir) -> dict:
    """Train once on the configured data; writes metrics.csv, model.ckpt and summary.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg)
    enc = _resolved_encoder(cfg, dataset)
    train_set, valid = dataset, None
    if cfg.valid_fraction > 0:
        order = np.random.default_rng(cfg.train.seed).permutation(len(dataset))
        n_valid = max(1, int(round(cfg.valid_fraction * len(dataset))))
        valid, train_set = dataset.subset(order[:n_valid]), dataset.subset(order[n_valid:])
    result = train(train_set, enc, cfg.train, valid=valid, target_accuracy=cfg.target_accuracy)

    write_csv(out_dir / "metrics.csv", METRIC_COLUMNS, result.metrics, cfg, cfg.train.seed)
    save_checkpoint(out_dir / "model.ckpt", result.model, {"config_hash": config_hash(cfg), "seed": cfg.train.seed})
    summary = {
        "config_hash": config_hash(cfg),
        "seed": cfg.train.seed,
        "steps": cfg.train.total_steps,
        "epochs": len(result.metrics),
        "final_train_loss": result.losses[-1],
        "time_to_target_seconds": result.time_to_target,
    }
    if valid is not None:
        summary["valid"] = evaluate(result.model, valid)
    # wall-clock stays out of the CSV and checkpoint so reruns are byte-identical
    summary["wall_seconds"] = result.seconds
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


# ---------------------------------------------------------------------------
# learning curve
# ---------------------------------------------------------------------------

CURVE_COLUMNS = ("kind", "variant", "fold", "n_train_blocks", "n_train", "n_test", "intent_f1", "speaker_acc")


def curve_steps(n_train: int, train_cfg: TrainConfig, epochs: int, min_steps: int) -> int:
    return max(min_steps, epochs * math.ceil(n_train / train_cfg.batch_size))


def learning_curve(
    cfg: ExperimentConfig,
    dataset: Optional[Dataset] = None,
    progress: Optional[Callable[[dict], None]] = None,
) -> tuple[list, list]:
    """Train every (variant, fold, prefix) and score it on the remaining blocks.

    Returns ``(rows, fold_seeds)``: detail rows in (variant, fold, prefix)
    order followed by one ``mean`` row per (variant, prefix).
    """
    dataset = dataset if dataset is not None else build_dataset(cfg)
    cc = cfg.curve
    split = split_blocks(len(dataset), cc.n_blocks, cc.n_folds, cc.seed)
    prefixes = sorted(cc.prefixes)
    if not prefixes or prefixes[0] < 1 or prefixes[-1] >= cc.n_blocks:
        raise ConfigurationError(f"curve.prefixes must lie in [1, {cc.n_blocks - 1}]")
    detail = []
    for variant in cfg.variants:
        enc = _resolved_encoder(cfg, dataset, variant)
        sizes = prefixes[-1:] if variant in cc.full_only else prefixes
        for fold in range(cc.n_folds):
            for k in sizes:
                train_idx, test_idx = split.train_test(fold, k)
                tc = dataclasses.replace(
                    cfg.train,
                    seed=cfg.train.seed + fold,
                    total_steps=curve_steps(len(train_idx), cfg.train, cc.epochs, cc.min_steps),
                )
                result = train(dataset.subset(train_idx), enc, tc)
                scores = evaluate(result.model, dataset.subset(test_idx))
                row = {
                    "kind": "fold",
                    "variant": variant,
                    "fold": fold,
                    "n_train_blocks": k,
                    "n_train": len(train_idx),
                    "n_test": len(test_idx),
                    "intent_f1": scores["intent_f1_micro"],
                    "speaker_acc": scores["speaker_acc"],
                }
                detail.append(row)
                if progress is not None:
                    progress(row)
    return detail + summarize_curve(detail), split.fold_seeds


def summarize_curve(detail: list) -> list:
    groups: dict = {}
    for row in detail:
        groups.setdefault((row["variant"], row["n_train_blocks"]), []).append(row)
    out = []
    for (variant, k), rows in groups.items():
        out.append(
            {
                "kind": "mean",
                "variant": variant,
                "fold": "mean",
                "n_train_blocks": k,
                "n_train": float(np.mean([r["n_train"] for r in rows])),
                "n_test": float(np.mean([r["n_test"] for r in rows])),
                "intent_f1": float(np.mean([r["intent_f1"] for r in rows])),
                "speaker_acc": float(np.mean([r["speaker_acc"] for r in rows])),
            }
        )
    return out


# ---------------------------------------------------------------------------
# parameter table
# ---------------------------------------------------------------------------

PARAM_COLUMNS = (
    "variant",
    "attention_params",
    "position_extras",
    "encoder_params",
    "encoder_params_unshared",
    "layer_stack_shared",
    "layer_stack_unshared",
)


def parameter_table(cfg: ExperimentConfig) -> list:
    """One row per variant; enforces light <= concat_abs < relative_dai."""
    rows = []
    for variant in ("absolute", "relative_dai", "concat_abs", "light"):
        enc = dataclasses.replace(cfg.encoder, attention=dataclasses.replace(cfg.encoder.attention, variant=variant))
        layer = count_layer_parameters(enc)
        rows.append(
            {
                "variant": variant,
                "attention_params": count_parameters(enc.attention),
                "position_extras": position_extras(enc.attention),
                "encoder_params": count_encoder_parameters(enc),
                "encoder_params_unshared": count_encoder_parameters(dataclasses.replace(enc, share_layers=False)),
                "layer_stack_shared": layer,
                "layer_stack_unshared": layer * enc.n_layers,
            }
        )
    total = {r["variant"]: r["encoder_params"] for r in rows}
    if not total["light"] <= total["concat_abs"] < total["relative_dai"]:
        raise ContractError(f"parameter ordering light <= concat_abs < relative_dai violated: {total}")
    return rows


# ---------------------------------------------------------------------------
# memory bench
# ---------------------------------------------------------------------------

BENCH_COLUMNS = ("mode", "variant", "length", "heads", "batch", "window", "score_elements", "expected_elements", "seconds")


def bench(cfg: ExperimentConfig) -> list:
    """Score-tensor element counts and wall time of full vs banded attention.

    Raises:
        ContractError: a measured count differs from ``B*N*L^2`` (full) or
            ``B*N*L*window`` (banded).
    """
    bc = cfg.bench
    rng = np.random.default_rng(cfg.train.seed)
    rows = []
    for L in bc.lengths:
        for N in bc.heads:
            att = AttentionConfig(n_heads=N, d_head=bc.d_head, window=bc.window, variant=bc.variant)
            enc = EncoderConfig(attention=att, position=dataclasses.replace(cfg.encoder.position, T=None))
            weights = init_attention(att, att.d_model, rng)
            x = rng.normal(size=(bc.batch, att.d_model, L))
            for mode in ("full", "windowed"):
                run_cfg = att if mode == "windowed" else dataclasses.replace(att, window=None)
                pos, _ = position_inputs(dataclasses.replace(enc, attention=run_cfg), L)
                probe = ScoreProbe()
                started = time.perf_counter()
                for _ in range(bc.repeats):
                    multi_head(x, pos, weights, run_cfg, probe=probe)
                seconds = (time.perf_counter() - started) / bc.repeats
                expected = bc.batch * N * L * (L if mode == "full" else bc.window)
                if probe.peak != expected:
                    raise ContractError(f"{mode} L={L} heads={N}: measured {probe.peak} score elements, expected {expected}")
                rows.append(
                    {
                        "mode": mode,
                        "variant": bc.variant,
                        "length": L,
                        "heads": N,
                        "batch": bc.batch,
                        "window": bc.window if mode == "windowed" else "",
                        "score_elements": probe.peak,
                        "expected_elements": expected,
                        "seconds": seconds,
                    }
                )
    return rows


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

GRADCHECK_COLUMNS = ("check", "max_rel_error", "tolerance", "passed")


def gradcheck_report(cfg: ExperimentConfig) -> list:
    from .gradcheck import standard_checks

    gc = cfg.gradcheck
    rows = []
    for name, f, params in standard_checks(gc.seed):
        err = grad_check(f, params, gc.eps)
        rows.append({"check": name, "max_rel_error": err, "tolerance": gc.tolerance, "passed": int(err < gc.tolerance)})
    return rows
