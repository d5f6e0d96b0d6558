"""Acceptance suite: one test (or group) per criterion, each tagged with ``criterion``.

The terminal summary prints one PASS/FAIL line per criterion.
"""

import dataclasses
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from lightattn.attention import (
    VARIANTS,
    AttentionConfig,
    count_parameters,
    init_attention,
    multi_head,
    position_extras,
    relative_bias_vector,
    window_mask,
)
from lightattn.autograd import Tensor, parameter
from lightattn.config import load_config
from lightattn.data import generate_synthetic
from lightattn.encoder import (
    EncoderConfig,
    count_encoder_parameters,
    encode,
    encode_layers,
    init_weights,
    position_inputs,
)
from lightattn.experiments import CURVE_COLUMNS, bench, learning_curve, write_csv
from lightattn.gradcheck import grad_check, standard_checks
from lightattn.position import PositionConfig, light_position, relative_light_table, relative_sinusoidal_table, sinusoidal_position
from lightattn.training import TrainConfig, TrainState, adam_step, average_checkpoints, evaluate, train, warmup_lr

from oracles import adam_trace, light_vector, multi_head_attention, sinusoid_vector

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


# ---------------------------------------------------------------------------
# 1. parameter arithmetic
# ---------------------------------------------------------------------------


@pytest.mark.criterion(1, "parameter arithmetic (336 / 263,168 / light <= concat_abs < relative_dai)")
def test_parameter_arithmetic():
    started = time.perf_counter()
    cfg = {v: AttentionConfig(n_heads=8, d_head=64, variant=v) for v in VARIANTS}
    assert position_extras(cfg["light"]) == 8 * (6 * 6 + 6) == 336
    assert count_parameters(cfg["light"]) - count_parameters(cfg["absolute"]) == 336
    assert position_extras(cfg["relative_dai"]) == 512 * 512 + 2 * 512 == 263_168
    enc = {v: count_encoder_parameters(EncoderConfig(attention=cfg[v])) for v in VARIANTS}
    assert enc["light"] <= enc["concat_abs"] < enc["relative_dai"]
    att = {v: count_parameters(cfg[v]) for v in VARIANTS}
    assert att["light"] <= att["concat_abs"] < att["relative_dai"]
    print(f"\n  encoder totals: {enc}")
    assert time.perf_counter() - started < 1.0


# ---------------------------------------------------------------------------
# 2. oracle equivalence
# ---------------------------------------------------------------------------

T_ORACLE = 16


def _instance(variant, rng):
    L = int(rng.integers(1, 9))
    d_head = int(rng.integers(1, 4)) * 2
    cfg = AttentionConfig(n_heads=2, d_head=d_head, window=None, variant=variant)
    w = init_attention(cfg, cfg.d_model, rng)
    # position parameters at unit scale so the position term is not negligible
    for name in ("u", "v_pos"):
        if getattr(w, name) is not None:
            setattr(w, name, parameter(rng.normal(size=getattr(w, name).shape)))
    x = rng.normal(size=(cfg.d_model, L))
    pc = PositionConfig(T=T_ORACLE)
    if variant == "absolute":
        pos = sinusoidal_position(L, cfg.d_model, T_ORACLE).values
        kw = dict(p=pos)
    elif variant == "concat_abs":
        pos = light_position(L, pc).values
        kw = dict(p=pos)
    elif variant == "light":
        # wide enough for the banded path's window radius too
        pos = relative_light_table(max(L - 1, 2), pc)
        kw = dict(rel=lambda d: light_vector(d, T_ORACLE))
    else:
        pos = relative_sinusoidal_table(max(L - 1, 2), cfg.d_model, T_ORACLE)
        kw = dict(rel=lambda d, n=cfg.d_model: sinusoid_vector(d, n, T_ORACLE))
    return cfg, w, x, pos, kw


@pytest.mark.criterion(2, "oracle equivalence (50 instances per variant, bias vector, windowed)")
def test_oracle_equivalence():
    started = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}
    for variant in VARIANTS:
        worst[variant] = 0.0
        worst_window = 0.0
        for _ in range(50):
            cfg, w, x, pos, kw = _instance(variant, rng)
            L = x.shape[1]
            out = multi_head(x, pos, w, cfg).data
            expected = multi_head_attention(variant, x, w, cfg.n_heads, **kw)
            worst[variant] = max(worst[variant], float(np.abs(out - expected).max()))

            window = int(rng.choice([1, 3, 5]))
            wcfg = dataclasses.replace(cfg, window=window)
            banded = multi_head(x, pos, w, wcfg).data
            masked = multi_head_attention(variant, x, w, cfg.n_heads, mask=window_mask(L, window), **kw)
            worst_window = max(worst_window, float(np.abs(banded - masked).max()))
        assert worst[variant] < 1e-12, (variant, worst[variant])
        assert worst_window < 1e-12, (variant, worst_window)

    worst_bias = 0.0
    for _ in range(50):
        cfg = AttentionConfig(n_heads=2, d_head=2, window=None, variant="light")
        w = init_attention(cfg, cfg.d_model, rng)
        L = int(rng.integers(1, 9))
        table = relative_light_table(L - 1, PositionConfig(T=T_ORACLE))
        b = relative_bias_vector(w, np.arange(-(L - 1), L), table).data  # [heads, 2L-1]
        for h in range(2):
            Kp, u = w.k_pos.data[h], w.u.data[h]
            for i in range(L):
                for j in range(L):
                    pair = float(np.dot(Kp @ light_vector(i - j, T_ORACLE), u)) / math.sqrt(6)
                    worst_bias = max(worst_bias, abs(b[h, i - j + L - 1] - pair))
    assert worst_bias <= 1e-15, worst_bias
    print(f"\n  max abs error per variant: {worst}; bias vector: {worst_bias:.2e}")
    assert time.perf_counter() - started < 30.0


# ---------------------------------------------------------------------------
# 3. gradient suite
# ---------------------------------------------------------------------------


@pytest.mark.criterion(3, "finite-difference gradient suite (< 1e-4, eps 1e-5)")
def test_gradient_suite():
    started = time.perf_counter()
    errors = {name: grad_check(f, params, eps=1e-5) for name, f, params in standard_checks(0)}
    for variant in VARIANTS:
        assert any(n.startswith("attention.") and variant in n for n in errors), variant
        assert any(n.startswith("encoder.") and variant in n for n in errors), variant
    worst = max(errors, key=errors.get)
    print(f"\n  {len(errors)} checks, worst {worst} = {errors[worst]:.2e}")
    assert all(e < 1e-4 for e in errors.values()), {n: e for n, e in errors.items() if e >= 1e-4}
    assert time.perf_counter() - started < 300.0


# ---------------------------------------------------------------------------
# 4. permutation control
# ---------------------------------------------------------------------------


def _zero_position_weights(w):
    for layer in w.layers:
        a = layer.attn
        for name in ("q_pos", "k_pos", "u", "v_pos"):
            t = getattr(a, name)
            if t is not None:
                setattr(a, name, parameter(np.zeros_like(t.data)))


@pytest.mark.criterion(4, "permutation control (equivariance < 1e-10, order task at chance)")
@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_position_equivariance(variant):
    cfg = EncoderConfig(
        input_dim=8,
        n_layers=2,
        attention=AttentionConfig(n_heads=2, d_head=4, window=None, variant=variant),
        d_ff=16,
        conv_channels=(2, 2),
        zero_position=True,
        position=PositionConfig(T=32),
    )
    w = init_weights(cfg, 0)
    _zero_position_weights(w)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(cfg.d_model, 12))
    pos, light = position_inputs(cfg, 12)
    assert not np.any(light)
    out = encode_layers(x, pos, w, cfg).data
    for _ in range(5):
        perm = rng.permutation(12)
        dev = np.abs(encode_layers(x[:, perm], pos, w, cfg).data - out[:, perm]).max()
        assert dev < 1e-10


@pytest.mark.criterion(4, "permutation control (equivariance < 1e-10, order task at chance)")
def test_zero_position_order_task_at_chance():
    base = load_config(CONFIGS / "order_curve.json")
    enc = dataclasses.replace(
        base.encoder,
        zero_position=True,
        attention=dataclasses.replace(base.encoder.attention, window=None),
    )
    n_intents = base.data.n_intents
    chance = 1.0 / n_intents
    accs = []
    for seed in range(5):
        data = generate_synthetic(
            "order",
            800,
            n_intents,
            1,
            seed,
            token_frames=base.data.token_frames,
            gap_frames=base.data.gap_frames,
            edge_frames=base.data.edge_frames,
        )
        train_set, test_set = data.subset(range(400)), data.subset(range(400, 800))
        tc = dataclasses.replace(base.train, total_steps=400, seed=seed)
        result = train(train_set, enc, tc)
        accs.append(evaluate(result.model, test_set)["intent_f1_micro"])
    n_test = 400
    sigma_one = math.sqrt(chance * (1 - chance) / n_test)
    sigma_mean = sigma_one / math.sqrt(len(accs))
    print(f"\n  zero-position accuracies {np.round(accs, 3).tolist()}, chance {chance:.3f}, sigma {sigma_one:.3f}")
    # micro F1 equals accuracy for single-label predictions
    assert abs(float(np.mean(accs)) - chance) <= 3 * sigma_mean
    assert all(abs(a - chance) <= 3 * sigma_one for a in accs)


# ---------------------------------------------------------------------------
# 5. sample-efficiency direction
# ---------------------------------------------------------------------------


@pytest.mark.criterion(5, "light beats absolute at the two smallest prefixes in >= 4 of 5 folds; all >= 0.95 at full")
def test_sample_efficiency_direction(tmp_path):
    started = time.perf_counter()
    cfg = load_config(CONFIGS / "order_curve.json")
    assert cfg.data.n_intents >= 8 and cfg.data.n_speakers == 4 and cfg.data.n_utt == 2000
    assert cfg.curve.n_blocks == 150 and cfg.curve.n_folds == 5
    rows, fold_seeds = learning_curve(cfg)
    write_csv(tmp_path / "curve.csv", CURVE_COLUMNS, rows, cfg, cfg.train.seed, {"fold_seeds": fold_seeds})
    detail = [r for r in rows if r["kind"] == "fold"]
    f1 = {(r["variant"], r["fold"], r["n_train_blocks"]): r["intent_f1"] for r in detail}
    prefixes = sorted(cfg.curve.prefixes)
    small, full = prefixes[:2], prefixes[-1]

    margins = []
    for fold in range(cfg.curve.n_folds):
        light = np.mean([f1[("light", fold, k)] for k in small])
        absolute = np.mean([f1[("absolute", fold, k)] for k in small])
        margins.append(float(light - absolute))
    full_means = {v: float(np.mean([f1[(v, f, full)] for f in range(cfg.curve.n_folds)])) for v in cfg.variants}

    print(f"\n  per-fold margin light - absolute at prefixes {small}: {np.round(margins, 3).tolist()}")
    print(f"  mean intent F1 at {full} blocks: { {v: round(m, 3) for v, m in full_means.items()} }")
    print(f"  runtime {time.perf_counter() - started:.0f} s")
    assert set(cfg.variants) == set(VARIANTS)
    assert sum(m > 0 for m in margins) >= 4, margins
    assert all(m >= 0.95 for m in full_means.values()), full_means
    assert time.perf_counter() - started < 2 * 3600


# ---------------------------------------------------------------------------
# 6. memory law
# ---------------------------------------------------------------------------


@pytest.mark.criterion(6, "score-tensor counts B*N*L^2 (full) and B*N*L*5 (windowed)")
def test_memory_law(tmp_path):
    cfg = load_config(CONFIGS / "default.json")
    bc = cfg.bench
    assert tuple(bc.lengths) == (64, 128, 256, 512) and bc.window == 5
    rows = bench(cfg)
    for r in rows:
        B, N, L = r["batch"], r["heads"], r["length"]
        expected = B * N * L * (L if r["mode"] == "full" else 5)
        assert r["score_elements"] == expected
    counts = {(r["mode"], r["length"], r["heads"]): r["score_elements"] for r in rows}
    for N in bc.heads:
        assert counts[("full", 128, N)] == 4 * counts[("full", 64, N)]
        assert counts[("windowed", 128, N)] == 2 * counts[("windowed", 64, N)]
    from lightattn.experiments import BENCH_COLUMNS

    write_csv(tmp_path / "bench.csv", BENCH_COLUMNS, rows, cfg, cfg.train.seed)
    assert len((tmp_path / "bench.csv").read_text().splitlines()) == 2 + 2 * 4 * len(bc.heads)


# ---------------------------------------------------------------------------
# 7. down-sampling contract
# ---------------------------------------------------------------------------


@pytest.mark.criterion(7, "encode output length ceil(L/4) for L in [1, 200]")
def test_downsampling_contract():
    cfg = EncoderConfig(
        input_dim=4,
        n_layers=1,
        attention=AttentionConfig(n_heads=1, d_head=2, window=5, variant="light"),
        d_ff=4,
        conv_channels=(1, 1),
        position=PositionConfig(T=50),
    )
    w = init_weights(cfg, 0)
    rng = np.random.default_rng(0)
    for L in range(1, 201):
        out = encode(rng.normal(size=(4, L)), cfg, w)
        assert out.shape == (cfg.output_dim, math.ceil(L / 4)), L


# ---------------------------------------------------------------------------
# 8. recipe fidelity
# ---------------------------------------------------------------------------


@pytest.mark.criterion(8, "warmup closed form, idempotent averaging, Adam hand trace")
def test_recipe_fidelity():
    rng = np.random.default_rng(8)
    for s in rng.integers(1, 200_000, size=1000):
        s = int(s)
        assert abs(warmup_lr(s, 512, 4000) - 512**-0.5 * min(s**-0.5, s * 4000**-1.5)) <= 1e-12

    snap = [rng.normal(size=(3, 4)), rng.normal(size=5)]
    for k in (1, 3, 10):
        avg = average_checkpoints([snap] * k)
        assert all(np.array_equal(a, b) for a, b in zip(avg, snap))

    p = parameter(np.array([0.5]))
    state = TrainState.create([p], 10)
    got = []
    for _ in range(3):
        adam_step([p], [2.0 * (p.data - 3.0)], state, 0.1, TrainConfig())
        got.append(float(p.data[0]))
    expected = adam_trace(0.5, lambda x: 2.0 * (x - 3.0), 0.1, 3)
    assert max(abs(a - b) for a, b in zip(got, expected)) <= 1e-12


# ---------------------------------------------------------------------------
# 9. reproducibility
# ---------------------------------------------------------------------------


@pytest.mark.criterion(9, "two single-threaded train runs are byte-identical")
def test_reproducibility(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        cmd = [sys.executable, "-m", "lightattn.cli", "train", "--config", str(CONFIGS / "toy.json"), "--out", str(out), "--threads", "1"]
        subprocess.run(cmd, check=True, capture_output=True)
        outs.append(out)
    a, b = outs
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
