"""Central finite-difference verification of backward rules."""

from __future__ import annotations

import zlib
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, backward, no_grad
from .errors import ContractError


def numerical_gradient(f: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``f()`` with respect to every element of ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest relative error between the tape gradient and central differences.

    ``f`` takes no arguments and reads ``params`` through closure; it must be
    deterministic, so any dropout has to be off (or re-seeded on every call).

    Returns:
        ``max |a - n| / max(|a|, |n|, 1e-8)`` over every element of every param.

    Raises:
        ContractError: two evaluations of ``f`` at the same point differ.
    """
    with no_grad():
        first = f().item()
        second = f().item()
    if first != second:
        raise ContractError("grad_check needs a deterministic function (disable dropout)")

    saved = [p.grad for p in params]
    loss = f()
    analytic = backward(loss, inputs=list(params))
    for p, g in zip(params, saved):
        p.grad = g
    worst = 0.0
    for p, a in zip(params, analytic):
        n = numerical_gradient(f, p, eps)
        if p.size:
            worst = max(worst, float(relative_error(a, n).max()))
    return worst


def _contract(out: Tensor, key: str) -> Tensor:
    """Contract an output with a fixed random tensor (seeded by ``key``) so every element matters."""
    w = np.random.default_rng(zlib.crc32(key.encode())).normal(size=out.shape)
    return (out * Tensor(w)).sum()


def _op_checks(rng: np.random.Generator) -> list:
    from . import autograd as A
    from . import functional as F

    def p(*shape, low=None):
        data = rng.normal(size=shape) if low is None else rng.uniform(low, low + 1.0, size=shape)
        return Tensor(data, requires_grad=True)

    a, b, c = p(3, 4), p(4), p(3, 4)
    pos = p(3, 4, low=0.5)
    m1, m2 = p(2, 3, 4), p(4, 5)
    logits, mask = p(2, 4, 5), rng.random((4, 5)) < 0.7
    mask[:, 0] = True
    ln_x, gamma, beta = p(2, 5, 3), p(5), p(5)
    img, kern, kbias = p(2, 1, 7, 9), p(3, 1, 3, 3), p(3)
    ce, labels = p(4, 6), rng.integers(0, 6, size=4)
    keys = p(2, 3, 6)
    valid = np.array([[True] * 6, [True] * 4 + [False] * 2])
    drop_seed = int(rng.integers(1 << 31))
    index = np.array([[0, 2, 2], [1, 0, 3], [3, 3, 1], [2, 1, 0]])

    checks = [
        ("op.add", lambda: A.add(a, b), [a, b]),
        ("op.sub", lambda: A.sub(a, c), [a, c]),
        ("op.mul", lambda: A.mul(a, b), [a, b]),
        ("op.div", lambda: A.div(a, pos), [a, pos]),
        ("op.power", lambda: A.power(pos, 1.7), [pos]),
        ("op.exp", lambda: A.exp(a), [a]),
        ("op.log", lambda: A.log(pos), [pos]),
        ("op.relu", lambda: A.relu(a), [a]),
        ("op.matmul", lambda: A.matmul(m1, m2), [m1, m2]),
        ("op.sum", lambda: A.tsum(a, axis=0), [a]),
        ("op.mean", lambda: A.tmean(A.mul(a, a), axis=1, keepdims=True), [a]),
        ("op.reshape_transpose", lambda: A.transpose(A.reshape(a, (4, 3))), [a]),
        ("op.getitem", lambda: a[1:, ::2], [a]),
        ("op.take", lambda: A.take(a, index, axis=1), [a]),
        ("op.concat", lambda: A.concat([a, c], axis=1), [a, c]),
        ("op.where", lambda: A.where(mask[:3, :4], a, c), [a, c]),
        ("softmax_masked", lambda: F.softmax_masked(logits, mask), [logits]),
        ("layer_norm", lambda: F.layer_norm(ln_x, gamma, beta), [ln_x, gamma, beta]),
        ("conv2d", lambda: F.conv2d(img, kern, (2, 2), kbias), [img, kern, kbias]),
        ("dropout", lambda: F.dropout(a, 0.3, True, np.random.default_rng(drop_seed)), [a]),
        ("band_gather", lambda: F.band_gather(keys, 3), [keys]),
        ("masked_mean", lambda: F.masked_mean(keys, valid[:, None, :], axis=-1), [keys]),
    ]
    out = [(name, (lambda fn=fn, name=name: _contract(fn(), name)), params) for name, fn, params in checks]
    out.append(("cross_entropy", lambda: F.cross_entropy(ce, labels), [ce]))
    return out


def _attention_checks(rng: np.random.Generator) -> list:
    from .attention import VARIANTS, AttentionConfig, init_attention, multi_head
    from .encoder import EncoderConfig, position_inputs
    from .position import PositionConfig

    checks = []
    L = 6
    for variant in VARIANTS:
        for window in (None, 3):
            att = AttentionConfig(n_heads=2, d_head=2, window=window, variant=variant)
            enc = EncoderConfig(input_dim=4, attention=att, position=PositionConfig(T=8))
            weights = init_attention(att, att.d_model, rng)
            pos, _ = position_inputs(enc, L)
            x = Tensor(rng.normal(size=(att.d_model, L)), requires_grad=True)
            params = [x] + [t for _, t in weights.named_parameters()]
            name = f"attention.{variant}.{'full' if window is None else 'window3'}"
            checks.append((name, (lambda x=x, w=weights, pos=pos, att=att, name=name: _contract(multi_head(x, pos, w, att), name)), params))
    return checks


def _encoder_checks(rng: np.random.Generator) -> list:
    from .attention import VARIANTS, AttentionConfig
    from .encoder import EncoderConfig, encode, init_weights
    from .position import PositionConfig
    from .training import init_head, pool_and_classify
    from . import functional as F

    checks = []
    feats = rng.normal(size=(2, 6, 10))
    lengths = np.array([10, 7])
    for i, variant in enumerate(VARIANTS):
        cfg = EncoderConfig(
            input_dim=6,
            n_layers=2,
            attention=AttentionConfig(n_heads=2, d_head=2, window=3, variant=variant),
            d_ff=6,
            dropout=0.0,
            share_layers=True,
            position=PositionConfig(T=8),
            conv_channels=(2, 2),
            conv_kernel=(3, 3),
        )
        weights = init_weights(cfg, 100 + i)
        head = init_head(cfg.output_dim, 3, 2, rng)
        params = weights.parameters() + [head.intent_w, head.intent_b, head.speaker_w, head.speaker_b]

        def f(cfg=cfg, weights=weights, head=head):
            hidden, out_len = encode(feats, cfg, weights, lengths=lengths, return_lengths=True)
            il, sl = pool_and_classify(hidden, head, out_len)
            return F.cross_entropy(il, np.array([0, 2])) + F.cross_entropy(sl, np.array([1, 0]))

        checks.append((f"encoder.{variant}.2layer_shared", f, params))
    return checks


def standard_checks(seed: int = 0) -> list:
    """``(name, f, params)`` for every differentiable op, attention variant and the small encoder."""
    rng = np.random.default_rng(seed)
    return _op_checks(rng) + _attention_checks(rng) + _encoder_checks(rng)
