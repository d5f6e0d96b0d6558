"""Four attention parameterisations, multi-head composition and banding.

Variants (logits for query ``i`` and key ``j``; ``d_k`` is the head size):

``absolute``
    additive sinusoidal position: ``(K(x_j+p_j))^T Q(x_i+p_i) / sqrt(d_k)``,
    values ``V(x_j + p_j)``.
``relative_dai``
    ``[(K x_j)^T Q x_i + (K_p p_{i-j})^T u + (K_p p_{i-j})^T v] / sqrt(d_k)`` with
    a sinusoidal ``p_{i-j}`` of size ``d_p = d_model``; one ``K_p, u, v`` for all heads.
``concat_abs``
    ``(K_c x_j)^T Q_c x_i / sqrt(d_k) + (K_p p_j)^T Q_p p_i / sqrt(6)`` on the
    light 6-dim position.
``light``
    ``(K_c x_j)^T Q_c x_i / sqrt(d_k) + (K_p p_{i-j})^T u / sqrt(6)``.

All variants except ``absolute`` read values from content only.

Shapes follow the feature-major convention: a sequence is ``[d, L]`` and any
leading axes broadcast (batch, head). A single head's weights are 2-D
(``[d_head, d_model]``); stacked heads add a leading ``N`` axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import functional as F
from .autograd import Tensor, as_tensor, parameter, take
from .errors import ConfigurationError, ContractError, DimensionError, ParameterError
from .position import LIGHT_DIM, PositionMatrix, RelativeEmbeddings

VARIANTS = ("absolute", "relative_dai", "concat_abs", "light")


@dataclass(frozen=True)
class AttentionConfig:
    n_heads: int = 8
    d_head: int = 64
    window: Optional[int] = 5
    variant: str = "light"
    # light only: one K_p/u for every head instead of one per head
    share_position: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown attention variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_heads < 1 or self.d_head < 1:
            raise ConfigurationError("n_heads and d_head must be positive")
        if self.window is not None and (self.window < 1 or self.window % 2 == 0):
            raise ParameterError(f"window must be an odd integer >= 1, got {self.window}")
        if self.variant in ("absolute", "relative_dai") and self.d_model % 2:
            raise ConfigurationError("additive sinusoidal variants need an even d_model")

    @property
    def d_model(self) -> int:
        return self.n_heads * self.d_head

    @property
    def d_p(self) -> int:
        return LIGHT_DIM if self.variant in ("light", "concat_abs") else self.d_model


@dataclass
class AttentionWeights:
    """Trainable attention parameters; only the fields a variant needs are set."""

    q: Tensor  # [N, d_head, d_model]
    k: Tensor
    v: Tensor
    out: Optional[Tensor] = None  # [d_model, N * d_head]
    q_pos: Optional[Tensor] = None  # concat_abs: [N, 6, 6]
    k_pos: Optional[Tensor] = None  # concat_abs/light: [N|1, 6, 6]; relative_dai: [d_model, d_p]
    u: Optional[Tensor] = None  # light: [N|1, 6]; relative_dai: [d_p]
    v_pos: Optional[Tensor] = None  # relative_dai: [d_p]
    _order: tuple = field(default=("q", "k", "v", "out", "q_pos", "k_pos", "u", "v_pos"), repr=False)

    @property
    def n_heads(self) -> int:
        return self.q.shape[0] if self.q.ndim == 3 else 1

    def named_parameters(self, prefix: str = "") -> list:
        return [(prefix + name, getattr(self, name)) for name in self._order if getattr(self, name) is not None]

    def head(self, n: int) -> "AttentionWeights":
        """Weights of head ``n`` alone (2-D projections)."""

        def pick(t):
            if t is None:
                return None
            return t[n] if t.shape[0] > 1 else t[0]

        return AttentionWeights(
            q=self.q[n],
            k=self.k[n],
            v=self.v[n],
            q_pos=pick(self.q_pos),
            k_pos=self.k_pos if self.k_pos is None or self.k_pos.ndim == 2 else pick(self.k_pos),
            u=self.u if self.u is None or self.u.ndim == 1 else pick(self.u),
            v_pos=self.v_pos,
        )


def init_attention(config: AttentionConfig, d_model: int, rng: np.random.Generator) -> AttentionWeights:
    """Glorot-uniform projections; ``u``/``v`` uniform in [-0.1, 0.1]."""
    N, dh = config.n_heads, config.d_head

    def glorot(shape, fan_in, fan_out):
        return parameter(F.glorot_uniform(rng, shape, fan_in, fan_out))

    w = AttentionWeights(
        q=glorot((N, dh, d_model), d_model, dh),
        k=glorot((N, dh, d_model), d_model, dh),
        v=glorot((N, dh, d_model), d_model, dh),
        out=glorot((d_model, N * dh), N * dh, d_model),
    )
    P = LIGHT_DIM
    if config.variant == "concat_abs":
        w.q_pos = glorot((N, P, P), P, P)
        w.k_pos = glorot((N, P, P), P, P)
    elif config.variant == "light":
        n_pos = 1 if config.share_position else N
        w.k_pos = glorot((n_pos, P, P), P, P)
        w.u = parameter(rng.uniform(-0.1, 0.1, size=(n_pos, P)))
    elif config.variant == "relative_dai":
        dp = config.d_p
        w.k_pos = glorot((d_model, dp), dp, d_model)
        w.u = parameter(rng.uniform(-0.1, 0.1, size=dp))
        w.v_pos = parameter(rng.uniform(-0.1, 0.1, size=dp))
    return w


def count_parameters(config: AttentionConfig) -> int:
    """Exact trainable-scalar count of one multi-head attention block."""
    N, dh, dm = config.n_heads, config.d_head, config.d_model
    total = 3 * N * dh * dm + dm * N * dh
    return total + position_extras(config)


def position_extras(config: AttentionConfig) -> int:
    """Scalars spent on position information beyond content-only attention."""
    N, P = config.n_heads, LIGHT_DIM
    if config.variant == "absolute":
        return 0
    if config.variant == "concat_abs":
        return N * 2 * P * P
    if config.variant == "light":
        return (1 if config.share_position else N) * (P * P + P)
    dp = config.d_p
    return config.d_model * dp + 2 * dp


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def window_mask(length: int, window: int) -> np.ndarray:
    """``[L, L]`` boolean, true where ``|i - j| <= (window - 1) / 2``."""
    if window < 1 or window % 2 == 0:
        raise ParameterError(f"window must be an odd integer >= 1, got {window}")
    r = (window - 1) // 2
    idx = np.arange(length)
    return np.abs(idx[:, None] - idx[None, :]) <= r


def _key_mask_full(key_valid: np.ndarray) -> np.ndarray:
    # padded queries may always see themselves so no softmax row is empty
    L = key_valid.shape[-1]
    return key_valid[:, None, None, :] | np.eye(L, dtype=bool)


def _key_mask_band(key_valid: np.ndarray, window: int) -> np.ndarray:
    r = (window - 1) // 2
    padded = np.pad(key_valid, ((0, 0), (r, r)))
    band = np.lib.stride_tricks.sliding_window_view(padded, window, axis=-1)
    band = band | (np.arange(window) == r)
    return band[:, None]


# ---------------------------------------------------------------------------
# shared score machinery
# ---------------------------------------------------------------------------


class ScoreProbe:
    """Records the element count of every score tensor materialised."""

    def __init__(self):
        self.sizes: list[int] = []

    def record(self, t: Tensor):
        self.sizes.append(int(t.size))

    @property
    def peak(self) -> int:
        return max(self.sizes, default=0)


def _dot_scores(qa: Tensor, ka: Tensor, window: Optional[int]) -> Tensor:
    if window is None:
        return qa.swapaxes(-1, -2) @ ka
    kb = F.band_gather(ka, window)
    return (qa.reshape(qa.shape + (1,)) * kb).sum(axis=-3)


def _offset_scores(bias_fn, length: int, window: Optional[int], max_needed: int) -> Tensor:
    if window is None:
        m = min(length - 1, max_needed)
        b = bias_fn(np.arange(-m, m + 1))
        idx = np.arange(length)
        rel = np.clip(idx[:, None] - idx[None, :], -m, m) + m
        return take(b, rel, axis=-1)
    b = bias_fn(F.band_offsets(window))
    return b.reshape(b.shape[:-1] + (1, window))


def _attend(terms, offset_terms, values: Tensor, length: int, mask, window, probe) -> Tensor:
    """Combine score terms, normalise and mix values.

    ``terms`` are ``(qa, ka, scale)`` dot-product pieces; ``offset_terms`` are
    ``(bias_fn, max_offset)`` pieces that depend only on ``i - j``.
    """
    if window is None:
        if mask is None:
            full = np.ones((length, length), dtype=bool)
        else:
            full = np.broadcast_to(mask, np.broadcast_shapes(np.shape(mask), (length, length)))
        needed = _max_unmasked_offset(full)
    else:
        band = F.band_valid(length, window)
        full = band if mask is None else band & mask
        needed = (window - 1) // 2

    logits = None
    for qa, ka, scale in terms:
        s = _dot_scores(qa, ka, window) * scale
        logits = s if logits is None else logits + s
    for bias_fn, available in offset_terms:
        if needed > available:
            raise ContractError(f"relative embeddings cover offsets up to {available}, need {needed}")
        s = _offset_scores(bias_fn, length, window, available)
        logits = s if logits is None else logits + s
    if probe is not None:
        probe.record(logits)

    weights = F.softmax_masked(logits, full)
    if window is None:
        return values @ weights.swapaxes(-1, -2)
    vb = F.band_gather(values, window)
    return (vb * weights.reshape(weights.shape[:-2] + (1,) + weights.shape[-2:])).sum(axis=-1)


def _max_unmasked_offset(mask: np.ndarray) -> int:
    L = mask.shape[-1]
    idx = np.arange(L)
    dist = np.abs(idx[:, None] - idx[None, :])
    allowed = np.any(mask.reshape((-1, L, L)), axis=0)
    return int(dist[allowed].max()) if allowed.any() else 0


def _pos_tensor(p) -> Tensor:
    if isinstance(p, PositionMatrix):
        return Tensor(p.values)
    return as_tensor(p)


def _check_len(x: Tensor, p: Tensor):
    if x.shape[-1] != p.shape[-1]:
        raise DimensionError(f"sequence length {x.shape[-1]} != position length {p.shape[-1]}")


# ---------------------------------------------------------------------------
# the four variants
# ---------------------------------------------------------------------------


def attn_absolute(x, p, w: AttentionWeights, mask=None, *, window=None, probe=None) -> Tensor:
    """Additive absolute attention; ``p`` is a ``d_model x L`` sinusoidal matrix."""
    x, pt = as_tensor(x), _pos_tensor(p)
    if pt.shape[-2] != x.shape[-2]:
        raise DimensionError(f"additive position needs d_p = d_model = {x.shape[-2]}, got {pt.shape[-2]}")
    _check_len(x, pt)
    xp = x + pt
    q, k, v = w.q @ xp, w.k @ xp, w.v @ xp
    scale = 1.0 / math.sqrt(w.q.shape[-2])
    return _attend([(q, k, scale)], [], v, x.shape[-1], mask, window, probe)


def relative_dai_bias(w: AttentionWeights, table: RelativeEmbeddings, offsets) -> Tensor:
    """``[(K_p p_d)^T u + (K_p p_d)^T v] / sqrt(d_k)`` for each offset ``d``."""
    if w.k_pos.shape[0] != table.dim or w.u.shape[0] != w.k_pos.shape[0]:
        raise DimensionError("relative_dai needs d_p = d_model for K_p p and u to align")
    kp = w.k_pos @ as_tensor(table.lookup(offsets))  # [d_model, n]
    scale = 1.0 / math.sqrt(w.q.shape[-2])
    bu = (kp * w.u.reshape(-1, 1)).sum(axis=0)
    bv = (kp * w.v_pos.reshape(-1, 1)).sum(axis=0)
    return (bu + bv) * scale


def attn_relative_dai(x, rel: RelativeEmbeddings, w: AttentionWeights, mask=None, *, window=None, probe=None) -> Tensor:
    """Relative attention with the position terms added to the content logit."""
    x = as_tensor(x)
    q, k, v = w.q @ x, w.k @ x, w.v @ x
    scale = 1.0 / math.sqrt(w.q.shape[-2])
    bias = (lambda d: relative_dai_bias(w, rel, d), rel.max_offset)
    return _attend([(q, k, scale)], [bias], v, x.shape[-1], mask, window, probe)


def attn_concat_abs(x, p, w: AttentionWeights, mask=None, *, window=None, probe=None) -> Tensor:
    """Concatenated absolute position with block-diagonal query/key projections."""
    x, pt = as_tensor(x), _pos_tensor(p)
    if pt.shape[-2] != LIGHT_DIM:
        raise DimensionError(f"concat_abs needs a {LIGHT_DIM}-dim position, got {pt.shape[-2]}")
    _check_len(x, pt)
    q, k, v = w.q @ x, w.k @ x, w.v @ x
    qp, kp = w.q_pos @ pt, w.k_pos @ pt
    terms = [(q, k, 1.0 / math.sqrt(w.q.shape[-2])), (qp, kp, 1.0 / math.sqrt(LIGHT_DIM))]
    return _attend(terms, [], v, x.shape[-1], mask, window, probe)


def relative_bias_vector(w: AttentionWeights, offsets, table: RelativeEmbeddings) -> Tensor:
    """Light position logit ``b(d) = (K_p p_d)^T u / sqrt(6)`` for each offset.

    Content-free, so its size is ``len(offsets)`` whatever the sequence length.
    Leading axes of ``K_p``/``u`` (heads) are kept.
    """
    R = as_tensor(table.lookup(np.asarray(offsets)))  # [6, n]
    kp = w.k_pos @ R  # [..., 6, n]
    u = w.u.reshape(w.u.shape + (1,))
    return (kp * u).sum(axis=-2) * (1.0 / math.sqrt(LIGHT_DIM))


def attn_light(x, rel: RelativeEmbeddings, w: AttentionWeights, mask=None, *, window=None, probe=None) -> Tensor:
    """Light attention: content logit plus a learned bias over relative offsets."""
    x = as_tensor(x)
    if rel.dim != LIGHT_DIM:
        raise DimensionError(f"light attention needs {LIGHT_DIM}-dim relative embeddings, got {rel.dim}")
    q, k, v = w.q @ x, w.k @ x, w.v @ x
    scale = 1.0 / math.sqrt(w.q.shape[-2])
    bias = (lambda d: relative_bias_vector(w, d, rel), rel.max_offset)
    return _attend([(q, k, scale)], [bias], v, x.shape[-1], mask, window, probe)


ATTENTION_FUNCS = {
    "absolute": attn_absolute,
    "relative_dai": attn_relative_dai,
    "concat_abs": attn_concat_abs,
    "light": attn_light,
}


def multi_head(
    x,
    pos,
    weights: AttentionWeights,
    config: AttentionConfig,
    mask=None,
    *,
    key_valid: Optional[np.ndarray] = None,
    banded: bool = True,
    probe: Optional[ScoreProbe] = None,
) -> Tensor:
    """``W_out`` applied to the concatenated heads.

    Args:
        x: ``[d_model, L]`` or ``[B, d_model, L]``.
        pos: the variant's position input (sinusoidal/light matrix or relative table).
        mask: extra ``[L, L]`` mask for the unbanded path.
        key_valid: ``[B, L]`` flags for padded batches.
        banded: with a configured window, compute only the ``L x window`` band
            (otherwise the window is applied as a mask on full scores).
    """
    if weights.n_heads != config.n_heads:
        raise ConfigurationError(f"config has {config.n_heads} heads but weights have {weights.n_heads}")
    x = as_tensor(x)
    batched = x.ndim == 3
    if batched:
        xh = x.reshape((x.shape[0], 1) + x.shape[1:])
    else:
        xh = x.reshape((1,) + x.shape)
    L = x.shape[-1]

    window = None
    if config.window is not None and banded:
        if mask is not None:
            raise ParameterError("explicit [L, L] masks need banded=False")
        window = config.window
        m = None
        if key_valid is not None:
            m = _key_mask_band(np.asarray(key_valid, dtype=bool), window)
    else:
        m = None if mask is None else np.asarray(mask, dtype=bool)
        if config.window is not None:
            wm = window_mask(L, config.window)
            m = wm if m is None else m & wm
        if key_valid is not None:
            km = _key_mask_full(np.asarray(key_valid, dtype=bool))
            m = km if m is None else m & km

    fn = ATTENTION_FUNCS[config.variant]
    heads = fn(xh, pos, weights, m, window=window, probe=probe)  # [(B,) N, d_head, L]
    lead = heads.shape[:-3]
    stacked = heads.reshape(lead + (config.n_heads * config.d_head, L))
    return weights.out @ stacked

