"""Convolutional front-end plus a stack of (optionally shared) transformer layers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import functional as F
from .attention import AttentionConfig, AttentionWeights, ScoreProbe, count_parameters, init_attention, multi_head
from .autograd import Tensor, as_tensor, concat, parameter
from .errors import ConfigurationError, DimensionError
from .position import (
    LIGHT_DIM,
    PositionConfig,
    RelativeEmbeddings,
    downsampled_length,
    light_position,
    relative_light_table,
    relative_sinusoidal_table,
    resolve_period,
    sinusoidal_position,
)


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 40
    n_layers: int = 4
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    d_ff: int = 2048
    dropout: float = 0.1
    share_layers: bool = True
    position: PositionConfig = field(default_factory=PositionConfig)
    conv_channels: tuple = (32, 64)
    conv_kernel: tuple = (5, 5)
    # (frequency, time) stride of every front-end convolution
    conv_stride: tuple = (2, 2)
    ln_eps: float = 1e-6
    dropout_position: bool = True
    zero_position: bool = False

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigurationError("n_layers must be >= 1")
        if self.d_ff < 1:
            raise ConfigurationError("d_ff must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")
        if self.input_dim < 1 or not self.conv_channels:
            raise ConfigurationError("input_dim and conv_channels must be positive")
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "conv_kernel", tuple(int(k) for k in self.conv_kernel))
        object.__setattr__(self, "conv_stride", tuple(int(s) for s in self.conv_stride))

    @property
    def d_model(self) -> int:
        return self.attention.d_model

    @property
    def output_dim(self) -> int:
        return self.d_model + LIGHT_DIM

    @property
    def time_strides(self) -> tuple:
        return (self.conv_stride[1],) * len(self.conv_channels)

    @property
    def reduced_freq(self) -> int:
        f = self.input_dim
        for _ in self.conv_channels:
            f = -(-f // self.conv_stride[0])
        return f

    def output_length(self, length: int) -> int:
        return downsampled_length(length, self.time_strides)


@dataclass
class LayerWeights:
    attn: AttentionWeights
    w1: Tensor  # [d_ff, d_model]
    b1: Tensor
    w2: Tensor  # [d_model, d_ff]
    b2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    def named_parameters(self, prefix: str = "") -> list:
        params = self.attn.named_parameters(prefix + "attn.")
        for name in ("w1", "b1", "w2", "b2", "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta"):
            params.append((prefix + name, getattr(self, name)))
        return params


@dataclass
class EncoderWeights:
    conv_kernels: list
    conv_biases: list
    proj_w: Tensor  # [d_model, C_last * F']
    proj_b: Tensor
    # one entry when layers are shared, n_layers entries otherwise
    layers: list

    def layer(self, i: int) -> LayerWeights:
        return self.layers[0] if len(self.layers) == 1 else self.layers[i]

    def named_parameters(self, prefix: str = "") -> list:
        params = []
        for i, (k, b) in enumerate(zip(self.conv_kernels, self.conv_biases)):
            params += [(f"{prefix}conv{i}.kernel", k), (f"{prefix}conv{i}.bias", b)]
        params += [(prefix + "proj.w", self.proj_w), (prefix + "proj.b", self.proj_b)]
        for i, layer in enumerate(self.layers):
            params += layer.named_parameters(f"{prefix}layer{i}.")
        return params

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]


def init_weights(config: EncoderConfig, seed: int) -> EncoderWeights:
    """Glorot-uniform weights, zero biases, unit LayerNorm gains; reproducible per seed."""
    rng = np.random.default_rng(seed)
    kf, kt = config.conv_kernel
    kernels, biases = [], []
    c_in = 1
    for c_out in config.conv_channels:
        kernels.append(parameter(F.glorot_uniform(rng, (c_out, c_in, kf, kt), c_in * kf * kt, c_out * kf * kt)))
        biases.append(parameter(np.zeros(c_out)))
        c_in = c_out
    dm, dff = config.d_model, config.d_ff
    flat = c_in * config.reduced_freq
    proj_w = parameter(F.glorot_uniform(rng, (dm, flat), flat, dm))
    proj_b = parameter(np.zeros(dm))
    layers = []
    for _ in range(1 if config.share_layers else config.n_layers):
        layers.append(
            LayerWeights(
                attn=init_attention(config.attention, dm, rng),
                w1=parameter(F.glorot_uniform(rng, (dff, dm), dm, dff)),
                b1=parameter(np.zeros(dff)),
                w2=parameter(F.glorot_uniform(rng, (dm, dff), dff, dm)),
                b2=parameter(np.zeros(dm)),
                ln1_gamma=parameter(np.ones(dm)),
                ln1_beta=parameter(np.zeros(dm)),
                ln2_gamma=parameter(np.ones(dm)),
                ln2_beta=parameter(np.zeros(dm)),
            )
        )
    return EncoderWeights(kernels, biases, proj_w, proj_b, layers)


def count_layer_parameters(config: EncoderConfig) -> int:
    dm, dff = config.d_model, config.d_ff
    ffn = dff * dm + dff + dm * dff + dm
    return count_parameters(config.attention) + ffn + 4 * dm


def count_encoder_parameters(config: EncoderConfig) -> int:
    """Trainable scalars of the encoder; a shared layer is counted once."""
    kf, kt = config.conv_kernel
    total, c_in = 0, 1
    for c_out in config.conv_channels:
        total += c_out * c_in * kf * kt + c_out
        c_in = c_out
    total += config.d_model * c_in * config.reduced_freq + config.d_model
    n_stack = 1 if config.share_layers else config.n_layers
    return total + n_stack * count_layer_parameters(config)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _time_valid(lengths: np.ndarray, length: int) -> np.ndarray:
    return np.arange(length)[None, :] < lengths[:, None]


def conv_frontend(features, weights: EncoderWeights, config: EncoderConfig, lengths=None):
    """Stride-2 'same' convolutions with ReLU, flatten (channel, freq), project to d_model.

    Args:
        features: ``[input_dim, L]`` or a zero-padded batch ``[B, input_dim, L]``.
        lengths: true lengths of a padded batch.

    Returns:
        ``(content, out_lengths)`` with ``content`` shaped ``[(B,) d_model, L']``.
    """
    x = as_tensor(features)
    single = x.ndim == 2
    if single:
        x = x.reshape((1,) + x.shape)
    B, Fdim, L = x.shape
    if Fdim != config.input_dim:
        raise DimensionError(f"features have {Fdim} rows, encoder expects input_dim={config.input_dim}")
    lengths = np.full(B, L) if lengths is None else np.asarray(lengths, dtype=int)
    valid = _time_valid(lengths, L)
    if not valid.all():
        x = x * valid[:, None, :].astype(np.float64)
    h = x.reshape((B, 1, Fdim, L))
    for kernel, bias in zip(weights.conv_kernels, weights.conv_biases):
        if kernel.shape[1] != h.shape[1]:
            raise DimensionError("conv kernel channels do not match the previous layer")
        h = F.conv2d(h, kernel, config.conv_stride, bias).relu()
        lengths = -(-lengths // config.conv_stride[1])
        valid = _time_valid(lengths, h.shape[-1])
        if not valid.all():
            h = h * valid[:, None, None, :].astype(np.float64)
    B, C, Fr, Lr = h.shape
    flat = h.reshape((B, C * Fr, Lr))
    if weights.proj_w.shape[1] != C * Fr:
        raise DimensionError(f"projection expects {weights.proj_w.shape[1]} inputs, front-end gives {C * Fr}")
    content = weights.proj_w @ flat + weights.proj_b.reshape((-1, 1))
    if single:
        content = content.reshape(content.shape[1:])
    return content, lengths


def position_inputs(config: EncoderConfig, length: int):
    """Per-variant position input for one down-sampled length, plus the light matrix for the output."""
    pc = resolve_period(config.position, length)
    att = config.attention
    # banded attention only reads the window's offsets, the masked-full path reads all
    r = max(length - 1, 0 if att.window is None else (att.window - 1) // 2)
    light = light_position(length, pc).values
    if att.variant == "light":
        pos = relative_light_table(r, pc)
    elif att.variant == "concat_abs":
        pos = light
    elif att.variant == "absolute":
        pos = sinusoidal_position(length, config.d_model, pc.period()).values
    else:
        pos = relative_sinusoidal_table(r, config.d_model, pc.period())
    if config.zero_position:
        light = np.zeros_like(light)
        pos = pos.with_values(np.zeros_like(pos.values)) if isinstance(pos, RelativeEmbeddings) else np.zeros_like(pos)
    return pos, light


def _drop_position(pos, rate, training, rng):
    if isinstance(pos, RelativeEmbeddings):
        return pos.with_values(F.dropout(Tensor(pos.values), rate, training, rng))
    return F.dropout(Tensor(pos), rate, training, rng)


def _position_length(pos):
    if isinstance(pos, RelativeEmbeddings):
        return None
    if isinstance(pos, Tensor):
        return pos.shape[-1]
    return np.shape(getattr(pos, "values", pos))[-1]


def ffn(y: Tensor, lw: LayerWeights) -> Tensor:
    hidden = (lw.w1 @ y + lw.b1.reshape((-1, 1))).relu()
    return lw.w2 @ hidden + lw.b2.reshape((-1, 1))


def encoder_layer(
    x,
    pos,
    lw: LayerWeights,
    config: EncoderConfig,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    *,
    key_valid=None,
    banded: bool = True,
    probe: Optional[ScoreProbe] = None,
) -> Tensor:
    """Post-norm residual block: ``LN(x + Drop(MHA))`` then ``LN(y + Drop(FFN))``."""
    x = as_tensor(x)
    plen = _position_length(pos)
    if plen is not None and plen != x.shape[-1]:
        raise DimensionError(f"sequence length {x.shape[-1]} != position length {plen}")
    att = multi_head(x, pos, lw.attn, config.attention, key_valid=key_valid, banded=banded, probe=probe)
    y = F.layer_norm(x + F.dropout(att, config.dropout, training, rng), lw.ln1_gamma, lw.ln1_beta, config.ln_eps)
    z = y + F.dropout(ffn(y, lw), config.dropout, training, rng)
    return F.layer_norm(z, lw.ln2_gamma, lw.ln2_beta, config.ln_eps)


def encode_layers(x, pos, weights: EncoderWeights, config: EncoderConfig, training=False, rng=None, **kw) -> Tensor:
    """The transformer stack alone; the same ``pos`` feeds every layer."""
    h = as_tensor(x)
    for i in range(config.n_layers):
        h = encoder_layer(h, pos, weights.layer(i), config, training, rng, **kw)
    return h


def encode(
    features,
    config: EncoderConfig,
    weights: EncoderWeights,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    *,
    lengths=None,
    banded: bool = True,
    probe: Optional[ScoreProbe] = None,
    return_lengths: bool = False,
):
    """Features to ``[(B,) d_model + 6, ceil(L/4)]`` encodings.

    The content rows come from the layer stack; the last six rows are the light
    position matrix, concatenated rather than added.
    """
    content, out_lengths = conv_frontend(features, weights, config, lengths)
    single = content.ndim == 2
    if single:
        content = content.reshape((1,) + content.shape)
    B, _, L = content.shape
    content = F.dropout(content, config.dropout, training, rng)
    pos, light = position_inputs(config, L)
    if training and config.dropout_position:
        pos = _drop_position(pos, config.dropout, training, rng)
        light = F.dropout(Tensor(light), config.dropout, training, rng)
    else:
        light = Tensor(light)
    key_valid = None if np.all(out_lengths == L) else _time_valid(out_lengths, L)
    h = encode_layers(content, pos, weights, config, training, rng, key_valid=key_valid, banded=banded, probe=probe)
    light_b = light.reshape((1, LIGHT_DIM, L)) + Tensor(np.zeros((B, 1, 1)))
    out = concat([h, light_b], axis=1)
    if single:
        out = out.reshape(out.shape[1:])
    return (out, out_lengths) if return_lengths else out


def with_period(config: EncoderConfig, max_length: int) -> EncoderConfig:
    """Resolve the position period from the longest input length (pre down-sampling)."""
    pc = resolve_period(config.position, config.output_length(max_length))
    return replace(config, position=pc)
