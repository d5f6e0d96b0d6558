"""Absolute sinusoidal, light 6-dimensional and relative-offset position encodings."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autograd import Tensor
from .errors import AliasingWarning, ContractError, ParameterError

LIGHT_DIM = 6


@dataclass(frozen=True)
class PositionConfig:
    """Periods of the light encoding.

    ``T`` is the longest (down-sampled) sequence length; ``None`` means "fill
    in from the data" and is resolved by :func:`resolve_period`.
    """

    T: Optional[int] = None
    M1: int = 4
    M2: int = 2

    def __post_init__(self):
        if self.M1 < 1 or self.M2 < 1:
            raise ParameterError("M1 and M2 must be positive")
        if not self.M2 < self.M1:
            raise ParameterError(f"need M2 < M1, got M1={self.M1}, M2={self.M2}")
        if self.T is not None and not self.M1 < self.T:
            raise ParameterError(f"need M1 < T, got T={self.T}, M1={self.M1}")

    def period(self) -> int:
        if self.T is None:
            raise ContractError("position period T is unresolved; call resolve_period first")
        return self.T


def resolve_period(config: PositionConfig, max_length: int) -> PositionConfig:
    """Fill ``T`` from the longest sequence when it was left unset."""
    if config.T is not None:
        return config
    return PositionConfig(T=max(int(max_length), config.M1 + 1), M1=config.M1, M2=config.M2)


@dataclass
class PositionMatrix:
    values: np.ndarray  # [d_p, L]
    kind: str  # "light" | "sinusoidal"
    config: Optional[PositionConfig] = None

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def _light_rows(t: np.ndarray, config: PositionConfig) -> np.ndarray:
    T = config.period()
    rows = []
    for period in (T, config.M1, config.M2):
        angle = 2.0 * np.pi * t / period
        rows.append(np.cos(angle))
        rows.append(np.sin(angle))
    return np.stack(rows)


def light_position(length: int, config: PositionConfig) -> PositionMatrix:
    """``6 x length`` matrix of cos/sin pairs at periods T, M1 and M2.

    A length beyond ``T`` only warns: periodic rows then repeat for t and t + T.
    """
    if length < 1:
        raise ParameterError("length must be >= 1")
    if length > config.period():
        warnings.warn(
            f"sequence length {length} exceeds position period T={config.T}; positions may alias",
            AliasingWarning,
            stacklevel=2,
        )
    t = np.arange(length, dtype=np.float64)
    return PositionMatrix(_light_rows(t, config), "light", config)


def sinusoidal_position(length: int, d_x: int, T: int) -> PositionMatrix:
    """``d_x x length`` matrix with sin on even rows and cos on odd rows."""
    if d_x % 2:
        raise ParameterError(f"sinusoidal encoding needs an even dimension, got {d_x}")
    if length < 1:
        raise ParameterError("length must be >= 1")
    return PositionMatrix(_sinusoid(np.arange(length, dtype=np.float64), d_x, T), "sinusoidal")


def _sinusoid(t: np.ndarray, d_x: int, T: float) -> np.ndarray:
    i = np.arange(d_x // 2, dtype=np.float64)
    denom = float(T) ** (2.0 * i / d_x)
    angle = t[None, :] / denom[:, None]
    out = np.empty((d_x, t.size))
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


def relative_position(delta: int, config: PositionConfig) -> np.ndarray:
    """Light 6-vector at offset ``delta`` (negative offsets flip the sine rows)."""
    return _light_rows(np.array([float(delta)]), config)[:, 0]


def check_aliasing(config: PositionConfig, length: int, tol: float = 1e-9) -> bool:
    """True iff the light vectors for ``t in [0, length)`` are pairwise distinct."""
    if length <= 1:
        return True
    P = _light_rows(np.arange(length, dtype=np.float64), config)
    sq = (P * P).sum(axis=0)
    d2 = sq[:, None] + sq[None, :] - 2.0 * P.T @ P
    np.fill_diagonal(d2, np.inf)
    return bool(d2.min() > tol * tol)


class RelativeEmbeddings:
    """Table of ``p_delta`` for ``delta in [-max_offset, max_offset]``.

    ``values`` is ``[d_p, 2 * max_offset + 1]`` with column ``delta + max_offset``.
    """

    def __init__(self, values, max_offset: int, kind: str):
        if not isinstance(values, Tensor):
            values = np.asarray(values, dtype=np.float64)
        if values.shape[1] != 2 * max_offset + 1:
            raise ContractError("relative table width must be 2 * max_offset + 1")
        self.values = values
        self.max_offset = int(max_offset)
        self.kind = kind

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def columns(self, deltas) -> np.ndarray:
        """Column indices for ``deltas``; raises if any offset is not in the table."""
        deltas = np.asarray(deltas)
        if deltas.size and np.abs(deltas).max() > self.max_offset:
            raise ContractError(
                f"offset {int(np.abs(deltas).max())} missing from relative table (max {self.max_offset})"
            )
        return deltas + self.max_offset

    def lookup(self, deltas):
        return self.values[:, self.columns(deltas)]

    def with_values(self, values) -> "RelativeEmbeddings":
        return RelativeEmbeddings(values, self.max_offset, self.kind)


def relative_light_table(max_offset: int, config: PositionConfig) -> RelativeEmbeddings:
    deltas = np.arange(-max_offset, max_offset + 1, dtype=np.float64)
    return RelativeEmbeddings(_light_rows(deltas, config), max_offset, "light")


def relative_sinusoidal_table(max_offset: int, d: int, T: int) -> RelativeEmbeddings:
    if d % 2:
        raise ParameterError(f"sinusoidal encoding needs an even dimension, got {d}")
    deltas = np.arange(-max_offset, max_offset + 1, dtype=np.float64)
    return RelativeEmbeddings(_sinusoid(deltas, d, T), max_offset, "sinusoidal")


def downsampled_length(length: int, strides=(2, 2)) -> int:
    """Length after a chain of 'same' convolutions with the given time strides."""
    for s in strides:
        length = -(-length // s)
    return length
