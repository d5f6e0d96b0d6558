"""Intent and speaker heads on top of the encoder, and the training recipe."""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from sklearn.metrics import f1_score

from . import functional as F
from .autograd import Tensor, backward, no_grad, parameter
from .encoder import EncoderConfig, EncoderWeights, encode, init_weights, with_period
from .errors import ConfigurationError, ContractError, DataError, DivergenceError


@dataclass
class ClassifierHead:
    intent_w: Tensor  # [n_intents, d_model + 6]
    intent_b: Tensor
    speaker_w: Tensor  # [n_speakers, d_model + 6]
    speaker_b: Tensor

    @property
    def n_intents(self) -> int:
        return self.intent_w.shape[0]

    @property
    def n_speakers(self) -> int:
        return self.speaker_w.shape[0]

    def named_parameters(self, prefix: str = "") -> list:
        return [(prefix + n, getattr(self, n)) for n in ("intent_w", "intent_b", "speaker_w", "speaker_b")]


def init_head(d_in: int, n_intents: int, n_speakers: int, rng: np.random.Generator) -> ClassifierHead:
    return ClassifierHead(
        parameter(F.glorot_uniform(rng, (n_intents, d_in), d_in, n_intents)),
        parameter(np.zeros(n_intents)),
        parameter(F.glorot_uniform(rng, (n_speakers, d_in), d_in, n_speakers)),
        parameter(np.zeros(n_speakers)),
    )


def pool_and_classify(hidden, head: ClassifierHead, lengths=None):
    """Mean-pool over (valid) time, then the intent and speaker projections.

    ``hidden`` is ``[D, L']`` or ``[B, D, L']``; logits come back as ``[C]`` or ``[B, C]``.
    """
    hidden = hidden if isinstance(hidden, Tensor) else Tensor(hidden)
    if hidden.shape[-1] < 1:
        raise ContractError("cannot pool an empty sequence")
    single = hidden.ndim == 2
    if single:
        hidden = hidden.reshape((1,) + hidden.shape)
    B, _, L = hidden.shape
    lengths = np.full(B, L) if lengths is None else np.asarray(lengths)
    valid = np.arange(L)[None, :] < lengths[:, None]
    pooled = F.masked_mean(hidden, valid[:, None, :], axis=-1)  # [B, D]
    intent = pooled @ head.intent_w.T + head.intent_b
    speaker = pooled @ head.speaker_w.T + head.speaker_b
    if single:
        return intent.reshape((-1,)), speaker.reshape((-1,))
    return intent, speaker


@dataclass
class Model:
    config: EncoderConfig
    encoder: EncoderWeights
    head: ClassifierHead

    def named_parameters(self) -> list:
        return self.encoder.named_parameters("encoder.") + self.head.named_parameters("head.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]


def init_model(config: EncoderConfig, n_intents: int, n_speakers: int, seed: int) -> Model:
    encoder = init_weights(config, seed)
    # separate stream so the head never shifts the encoder's initial draw
    head = init_head(config.output_dim, n_intents, n_speakers, np.random.default_rng([seed, 1]))
    return Model(config, encoder, head)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-9
    warmup_steps: int = 4000
    total_steps: int = 1000
    batch_size: int = 32
    avg_last_k: int = 10
    dropout: float = 0.1
    seed: int = 0
    # multiplies the warmup schedule
    lr_factor: float = 1.0
    # "step" keeps the last k optimizer steps, "epoch" the last k epoch ends
    snapshot_every: str = "step"

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigurationError("betas must lie in (0, 1)")
        if not self.epsilon > 0.0:
            raise ConfigurationError("epsilon must be positive")
        if self.warmup_steps < 1 or self.avg_last_k < 1:
            raise ConfigurationError("warmup_steps and avg_last_k must be >= 1")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigurationError("total_steps and batch_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")
        if not self.lr_factor > 0.0:
            raise ConfigurationError("lr_factor must be positive")
        if self.snapshot_every not in ("step", "epoch"):
            raise ConfigurationError("snapshot_every must be 'step' or 'epoch'")


@dataclass
class TrainState:
    m: list
    v: list
    snapshots: deque
    rng: np.random.Generator
    step: int = 0

    @classmethod
    def create(cls, params, avg_last_k: int, seed: int = 0) -> "TrainState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            snapshots=deque(maxlen=avg_last_k),
            rng=np.random.default_rng(seed),
        )


def warmup_lr(step: int, d_model: int, warmup_steps: int) -> float:
    """``d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)``."""
    if step < 1:
        raise ContractError(f"warmup_lr is defined for step >= 1, got {step}")
    return d_model**-0.5 * min(step**-0.5, step * warmup_steps**-1.5)


def adam_step(params, grads, state: TrainState, lr: float, config: TrainConfig, snapshot: bool = True) -> None:
    """One bias-corrected Adam update, in place; optionally pushes a parameter snapshot."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params, grads and moment buffers differ in count")
    for p, g, m in zip(params, grads, state.m):
        if p.data.shape != np.shape(g) or p.data.shape != m.shape:
            raise ContractError(f"shape mismatch in adam_step: {p.data.shape} vs {np.shape(g)}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + config.epsilon)
    if snapshot:
        state.snapshots.append([p.data.copy() for p in params])


def average_checkpoints(snapshots) -> list:
    """Element-wise mean of the stored snapshots (however many are present).

    Computed as ``s_0 + sum(s_i - s_0) / k``: exact when the snapshots agree and
    free of the cancellation a plain sum suffers for nearby snapshots.
    """
    snapshots = list(snapshots)
    if not snapshots:
        raise ContractError("no snapshots to average")
    out = []
    for arrays in zip(*snapshots):
        base = arrays[0]
        acc = np.zeros_like(base)
        for a in arrays[1:]:
            acc += a - base
        out.append(base + acc / len(arrays))
    return out


# ---------------------------------------------------------------------------
# batching, prediction and the training loop
# ---------------------------------------------------------------------------


def pad_batch(utterances) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([u.length for u in utterances])
    dim = utterances[0].features.shape[0]
    out = np.zeros((len(utterances), dim, int(lengths.max())))
    for i, u in enumerate(utterances):
        out[i, :, : u.length] = u.features
    return out, lengths


def forward(model: Model, utterances, training: bool = False, rng=None, **kw):
    feats, lengths = pad_batch(utterances)
    hidden, out_lengths = encode(feats, model.config, model.encoder, training, rng, lengths=lengths, return_lengths=True, **kw)
    return pool_and_classify(hidden, model.head, out_lengths)


def predict(model: Model, utterances, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    intents, speakers = [], []
    with no_grad():
        for s in range(0, len(utterances), batch_size):
            il, sl = forward(model, utterances[s : s + batch_size])
            intents.append(il.data.argmax(axis=1))
            speakers.append(sl.data.argmax(axis=1))
    if not intents:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    return np.concatenate(intents), np.concatenate(speakers)


def intent_f1(y_true, y_pred, n_intents: int, average: str = "micro") -> float:
    return float(f1_score(y_true, y_pred, labels=list(range(n_intents)), average=average, zero_division=0))


def evaluate(model: Model, dataset, batch_size: int = 64) -> dict:
    intents, speakers = predict(model, dataset.utterances, batch_size)
    yi = np.array([u.intent for u in dataset.utterances])
    ys = np.array([u.speaker for u in dataset.utterances])
    return {
        "intent_f1_micro": intent_f1(yi, intents, dataset.n_intents, "micro"),
        "intent_f1_macro": intent_f1(yi, intents, dataset.n_intents, "macro"),
        "speaker_acc": float((speakers == ys).mean()) if len(ys) else 0.0,
    }


METRIC_COLUMNS = ("step", "epoch", "lr", "train_loss", "intent_f1_micro", "intent_f1_macro", "speaker_acc")


@dataclass
class TrainResult:
    model: Model
    metrics: list  # one dict per epoch, keys METRIC_COLUMNS
    losses: list  # per step
    seconds: float = 0.0
    # wall-clock seconds until validation intent accuracy first met the target
    time_to_target: Optional[float] = None
    state: Optional[TrainState] = field(default=None, repr=False)


def _check_labels(dataset) -> None:
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    for u in dataset.utterances:
        if not (0 <= u.intent < dataset.n_intents and 0 <= u.speaker < dataset.n_speakers):
            raise DataError(f"utterance {u.id!r} has labels outside the configured class counts")


def train(
    dataset,
    enc_config: EncoderConfig,
    train_config: TrainConfig,
    *,
    valid=None,
    target_accuracy: Optional[float] = None,
    eval_every: int = 0,
) -> TrainResult:
    """Minibatch training with warmup Adam; returns the checkpoint-averaged model.

    Each epoch is a fresh seeded shuffle of the data; the last epoch may be
    partial when ``total_steps`` is not a multiple of the epoch length. The
    loss is the unweighted sum of intent and speaker cross entropy.

    When ``valid`` and ``target_accuracy`` are given, the current weights are
    scored every ``eval_every`` steps (default: once per epoch) and the first
    time intent accuracy reaches the target is recorded.
    """
    _check_labels(dataset)
    tc = train_config
    if enc_config.position.T is None:
        enc_config = with_period(enc_config, dataset.max_length())
    enc_config = replace(enc_config, dropout=tc.dropout)
    model = init_model(enc_config, dataset.n_intents, dataset.n_speakers, tc.seed)
    params = model.parameters()
    state = TrainState.create(params, tc.avg_last_k, tc.seed)
    rng = state.rng

    n = len(dataset)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    metrics, losses = [], []
    epoch_loss, epoch_true, epoch_pred, epoch_spk_true, epoch_spk_pred = [], [], [], [], []
    order = None
    started = time.perf_counter()
    time_to_target = None
    eval_every = eval_every or steps_per_epoch

    for step in range(1, tc.total_steps + 1):
        pos = (step - 1) % steps_per_epoch
        if pos == 0:
            order = rng.permutation(n)
        batch = [dataset.utterances[i] for i in order[pos * tc.batch_size : (pos + 1) * tc.batch_size]]
        intent_logits, speaker_logits = forward(model, batch, True, rng)
        yi = np.array([u.intent for u in batch])
        ys = np.array([u.speaker for u in batch])
        loss = F.cross_entropy(intent_logits, yi) + F.cross_entropy(speaker_logits, ys)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss {value} at step {step}")
        grads = backward(loss, inputs=params)
        lr = tc.lr_factor * warmup_lr(step, enc_config.d_model, tc.warmup_steps)
        adam_step(params, grads, state, lr, tc, snapshot=tc.snapshot_every == "step")

        losses.append(value)
        epoch_loss.append(value)
        epoch_true.append(yi)
        epoch_pred.append(intent_logits.data.argmax(axis=1))
        epoch_spk_true.append(ys)
        epoch_spk_pred.append(speaker_logits.data.argmax(axis=1))

        if valid is not None and target_accuracy is not None and time_to_target is None and step % eval_every == 0:
            intents, _ = predict(model, valid.utterances)
            acc = float((intents == np.array([u.intent for u in valid.utterances])).mean())
            if acc >= target_accuracy:
                time_to_target = time.perf_counter() - started

        if pos == steps_per_epoch - 1 or step == tc.total_steps:
            if tc.snapshot_every == "epoch":
                state.snapshots.append([p.data.copy() for p in params])
            t_true, t_pred = np.concatenate(epoch_true), np.concatenate(epoch_pred)
            s_true, s_pred = np.concatenate(epoch_spk_true), np.concatenate(epoch_spk_pred)
            metrics.append(
                {
                    "step": step,
                    "epoch": len(metrics) + 1,
                    "lr": lr,
                    "train_loss": float(np.mean(epoch_loss)),
                    "intent_f1_micro": intent_f1(t_true, t_pred, dataset.n_intents, "micro"),
                    "intent_f1_macro": intent_f1(t_true, t_pred, dataset.n_intents, "macro"),
                    "speaker_acc": float((s_true == s_pred).mean()),
                }
            )
            epoch_loss, epoch_true, epoch_pred, epoch_spk_true, epoch_spk_pred = [], [], [], [], []

    for p, avg in zip(params, average_checkpoints(state.snapshots)):
        p.data[...] = avg
    return TrainResult(model, metrics, losses, time.perf_counter() - started, time_to_target, state)
