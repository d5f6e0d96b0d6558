"""Utterance datasets: synthetic tasks, feature/manifest files and block splits."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Optional

import numpy as np

from .autograd import Tensor
from .errors import DataError, FormatError, ParameterError

TASKS = ("order", "presence", "speakerized")


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [input_dim, L]
    intent: int
    speaker: int

    @property
    def length(self) -> int:
        return self.features.shape[1]


@dataclass
class Dataset:
    utterances: list
    n_intents: int
    n_speakers: int
    input_dim: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    def subset(self, indices) -> "Dataset":
        return Dataset([self.utterances[i] for i in indices], self.n_intents, self.n_speakers, self.input_dim, self.meta)

    def max_length(self) -> int:
        return max((u.length for u in self.utterances), default=1)

    def to_bytes(self) -> bytes:
        """Canonical byte image (ids, labels, shapes, float64 payloads)."""
        parts = []
        for u in self.utterances:
            parts.append(f"{u.id}|{u.intent}|{u.speaker}|{u.features.shape}".encode())
            parts.append(np.ascontiguousarray(u.features, dtype="<f8").tobytes())
        return b"\n".join(parts)


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------


def _balanced_labels(rng: np.random.Generator, n: int, n_classes: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % n_classes)


def _tokens_for_order(n_intents: int, cyclic: bool) -> int:
    k = 3 if cyclic else 2
    while math.factorial(k - 1 if cyclic else k) < n_intents:
        k += 1
    return k


def generate_synthetic(
    task: str,
    n_utt: int,
    n_intents: int,
    n_speakers: int,
    seed: int,
    *,
    input_dim: int = 40,
    token_frames: tuple = (6, 10),
    gap_frames: tuple = (12, 15),
    edge_frames: Optional[tuple] = None,
    cyclic: bool = True,
    noise: float = 0.5,
    speaker_gain: float = 0.2,
    speaker_offset: float = 0.5,
) -> Dataset:
    """Sequences of noisy token prototypes separated by filler.

    ``order``
        Every utterance holds the same tokens; the intent is their order, one
        of ``n_intents`` fixed permutations. With ``cyclic`` the intents are
        cyclic orders and each utterance starts at a random rotation, so the
        mean position of every token is the same for all intents and only
        which token follows which identifies the intent. Gaps are at least as long as the
        front-end's receptive field, so no conv window sees two tokens (or a
        token and the sequence edge). The default gap range spans a multiple
        of the total stride, so token phases on the down-sampled grid are
        uniform and carry no order information either. ``edge_frames`` (default:
        ``gap_frames``) sets the leading and trailing filler; a wide range
        decouples token order from absolute position.
    ``presence``
        The intent is which token appears (plus one shared distractor).
    ``speakerized``
        ``order`` with a per-speaker affine channel (gain and offset per
        feature), so the speaker head has something to learn.
    """
    if task not in TASKS:
        raise ParameterError(f"unknown task {task!r}; expected one of {TASKS}")
    if n_intents < 2 or n_speakers < 1:
        raise ParameterError("need n_intents >= 2 and n_speakers >= 1")
    if n_utt < n_intents or n_utt < n_speakers:
        raise ParameterError(f"n_utt={n_utt} must be >= n_intents={n_intents} and n_speakers={n_speakers}")
    edge_frames = gap_frames if edge_frames is None else edge_frames
    rng = np.random.default_rng(seed)

    if task == "presence":
        n_tokens = n_intents + 1  # last one is the distractor
    else:
        n_tokens = _tokens_for_order(n_intents, cyclic)
    prototypes = rng.normal(0.0, 1.0, size=(n_tokens, input_dim))
    orders = None
    if task != "presence":
        if cyclic:
            all_orders = [(0,) + p for p in permutations(range(1, n_tokens))]
        else:
            all_orders = list(permutations(range(n_tokens)))
        pick = rng.choice(len(all_orders), size=n_intents, replace=False)
        orders = [all_orders[i] for i in sorted(pick)]
    gains = 1.0 + speaker_gain * rng.normal(size=(n_speakers, input_dim))
    offsets = speaker_offset * rng.normal(size=(n_speakers, input_dim))

    intents = _balanced_labels(rng, n_utt, n_intents)
    speakers = _balanced_labels(rng, n_utt, n_speakers)
    utterances = []
    for i in range(n_utt):
        intent, speaker = int(intents[i]), int(speakers[i])
        if task == "presence":
            seq = [intent, n_tokens - 1]
            if rng.random() < 0.5:
                seq.reverse()
        else:
            seq = list(orders[intent])
            if cyclic:
                shift = int(rng.integers(n_tokens))
                seq = seq[shift:] + seq[:shift]
        frames = []
        for t, tok in enumerate(seq):
            lo, hi = edge_frames if t == 0 else gap_frames
            frames.append(rng.normal(0.0, noise, size=(int(rng.integers(lo, hi + 1)), input_dim)))
            n = int(rng.integers(token_frames[0], token_frames[1] + 1))
            frames.append(prototypes[tok] + rng.normal(0.0, noise, size=(n, input_dim)))
        lo, hi = edge_frames
        frames.append(rng.normal(0.0, noise, size=(int(rng.integers(lo, hi + 1)), input_dim)))
        x = np.concatenate(frames, axis=0)
        if task == "speakerized":
            x = x * gains[speaker] + offsets[speaker]
        utterances.append(Utterance(f"syn{i:06d}", np.ascontiguousarray(x.T), intent, speaker))

    meta = {"task": task, "seed": seed, "orders": [list(o) for o in orders] if orders else None}
    return Dataset(utterances, n_intents, n_speakers, input_dim, meta)


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------


def write_features(path, features) -> None:
    """Text format: ``FEAT 1 <input_dim> <L>`` then L time-major rows."""
    arr = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    dim, length = arr.shape
    lines = [f"FEAT 1 {dim} {length}"]
    lines += [" ".join(repr(float(v)) for v in arr[:, t]) for t in range(length)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str, path) -> tuple[int, int]:
    parts = line.split()
    if len(parts) != 4 or parts[0] != "FEAT" or parts[1] != "1":
        raise FormatError(f"{path}: bad header {line!r}", line=1)
    try:
        dim, length = int(parts[2]), int(parts[3])
    except ValueError:
        raise FormatError(f"{path}: non-integer dimensions in header", line=1) from None
    if dim < 1 or length < 1:
        raise FormatError(f"{path}: dimensions must be positive", line=1)
    return dim, length


def read_features(path) -> Tensor:
    """Parse a feature file into an ``[input_dim, L]`` tensor.

    Raises:
        FormatError: bad header, wrong number of rows or values, non-finite
            values or trailing content. The message names the line.
    """
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(f"{path}: empty file", line=1)
    dim, length = _parse_header(lines[0], path)
    if len(lines) - 1 < length:
        raise FormatError(f"{path}: expected {length} rows, found {len(lines) - 1}", line=len(lines) + 1)
    if len(lines) - 1 > length:
        raise FormatError(f"{path}: trailing content after {length} rows", line=length + 2)
    out = np.empty((dim, length))
    for t in range(length):
        fields = lines[t + 1].split(" ")
        if len(fields) != dim:
            raise FormatError(f"{path}: expected {dim} values, found {len(fields)}", line=t + 2)
        try:
            row = [float(v) for v in fields]
        except ValueError:
            raise FormatError(f"{path}: unparsable value", line=t + 2) from None
        if not all(math.isfinite(v) for v in row):
            raise FormatError(f"{path}: non-finite value", line=t + 2)
        out[:, t] = row
    return Tensor(out)


def read_feature_header(path) -> tuple[int, int]:
    with open(path, encoding="utf-8") as fh:
        return _parse_header(fh.readline().rstrip("\n"), path)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

MANIFEST_HEADER = ["id", "path", "intent", "speaker"]


@dataclass
class ManifestRecord:
    id: str
    path: str  # relative to the manifest's directory
    intent: int
    speaker: int


@dataclass
class Manifest:
    records: list
    n_intents: int
    n_speakers: int
    input_dim: Optional[int]
    root: Path = Path(".")

    def __len__(self):
        return len(self.records)


def write_manifest(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.id, r.path, r.intent, r.speaker])


def _label(value: str, what: str, rec_id: str, limit: Optional[int]) -> int:
    try:
        label = int(value)
    except ValueError:
        raise DataError(f"record {rec_id!r}: {what} label {value!r} is not an integer") from None
    if label < 0 or (limit is not None and label >= limit):
        raise DataError(f"record {rec_id!r}: {what} label {label} outside [0, {limit})")
    return label


def read_manifest(path, n_intents: Optional[int] = None, n_speakers: Optional[int] = None) -> Manifest:
    """Load and validate a manifest CSV.

    Label counts default to ``max label + 1``; passing them enforces the range.
    ``input_dim`` is read from the first feature file's header.
    """
    path = Path(path)
    root = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != MANIFEST_HEADER:
        raise DataError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
    records, seen = [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise DataError(f"{path}: line {lineno} has {len(row)} fields, expected 4")
        rec_id, rel, intent, speaker = row
        if rec_id in seen:
            raise DataError(f"{path}: duplicate id {rec_id!r}")
        seen.add(rec_id)
        if not (root / rel).is_file():
            raise DataError(f"{path}: record {rec_id!r} references missing file {rel!r}")
        records.append(
            ManifestRecord(rec_id, rel, _label(intent, "intent", rec_id, n_intents), _label(speaker, "speaker", rec_id, n_speakers))
        )
    if n_intents is None:
        n_intents = max((r.intent for r in records), default=-1) + 1
    if n_speakers is None:
        n_speakers = max((r.speaker for r in records), default=-1) + 1
    input_dim = read_feature_header(root / records[0].path)[0] if records else None
    return Manifest(records, n_intents, n_speakers, input_dim, root)


def load_dataset(manifest: Manifest) -> Dataset:
    utts = []
    for r in manifest.records:
        feats = read_features(manifest.root / r.path).data
        if feats.shape[0] != manifest.input_dim:
            raise DataError(f"record {r.id!r}: input_dim {feats.shape[0]} differs from {manifest.input_dim}")
        utts.append(Utterance(r.id, feats, r.intent, r.speaker))
    return Dataset(utts, manifest.n_intents, manifest.n_speakers, manifest.input_dim or 0)


def export_dataset(dataset: Dataset, directory) -> Path:
    """Write every utterance as a feature file plus ``manifest.csv``; returns the manifest path."""
    directory = Path(directory)
    (directory / "feats").mkdir(parents=True, exist_ok=True)
    records = []
    for u in dataset.utterances:
        rel = os.path.join("feats", f"{u.id}.feat")
        write_features(directory / rel, u.features)
        records.append(ManifestRecord(u.id, rel, u.intent, u.speaker))
    write_manifest(directory / "manifest.csv", records)
    return directory / "manifest.csv"


# ---------------------------------------------------------------------------
# learning-curve splits
# ---------------------------------------------------------------------------


@dataclass
class BlockSplit:
    """Shuffled near-equal blocks plus one block order per fold."""

    blocks: list  # list of index arrays
    fold_orders: list  # per fold, a permutation of block indices
    fold_seeds: list

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def n_folds(self) -> int:
        return len(self.fold_orders)

    def train_test(self, fold: int, n_train_blocks: int) -> tuple[np.ndarray, np.ndarray]:
        """Indices of the first ``n_train_blocks`` blocks of this fold's order, and of the rest."""
        if not 1 <= n_train_blocks < self.n_blocks:
            raise ParameterError(f"n_train_blocks must be in [1, {self.n_blocks - 1}]")
        order = self.fold_orders[fold]
        train = np.concatenate([self.blocks[b] for b in order[:n_train_blocks]])
        test = np.concatenate([self.blocks[b] for b in order[n_train_blocks:]])
        return train, test


def split_blocks(n_items, n_blocks: int = 150, n_folds: int = 5, seed: int = 0) -> BlockSplit:
    """Seeded shuffle, contiguous partition into blocks, per-fold re-shuffled block orders."""
    n = len(n_items) if not isinstance(n_items, (int, np.integer)) else int(n_items)
    if n_blocks < 2 or n_folds < 1:
        raise ParameterError("need n_blocks >= 2 and n_folds >= 1")
    if n < n_blocks:
        raise ParameterError(f"{n} utterances cannot fill {n_blocks} blocks")
    order = np.random.default_rng(seed).permutation(n)
    blocks = np.array_split(order, n_blocks)
    fold_seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(n_folds)]
    fold_orders = [np.random.default_rng(s).permutation(n_blocks) for s in fold_seeds]
    return BlockSplit(blocks, fold_orders, fold_seeds)
