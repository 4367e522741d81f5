"""Mean-pooled embedding classifier used as the base model for attribution and relabeling.

Architecture (fixed)::

    s = mean(sentence embeddings), a = mean(aspect embeddings)
    p = softmax(W2 . tanh(W1 . [s; a] + b1) + b2)

Everything is float64 numpy with hand-written backpropagation.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Dataset, EncodedSample, Polarity, Vocab, encode

log = logging.getLogger(__name__)

N_CLASSES = len(Polarity)
LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.5
    seed: int = 1
    l2_penalty: float = 1e-5
    d: int = 64
    h: int = 64

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be >= 0")
        if self.d < 1 or self.h < 1:
            raise ValueError("d and h must be >= 1")


@dataclass(eq=False)
class ModelParams:
    E: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    NAMES = ("E", "W1", "b1", "W2", "b2")

    def __post_init__(self) -> None:
        v, d = self.E.shape
        h = self.b1.shape[0]
        expected = {"W1": (2 * d, h), "b1": (h,), "W2": (h, N_CLASSES), "b2": (N_CLASSES,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def vocab_size(self) -> int:
        return self.E.shape[0]

    @property
    def d(self) -> int:
        return self.E.shape[1]

    @property
    def h(self) -> int:
        return self.b1.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.NAMES]

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    @classmethod
    def zeros(cls, vocab_size: int, d: int, h: int) -> "ModelParams":
        return cls(np.zeros((vocab_size, d)), np.zeros((2 * d, h)), np.zeros(h),
                   np.zeros((h, N_CLASSES)), np.zeros(N_CLASSES))

    @classmethod
    def init(cls, vocab_size: int, d: int, h: int, seed: int) -> "ModelParams":
        """Uniform(-0.1, 0.1) initialisation from a PCG64 stream seeded by ``seed``."""
        rng = np.random.Generator(np.random.PCG64(seed))
        u = lambda *shape: rng.uniform(-0.1, 0.1, size=shape)  # noqa: E731
        return cls(u(vocab_size, d), u(2 * d, h), u(h), u(h, N_CLASSES), u(N_CLASSES))


@dataclass(frozen=True, eq=False)
class EmbeddedInput:
    """Continuous view of an encoded sample; integrated gradients interpolate here."""

    sentence_vecs: np.ndarray  # (L, d)
    aspect_vecs: np.ndarray  # (m, d), the tokens after [SEP]
    origin: EncodedSample | None = None

    def __post_init__(self) -> None:
        if self.sentence_vecs.ndim != 2 or self.aspect_vecs.ndim != 2:
            raise ValueError("embedded inputs must be 2-d arrays")
        if len(self.sentence_vecs) == 0 or len(self.aspect_vecs) == 0:
            raise ValueError("sentence and aspect must both be non-empty")
        if self.sentence_vecs.shape[1] != self.aspect_vecs.shape[1]:
            raise ValueError("sentence and aspect vectors differ in width")

    def replace(self, sentence_vecs: np.ndarray | None = None, aspect_vecs: np.ndarray | None = None) -> "EmbeddedInput":
        return EmbeddedInput(
            self.sentence_vecs if sentence_vecs is None else sentence_vecs,
            self.aspect_vecs if aspect_vecs is None else aspect_vecs,
            self.origin,
        )


def embed(params: ModelParams, encoded: EncodedSample) -> EmbeddedInput:
    return EmbeddedInput(
        params.E[list(encoded.sentence_ids)].copy(),
        params.E[list(encoded.aspect_ids)].copy(),
        encoded,
    )


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_width(params: ModelParams, x: EmbeddedInput) -> None:
    if x.sentence_vecs.shape[1] != params.d:
        raise ValueError(f"input width {x.sentence_vecs.shape[1]} does not match model width {params.d}")


def _pooled_forward(params: ModelParams, s: np.ndarray, a: np.ndarray):
    """Forward pass on pooled vectors; batched over leading axis. Returns (hidden, probs)."""
    z = np.concatenate([s, a], axis=-1) @ params.W1 + params.b1
    hidden = np.tanh(z)
    return hidden, _softmax(hidden @ params.W2 + params.b2)


def forward(params: ModelParams, x: EmbeddedInput) -> np.ndarray:
    """Class probabilities (negative, neutral, positive)."""
    _check_width(params, x)
    _, p = _pooled_forward(params, x.sentence_vecs.mean(axis=0), x.aspect_vecs.mean(axis=0))
    return p


def predict_proba(params: ModelParams, encoded: EncodedSample) -> np.ndarray:
    return forward(params, embed(params, encoded))


def pooled_prob_grads(params: ModelParams, s: np.ndarray, a: np.ndarray, class_index: int):
    """d p[class_index] / d s and d p[class_index] / d a for a batch of pooled vectors.

    Returns (probs, grad_s, grad_a); batched over the leading axis of ``s``/``a``.
    """
    hidden, p = _pooled_forward(params, s, a)
    onehot = np.zeros(N_CLASSES)
    onehot[class_index] = 1.0
    pc = p[..., class_index : class_index + 1]
    d_logits = pc * (onehot - p)
    d_z = (d_logits @ params.W2.T) * (1.0 - hidden**2)
    d_cat = d_z @ params.W1.T
    d = params.d
    return p, d_cat[..., :d], d_cat[..., d:]


def grad_wrt_input(params: ModelParams, x: EmbeddedInput, class_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient of softmax output ``class_index`` w.r.t. every input vector.

    Returns ``(sentence_grads, aspect_grads)`` shaped like the inputs.
    """
    if class_index not in range(N_CLASSES):
        raise ValueError(f"class_index must be in 0..{N_CLASSES - 1}")
    _check_width(params, x)
    _, gs, ga = pooled_prob_grads(params, x.sentence_vecs.mean(axis=0), x.aspect_vecs.mean(axis=0), class_index)
    L, m = len(x.sentence_vecs), len(x.aspect_vecs)
    return np.tile(gs / L, (L, 1)), np.tile(ga / m, (m, 1))


def class_weights(counts: Sequence[int]) -> np.ndarray:
    """Per-class weights ``1 - n_c / sum(n)``; absent classes get weight 1."""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        return np.ones_like(counts)
    return 1.0 - counts / total


def balanced_ce(batch_probs: np.ndarray, batch_labels: Sequence[int], class_counts: Sequence[int]) -> float:
    """Class-balanced cross entropy, averaged over the batch.

    Each sample's ``-log p_y`` is weighted by its gold class's weight
    ``1 - n_y / sum(n)`` computed from ``class_counts``.
    """
    probs = np.asarray(batch_probs, dtype=float)
    labels = np.asarray(batch_labels, dtype=int)
    counts = np.asarray(class_counts)
    if np.any(counts[labels] <= 0):
        raise ValueError("every label in the batch needs a positive class count")
    w = class_weights(counts)[labels]
    p_y = np.maximum(probs[np.arange(len(labels)), labels], LOG_CLAMP)
    return float(np.sum(w * -np.log(p_y)) / len(labels))


class TrainingDiverged(RuntimeError):
    pass


def _padded_batch(encoded: Sequence[EncodedSample]):
    """Index matrices plus per-row 1/length weights for sentence and aspect pooling."""
    def pack(rows: list[tuple[int, ...]]):
        width = max(len(r) for r in rows)
        idx = np.zeros((len(rows), width), dtype=np.int64)
        w = np.zeros((len(rows), width))
        for i, r in enumerate(rows):
            idx[i, : len(r)] = r
            w[i, : len(r)] = 1.0 / len(r)
        return idx, w

    return pack([e.sentence_ids for e in encoded]), pack([e.aspect_ids for e in encoded])


def _batch_step(params: ModelParams, batch: Sequence[EncodedSample], l2: float) -> tuple[float, list[np.ndarray]]:
    (s_idx, s_w), (a_idx, a_w) = _padded_batch(batch)
    labels = np.array([int(e.label) for e in batch])
    B = len(batch)

    s = np.einsum("bl,bld->bd", s_w, params.E[s_idx])
    a = np.einsum("bl,bld->bd", a_w, params.E[a_idx])
    cat = np.concatenate([s, a], axis=1)
    hidden = np.tanh(cat @ params.W1 + params.b1)
    p = _softmax(hidden @ params.W2 + params.b2)

    counts = np.bincount(labels, minlength=N_CLASSES)
    loss = balanced_ce(p, labels, counts)
    w = class_weights(counts)[labels]

    d_logits = p.copy()
    d_logits[np.arange(B), labels] -= 1.0
    d_logits *= (w / B)[:, None]
    gW2 = hidden.T @ d_logits
    gb2 = d_logits.sum(axis=0)
    d_z = (d_logits @ params.W2.T) * (1.0 - hidden**2)
    gW1 = cat.T @ d_z
    gb1 = d_z.sum(axis=0)
    d_cat = d_z @ params.W1.T
    d = params.d
    gE = np.zeros_like(params.E)
    np.add.at(gE, s_idx, s_w[:, :, None] * d_cat[:, None, :d])
    np.add.at(gE, a_idx, a_w[:, :, None] * d_cat[:, None, d:])

    grads = [gE, gW1, gb1, gW2, gb2]
    if l2:
        grads = [g + l2 * x for g, x in zip(grads, params.arrays())]
    return loss, grads


def train(dataset: Dataset, vocab: Vocab, config: TrainConfig = TrainConfig()) -> tuple[ModelParams, list[float]]:
    """Minibatch gradient descent on balanced cross entropy.

    Initialisation and shuffling depend only on ``config.seed``, so the
    result is a pure function of (dataset, vocab, config). Returns the
    parameters and the mean training loss of every epoch.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    present = {s.label for s in dataset}
    if present != set(Polarity):
        missing = sorted(p.label for p in set(Polarity) - present)
        raise ValueError(f"training data lacks classes: {', '.join(missing)}")

    encoded = [encode(s, vocab) for s in dataset]
    params = ModelParams.init(len(vocab), config.d, config.h, config.seed)
    rng = np.random.Generator(np.random.PCG64([config.seed, 1]))
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(encoded))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [encoded[i] for i in order[start : start + config.batch_size]]
            loss, grads = _batch_step(params, batch, config.l2_penalty)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(f"non-finite loss/gradient at epoch {epoch}, batch starting {start}")
            for x, g in zip(params.arrays(), grads):
                x -= config.learning_rate * g
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.6f", epoch, history[-1])
    return params, history


def predict(params: ModelParams, vocab: Vocab, dataset: Dataset) -> np.ndarray:
    """Argmax predictions for every sample of ``dataset``."""
    return np.array([int(np.argmax(predict_proba(params, encode(s, vocab)))) for s in dataset], dtype=int)


# --- checkpoints -----------------------------------------------------------

MAGIC = b"CFAUG"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    vocab: Vocab
    config: TrainConfig
    final_loss: float
    version: int = FORMAT_VERSION


def _pack_bytes(blob: bytes) -> bytes:
    return struct.pack("<Q", len(blob)) + blob


def _pack_array(a: np.ndarray) -> bytes:
    head = struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_checkpoint(params: ModelParams, vocab: Vocab, config: TrainConfig, path: str | Path,
                    final_loss: float = float("nan")) -> None:
    """Write ``CFAUG | version | u64 payload length | payload | crc32(payload)``.

    The payload is a length-prefixed JSON header (vocab, config, loss)
    followed by each weight matrix as little-endian float64.
    """
    header = json.dumps(
        {"vocab": list(vocab.id_to_token), "config": asdict(config), "final_loss": final_loss},
        sort_keys=True,
    ).encode("utf-8")
    payload = _pack_bytes(header) + b"".join(_pack_array(a) for a in params.arrays())
    blob = MAGIC + struct.pack("<B", FORMAT_VERSION) + struct.pack("<Q", len(payload)) + payload
    blob += struct.pack("<I", zlib.crc32(payload))
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError("payload ends early")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 1:
        raise CheckpointTruncatedError(f"{path}: file too short")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = raw[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    head = len(MAGIC) + 1 + 8
    if len(raw) < head:
        raise CheckpointTruncatedError(f"{path}: file too short")
    (n,) = struct.unpack("<Q", raw[len(MAGIC) + 1 : head])
    if len(raw) != head + n + 4:
        raise CheckpointTruncatedError(f"{path}: expected {head + n + 4} bytes, found {len(raw)}")
    payload = raw[head : head + n]
    (crc,) = struct.unpack("<I", raw[head + n :])
    if zlib.crc32(payload) != crc:
        raise CheckpointChecksumError(f"{path}: checksum mismatch")

    r = _Reader(payload)
    (hlen,) = r.unpack("<Q")
    meta = json.loads(r.take(hlen).decode("utf-8"))
    arrays = []
    for _ in ModelParams.NAMES:
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        count = int(np.prod(shape)) if shape else 1
        arrays.append(np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64))
    return Checkpoint(
        params=ModelParams(*arrays),
        vocab=Vocab(tuple(meta["vocab"])),
        config=TrainConfig(**meta["config"]),
        final_loss=meta["final_loss"],
        version=version,
    )
