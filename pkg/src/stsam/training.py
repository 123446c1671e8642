"""Loss, Adam, the early-stopping epoch loop, and checkpoint files."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .dataio import DatasetMeta, NormalizationStats, Sample
from .model import HyperParams, RegionBatch, check_params, collate, forward
from .numerics import Tensor

logger = logging.getLogger(__name__)

# floor on the per-sample root inside the loss derivative (an exact fit has mse 0)
LOSS_GUARD = 1e-12


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, checkpoint: Optional["Checkpoint"] = None, report=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.report = report


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------
def loss_joint_rmse(pred: Tensor, target) -> Tensor:
    """Mean over samples of sqrt(sum of squared in/out errors / 2n).

    ``pred`` and ``target`` are ``[B, n, 2]`` (or ``[n, 2]`` for one sample).
    """
    target = nx.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"loss: prediction shape {pred.shape} != target shape {target.shape}")
    if pred.ndim == 2:
        pred = nx.reshape(pred, (1,) + pred.shape)
        target = nx.reshape(target, (1,) + target.shape)
    mse = nx.mean(nx.square(nx.sub(pred, target)), axis=(-2, -1))
    return nx.mean(nx.sqrt(mse, grad_floor=LOSS_GUARD))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------
@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be at least 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.step
        )


def adam_step(params: dict, state: OptimizerState, config: TrainConfig) -> None:
    """Apply one bias-corrected Adam update in place from the params' ``.grad``.

    Parameters without a gradient are treated as having a zero gradient.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise DivergenceError(f"non-finite gradient in {name} at step {state.step + 1}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
        p.data -= update


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


def snapshot(params: dict) -> dict:
    return {k: p.data.copy() for k, p in params.items()}


def restore(params: dict, arrays: dict) -> None:
    for k, p in params.items():
        p.data = arrays[k].copy()


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------
CHECKPOINT_MAGIC = b"STSAMCKP"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f8"): 1, np.dtype("<f4"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    hp: HyperParams
    meta: Optional[DatasetMeta]
    stats: Optional[NormalizationStats]
    params: dict  # name -> np.ndarray
    best_val_loss: float = float("inf")
    optimizer: Optional[OptimizerState] = None
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @property
    def meta_fingerprint(self) -> Optional[str]:
        return self.meta.fingerprint() if self.meta is not None else None

    def tensors(self, requires_grad: bool = True) -> dict:
        return {k: Tensor(a.copy(), requires_grad=requires_grad, name=k) for k, a in self.params.items()}


def _write_array(buf, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    le = arr.dtype.newbyteorder("<")
    if le not in _DTYPE_CODES:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BB", _DTYPE_CODES[le], arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.astype(le, copy=False).tobytes())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write a checkpoint: magic, version, JSON header, shape-prefixed arrays, CRC32.

    All integers and array payloads are little-endian.
    """
    header = {
        "hyperparams": ckpt.hp.to_dict(),
        "meta": ckpt.meta.to_dict() if ckpt.meta is not None else None,
        "meta_fingerprint": ckpt.meta_fingerprint,
        "normalization": dataclasses.asdict(ckpt.stats) if ckpt.stats is not None else None,
        "best_val_loss": ckpt.best_val_loss,
        "optimizer_step": ckpt.optimizer.step if ckpt.optimizer is not None else None,
        "extra": ckpt.extra,
    }
    arrays = [(f"param/{k}", a) for k, a in ckpt.params.items()]
    if ckpt.optimizer is not None:
        arrays += [(f"adam_m/{k}", a) for k, a in ckpt.optimizer.m.items()]
        arrays += [(f"adam_v/{k}", a) for k, a in ckpt.optimizer.v.items()]
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        _write_array(buf, name, arr)
    payload = buf.getvalue()
    Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 4 or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    r = _Reader(data[:-4])
    r.take(len(CHECKPOINT_MAGIC))
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    if len(data) < 4 or struct.unpack("<I", data[-4:])[0] != zlib.crc32(data[:-4]):
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    (hlen,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}Q")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape)
        arrays[name] = arr.astype(dtype.newbyteorder("="))
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: trailing bytes after arrays")

    def group(prefix):
        return {k[len(prefix) :]: a for k, a in arrays.items() if k.startswith(prefix)}

    optimizer = None
    if header.get("optimizer_step") is not None:
        optimizer = OptimizerState(group("adam_m/"), group("adam_v/"), header["optimizer_step"])
    meta = DatasetMeta(**header["meta"]) if header.get("meta") else None
    stats = NormalizationStats(**header["normalization"]) if header.get("normalization") else None
    hp = HyperParams(**header["hyperparams"])
    params = group("param/")
    check_params({k: Tensor(a) for k, a in params.items()}, hp)
    return Checkpoint(
        hp=hp,
        meta=meta,
        stats=stats,
        params=params,
        best_val_loss=header["best_val_loss"],
        optimizer=optimizer,
        extra=header.get("extra", {}),
        version=version,
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------
@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False

    @property
    def mean_epoch_seconds(self) -> float:
        return float(np.mean([e.seconds for e in self.epochs])) if self.epochs else 0.0


def _batches(samples: Sequence[Sample], size: int):
    for i in range(0, len(samples), size):
        yield collate(samples[i : i + size])


def evaluate_loss(params, samples, hp, meta=None, batch_size: int = 64) -> float:
    """Mean per-sample loss in evaluation mode."""
    total = 0.0
    with nx.no_grad():
        for batch in _batches(samples, batch_size):
            pred = forward(params, batch, hp, meta, training=False)
            total += float(loss_joint_rmse(pred, batch.target).data) * batch.size
    return total / len(samples)


def train_step(params, batch: RegionBatch, hp, state, config, meta=None, rng=None) -> float:
    """One forward/backward/Adam update on a batch; returns the batch loss."""
    zero_grads(params)
    pred = forward(params, batch, hp, meta, training=rng is not None, rng=rng)
    loss = loss_joint_rmse(pred, batch.target)
    value = float(loss.data)
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite training loss at step {state.step + 1}")
    nx.backward(loss)
    adam_step(params, state, config)
    return value


def fit(
    params: dict,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    hp: HyperParams,
    config: TrainConfig,
    meta: Optional[DatasetMeta] = None,
    stats: Optional[NormalizationStats] = None,
    extra: Optional[dict] = None,
) -> tuple[TrainReport, Checkpoint]:
    """Train with per-epoch shuffling and validation-based early stopping.

    ``params`` are updated in place and end holding the best-validation
    weights, which are also returned in the checkpoint.

    Raises:
        DivergenceError: on a non-finite loss or gradient; carries the last
            good (best so far) checkpoint and the partial report.
    """
    if not train_samples or not val_samples:
        raise ValueError("fit needs nonempty training and validation samples")
    check_params(params, hp)
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.Generator(np.random.PCG64(seeds[0]))
    dropout_rng = np.random.Generator(np.random.PCG64(seeds[1]))
    state = OptimizerState.for_params(params)
    report = TrainReport()
    best = snapshot(params)
    best_state = state.copy()
    since_best = 0

    def make_checkpoint():
        return Checkpoint(
            hp=hp,
            meta=meta,
            stats=stats,
            params={k: a.copy() for k, a in best.items()},
            best_val_loss=report.best_val_loss,
            optimizer=best_state.copy(),
            extra=dict(extra or {}),
        )

    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(len(train_samples))
        shuffled = [train_samples[i] for i in order]
        total = 0.0
        try:
            for batch in _batches(shuffled, config.batch_size):
                rng = dropout_rng if hp.dropout_rate > 0 else None
                total += train_step(params, batch, hp, state, config, meta, rng) * batch.size
            val_loss = evaluate_loss(params, val_samples, hp, meta, config.batch_size)
            if not np.isfinite(val_loss):
                raise DivergenceError(f"non-finite validation loss in epoch {epoch}")
        except DivergenceError as exc:
            restore(params, best)
            raise DivergenceError(str(exc), make_checkpoint(), report) from None
        train_loss = total / len(shuffled)
        seconds = time.perf_counter() - start
        report.epochs.append(EpochRecord(epoch, train_loss, val_loss, seconds))
        logger.info(
            "epoch %d train %.6f val %.6f (%.2fs)", epoch, train_loss, val_loss, seconds
        )
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best = snapshot(params)
            best_state = state.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                report.stopped_early = True
                break
    restore(params, best)
    return report, make_checkpoint()
