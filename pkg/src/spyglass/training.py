"""Loss, optimizer, the epoch loop with early stopping, checkpoint I/O.

Training minimizes mean binary cross-entropy with Adam. Validation loss is
the early-stopping monitor and also selects the best checkpoint. Everything
is seeded: the shuffle order comes from (seed, epoch) and each sample's
augmentation stream from (seed, epoch, sample index), so two runs with the
same config produce bitwise-identical checkpoints.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .augment import AugmentPolicy, augment
from .data import decode_image
from .errors import DataFormatError, NumericError
from .model import DetectorModel, forward

PREDICTION_CLAMP = 1e-7
CHECKPOINT_MAGIC = b"SPYGLS01"


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 2e-5
    max_epochs: int = 25
    early_stop_patience: int = 5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    augmentation: AugmentPolicy = field(default_factory=AugmentPolicy)
    pathway_mask: str = "joint"
    fusion_mode: str = "add"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    def write_csv(self, path):
        lines = ["epoch,train_loss,val_loss,val_acc"]
        for i, (tl, vl, va) in enumerate(
            zip(self.train_loss, self.val_loss, self.val_acc), start=1
        ):
            lines.append(f"{i},{tl!r},{vl!r},{va!r}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def bce_loss(predictions, labels):
    """Mean of -[y*ln(p) + (1-y)*ln(1-p)], p clamped to [1e-7, 1-1e-7]."""
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    y = y.astype(predictions.data.dtype)
    if y.shape != predictions.shape:
        raise ValueError(
            f"labels shape {tuple(y.shape)} != predictions shape "
            f"{tuple(predictions.shape)}"
        )
    bad = (y != 0) & (y != 1)
    if np.any(bad):
        raise ValueError(
            f"labels must be 0 or 1, got {y[bad].flat[0]!r}"
        )
    p = ad.clip(predictions, PREDICTION_CLAMP, 1.0 - PREDICTION_CLAMP)
    term = ad.add(
        ad.mul(Tensor(y), ad.log(p)),
        ad.mul(Tensor(1.0 - y), ad.log(1.0 - p)),
    )
    return ad.scale(ad.reduce_mean(term), -1.0)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
        )

    def snapshot(self):
        return AdamState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            t=self.t,
        )


def adam_step(params, grads, state, config):
    """One Adam update over the parameters named in `grads` (in place)."""
    state.t += 1
    t = state.t
    b1, b2 = config.adam_beta1, config.adam_beta2
    lr, eps = config.learning_rate, config.adam_eps
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        p = params[name]
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"non-finite value in parameter {name!r} after update")
    return params, state


# ---------------------------------------------------------------------------
# training loop


class _ImageCache:
    def __init__(self, decode_fn):
        self.decode_fn = decode_fn
        self._store = {}

    def get(self, path):
        img = self._store.get(path)
        if img is None:
            img = self.decode_fn(path)
            self._store[path] = img
        return img


def _split_metrics(model, records, cache, batch_size):
    """(mean bce loss, accuracy at 0.5) over a record list, no augmentation."""
    loss_sum = 0.0
    correct = 0
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        images = [cache.get(r.path) for r in chunk]
        labels = np.array([r.label for r in chunk], dtype=np.float32)
        probs, _ = forward(model, images)
        loss_sum = loss_sum + bce_loss(probs, labels).item() * len(chunk)
        correct += int(np.sum((probs.data >= 0.5) == (labels >= 0.5)))
    return loss_sum / len(records), correct / len(records)


def train(model, records, config, validation_fn=None, decode_fn=decode_image,
          log_fn=None):
    """Optimize `model` on the train split, early-stopping on the val split.

    Per epoch: seeded shuffle, per-sample augmentation (train split only),
    minibatch forward/loss/backward/adam, then validation. Keeps the
    parameters and optimizer state of the best validation loss and restores
    them before returning.

    validation_fn(model, epoch) -> (val_loss, val_acc) replaces the real
    validation pass (test hook). Returns (model, AdamState, TrainHistory).
    """
    train_records = [r for r in records if r.split == "train"]
    val_records = [r for r in records if r.split == "val"]
    if not train_records:
        raise ValueError("train split is empty")
    if not val_records and validation_fn is None:
        raise ValueError("val split is empty")

    cache = _ImageCache(decode_fn)
    state = AdamState.for_params(model.params)
    history = TrainHistory()
    best_loss = np.inf
    best_params = model.parameter_arrays()
    best_state = state.snapshot()
    bad_epochs = 0
    policy = config.augmentation

    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(
            len(train_records)
        )
        loss_sum = 0.0
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            chunk = order[start : start + config.batch_size]
            images = []
            for idx in chunk:
                img = cache.get(train_records[idx].path)
                if policy.transforms:
                    stream = np.random.default_rng(
                        [config.seed, epoch, int(idx)]
                    )
                    img = augment(img, policy, stream)
                images.append(img)
            labels = np.array(
                [train_records[idx].label for idx in chunk], dtype=np.float32
            )
            model.zero_grads()
            with Tape() as tape:
                probs, _ = forward(model, images)
                loss = bce_loss(probs, labels)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch}, batch {bi}"
                )
            backward(loss, tape)
            grads = {
                name: t.grad
                for name, t in model.params.items()
                if t.grad is not None
            }
            adam_step(model.params, grads, state, config)
            loss_sum += loss_value * len(chunk)
        train_loss = loss_sum / len(train_records)

        if validation_fn is not None:
            val_loss, val_acc = validation_fn(model, epoch)
        else:
            val_loss, val_acc = _split_metrics(
                model, val_records, cache, config.batch_size
            )
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")

        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.val_acc.append(val_acc)
        history.stopped_epoch = epoch
        if log_fn is not None:
            log_fn(
                f"epoch {epoch}: train_loss={train_loss:.4f} "
                f"val_loss={val_loss:.4f} val_acc={val_acc:.3f}"
            )

        if val_loss < best_loss:
            best_loss = val_loss
            history.best_epoch = epoch
            best_params = model.parameter_arrays()
            best_state = state.snapshot()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.early_stop_patience:
                break

    model.load_parameters(best_params)
    return model, best_state, history


# ---------------------------------------------------------------------------
# checkpoints
#
# Little-endian layout: 8-byte magic "SPYGLS01", then for each tensor
# (u64 name length, name bytes, u64 rank, u64 dims..., float32 data
# row-major), then CRC32 (u32) of all preceding bytes.


def _serialize_entry(name, arr):
    arr = np.asarray(arr, dtype="<f4")
    name_bytes = name.encode("utf-8")
    parts = [struct.pack("<Q", len(name_bytes)), name_bytes,
             struct.pack("<Q", arr.ndim)]
    for dim in arr.shape:
        parts.append(struct.pack("<Q", dim))
    parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def save_checkpoint(model, state, path):
    """Write model configuration, parameters, and optimizer state."""
    entries = dict(model.config_arrays())
    for name, tensor in model.params.items():
        entries[name] = tensor.data
    if state is not None:
        entries["adam.t"] = np.asarray(float(state.t), dtype=np.float32)
        for name, arr in state.m.items():
            entries[f"adam.m.{name}"] = arr
        for name, arr in state.v.items():
            entries[f"adam.v.{name}"] = arr
    body = CHECKPOINT_MAGIC + b"".join(
        _serialize_entry(name, arr) for name, arr in entries.items()
    )
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def _parse_entries(blob, path):
    entries = {}
    pos = 0
    end = len(blob)
    while pos < end:
        if pos + 8 > end:
            raise DataFormatError(f"{path}: truncated checkpoint entry header")
        (name_len,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        if pos + name_len > end:
            raise DataFormatError(f"{path}: truncated tensor name")
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        if pos + 8 > end:
            raise DataFormatError(f"{path}: truncated rank for {name!r}")
        (rank,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        if rank > 8:
            raise DataFormatError(f"{path}: implausible rank {rank} for {name!r}")
        if pos + 8 * rank > end:
            raise DataFormatError(f"{path}: truncated dims for {name!r}")
        dims = struct.unpack_from(f"<{rank}Q" if rank else "", blob, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        if pos + 4 * count > end:
            raise DataFormatError(f"{path}: truncated data for {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        entries[name] = arr.copy()
    return entries


def load_checkpoint(path, seed=0):
    """Rebuild (DetectorModel, AdamState or None) from a checkpoint file."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(CHECKPOINT_MAGIC) + 4:
        raise DataFormatError(f"{path}: file too short to be a checkpoint")
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataFormatError(
            f"{path}: bad magic {raw[:8]!r}, expected {CHECKPOINT_MAGIC!r}"
        )
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise DataFormatError(f"{path}: CRC32 mismatch, file corrupted")
    entries = _parse_entries(raw[len(CHECKPOINT_MAGIC) : -4], path)

    config_arrays = {k: v for k, v in entries.items() if k.startswith("config.")}
    adam_arrays = {k: v for k, v in entries.items() if k.startswith("adam.")}
    param_arrays = {
        k: v
        for k, v in entries.items()
        if not k.startswith("config.") and not k.startswith("adam.")
    }
    model = DetectorModel.from_config_arrays(config_arrays, seed=seed)
    model.load_parameters(param_arrays)
    state = None
    if "adam.t" in adam_arrays:
        state = AdamState(
            m={
                k[len("adam.m."):]: v
                for k, v in adam_arrays.items()
                if k.startswith("adam.m.")
            },
            v={
                k[len("adam.v."):]: v
                for k, v in adam_arrays.items()
                if k.startswith("adam.v.")
            },
            t=int(round(float(adam_arrays["adam.t"].reshape(-1)[0]))),
        )
    return model, state
