"""Adam optimization of the segmentation network, checkpoint
serialization and per-epoch reporting.

Checkpoint layout (little-endian): magic ``CPNT``, u32 format version,
u32-length-prefixed metadata block (``key=value`` lines), u32 tensor
count, then per-tensor records sorted by name: u32 name length, name
bytes, u32 rank, u32 dims, raw float32 values. Parameters and batch-norm
running statistics are stored; optimizer state is not.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ImageSample, augment, draw_augment_params, resize_bilinear, resize_nearest
from .metrics import ConfusionCounts, EvalReport, accumulate_confusion, batch_jaccard_loss, binarize, compute_ber
from .model import CpnetModel, ModelConfig, build
from .tensor import Tensor, no_grad

CHECKPOINT_MAGIC = b"CPNT"
CHECKPOINT_VERSION = 1


def derive_seed(*keys: int) -> int:
    """Stable 64-bit stream seed from a tuple of integers."""
    a, b = np.random.SeedSequence(entropy=list(keys)).generate_state(2)
    return (int(a) << 32) | int(b)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """First/second-moment adaptive steps with bias correction."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                raise RuntimeError(f"missing gradient for parameter {name!r}")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    global_seed: int = 0
    lr: float = 1e-4
    input_size: int = 192
    checkpoint_path: str | None = None
    train_manifest: str | None = None
    val_manifest: str | None = None
    augment: bool = True

    def __post_init__(self):
        if self.input_size % 32:
            raise ValueError(f"input_size must be divisible by 32, got {self.input_size}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_ber: float | None


@dataclass
class TrainResult:
    history: list[EpochStats]
    best_epoch: int | None
    best_val_ber: float | None


def _prepare_batch(samples: list[ImageSample], size: int) -> tuple[Tensor, Tensor]:
    xs = [resize_bilinear(s.rgb, size, size) for s in samples]
    ys = [resize_nearest(s.mask, size, size).astype(np.float32) for s in samples]
    return Tensor(np.stack(xs)), Tensor(np.stack(ys))


def evaluate_ber(model: CpnetModel, samples: list[ImageSample], input_size: int,
                 threshold: float = 0.5, chunk: int = 8) -> EvalReport:
    """Dataset-level BER of single-scale eval-mode predictions."""
    model.eval()
    counts = ConfusionCounts()
    with no_grad():
        for lo in range(0, len(samples), chunk):
            part = samples[lo : lo + chunk]
            x = Tensor(np.stack([resize_bilinear(s.rgb, input_size, input_size) for s in part]))
            probs = model.forward(x).data
            for prob, s in zip(probs, part):
                pred = binarize(prob, threshold)
                truth = resize_nearest(s.mask, input_size, input_size)
                counts = accumulate_confusion(pred, truth, counts)
    return compute_ber(counts)


def train(model: CpnetModel, train_samples: list[ImageSample],
          val_samples: list[ImageSample], config: TrainConfig,
          log=None, stop_when=None) -> TrainResult:
    """Run the full optimization recipe: seeded shuffling, geometric
    augmentation, soft-Jaccard loss averaged over the batch, Adam steps,
    and per-epoch validation with best-BER checkpointing.

    ``stop_when`` (optional) receives each EpochStats and may return True
    to end training early. The returned model state is the final epoch's;
    the best-validation weights go to ``config.checkpoint_path`` when set.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    params = model.named_parameters()
    opt = Adam(params, lr=config.lr)
    size = config.input_size
    history: list[EpochStats] = []
    best_ber = math.inf
    best_epoch: int | None = None

    for epoch in range(1, config.epochs + 1):
        model.train()
        order = np.random.default_rng(derive_seed(config.global_seed, 0, epoch)).permutation(len(train_samples))
        losses = []
        for batch_idx in range(0, len(order), config.batch_size):
            chosen = order[batch_idx : batch_idx + config.batch_size]
            batch = []
            for sample_idx in chosen:
                s = train_samples[sample_idx]
                if config.augment:
                    s = augment(s, draw_augment_params(
                        derive_seed(config.global_seed, 1, epoch, int(sample_idx))))
                batch.append(s)
            x, y_true = _prepare_batch(batch, size)
            y = model.forward(x)
            loss = batch_jaccard_loss(y_true, y)
            value = float(loss.data)
            if not math.isfinite(value):
                raise RuntimeError(
                    f"non-finite loss {value} at epoch {epoch}, batch {batch_idx // config.batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
        train_loss = float(np.mean(losses))

        val_ber = None
        if val_samples:
            val_ber = evaluate_ber(model, val_samples, size).ber
        history.append(EpochStats(epoch=epoch, train_loss=train_loss, val_ber=val_ber))
        if log is not None:
            log(history[-1])

        if val_ber is not None and val_ber < best_ber:
            best_ber = val_ber
            best_epoch = epoch
            if config.checkpoint_path:
                save_checkpoint(model, config.checkpoint_path, epoch=epoch, seed=config.global_seed)
        if stop_when is not None and stop_when(history[-1]):
            break

    if best_epoch is None and config.checkpoint_path:
        save_checkpoint(model, config.checkpoint_path, epoch=config.epochs, seed=config.global_seed)
    return TrainResult(history=history,
                       best_epoch=best_epoch,
                       best_val_ber=None if best_epoch is None else best_ber)


def write_history_csv(history: list[EpochStats], path) -> None:
    lines = ["epoch,train_loss,val_ber"]
    for row in history:
        ber = "" if row.val_ber is None else repr(row.val_ber)
        lines.append(f"{row.epoch},{repr(row.train_loss)},{ber}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _model_tensors(model: CpnetModel) -> dict[str, np.ndarray]:
    tensors = {name: p.data for name, p in model.named_parameters().items()}
    tensors.update(model.named_buffers())
    return tensors


def save_checkpoint(model: CpnetModel, path, *, epoch: int = 0, seed: int = 0) -> None:
    cfg = model.config
    meta_lines = [
        f"base_width={cfg.base_width}",
        f"dropout_rate={repr(cfg.dropout_rate)}",
        f"epoch={epoch}",
        f"input_channels={cfg.input_channels}",
        f"seed={seed}",
    ]
    meta = ("\n".join(meta_lines) + "\n").encode("utf-8")
    tensors = _model_tensors(model)
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<I", len(meta)), meta, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValueError(f"{self.path}: truncated checkpoint file")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, config: ModelConfig | None = None) -> tuple[CpnetModel, dict]:
    """Rebuild a model from a checkpoint.

    When ``config`` is given the stored tensors are validated against
    that architecture instead of the one recorded in the file.
    Returns the model and the metadata dict (epoch, seed, ...).
    """
    blob = Path(path).read_bytes()
    r = _Reader(blob, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta: dict[str, float | int] = {}
    for line in r.take(r.u32()).decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        meta[key] = float(value) if "." in value or "e" in value else int(value)

    stored: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n_vals = int(np.prod(dims)) if rank else 1
        stored[name] = np.frombuffer(r.take(4 * n_vals), dtype="<f4").reshape(dims)

    if config is None:
        config = ModelConfig(base_width=int(meta["base_width"]),
                             input_channels=int(meta.get("input_channels", 3)),
                             dropout_rate=float(meta.get("dropout_rate", 0.15)))
    model = build(config, seed=0)
    expected = _model_tensors(model)
    for name in sorted(set(stored) | set(expected)):
        if name not in stored:
            raise ValueError(f"{path}: tensor {name!r} missing from checkpoint")
        if name not in expected:
            raise ValueError(f"{path}: unexpected tensor {name!r} in checkpoint")
        if stored[name].shape != expected[name].shape:
            raise ValueError(
                f"{path}: shape mismatch for tensor {name!r}: "
                f"checkpoint has {stored[name].shape}, model expects {expected[name].shape}")
    params = model.named_parameters()
    buffers = model.named_buffers()
    for name, arr in stored.items():
        if name in params:
            params[name].data[...] = arr
        else:
            buffers[name][...] = arr
    model.eval()
    return model, meta
