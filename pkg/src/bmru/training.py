"""Training loop: AdamW, cosine schedule with warm-up, gradient clipping,
timestep-averaged cross-entropy, dropout, annealed state augmentation,
periodic validation and best-checkpoint selection.

The augmentation factor eps follows a hold / linear-decay / zero profile
over training progress; best-checkpoint selection only considers
evaluations taken after eps has reached zero, so saved models always use
the exact cell dynamics.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, NonFiniteError, Tensor, constant
from .backbone import HardwareBackbone, HardwareConfig, majority_vote

__all__ = [
    "TrainConfig",
    "EpsSchedule",
    "Checkpoint",
    "TrainResult",
    "TrainingAbort",
    "AdamW",
    "lr_at",
    "eps_at",
    "ce_loss_over_time",
    "clip_gradients",
    "train",
    "evaluate_accuracy",
    "evaluate_loss",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
    "LOG_HEADER",
]

CHECKPOINT_MAGIC = b"BMRU1"
LOG_HEADER = "iter,loss,val_loss,eps,lr"


@dataclass
class TrainConfig:
    max_iters: int
    lr0: float = 1e-3
    weight_decay: float = 1e-4
    warmup_frac: float = 0.01
    clip_norm: float = 1.0
    batch: int = 64
    eval_every: int = 64
    eval_batches: int = 20
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        for name in ("lr0", "weight_decay", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class EpsSchedule:
    """Hold at 1, decay linearly to 0, then stay at 0 (fractions of training)."""

    hold_frac: float = 0.05
    decay_frac: float = 0.70
    zero_frac: float = 0.25

    def __post_init__(self):
        total = self.hold_frac + self.decay_frac + self.zero_frac
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"schedule fractions must sum to 1, got {total}")
        if min(self.hold_frac, self.decay_frac, self.zero_frac) < 0:
            raise ValueError("schedule fractions must be non-negative")


def eps_at(s: EpsSchedule, frac: float) -> float:
    if not 0.0 <= frac <= 1.0:
        raise ValueError(f"training fraction must lie in [0, 1], got {frac}")
    if frac < s.hold_frac:
        return 1.0
    if frac < s.hold_frac + s.decay_frac:
        return 1.0 - (frac - s.hold_frac) / s.decay_frac
    return 0.0


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Linear ramp to lr0 over the warm-up, then cosine decay to zero."""
    if not 0 <= iteration <= cfg.max_iters:
        raise ValueError("iteration outside [0, max_iters]")
    warmup = max(1, round(cfg.warmup_frac * cfg.max_iters))
    if iteration <= warmup:
        return cfg.lr0 * iteration / warmup
    progress = (iteration - warmup) / (cfg.max_iters - warmup)
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * progress))


def ce_loss_over_time(logits, label) -> float:
    """Mean over timesteps of -log softmax(logits[t])[label] for one sequence."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if arr.ndim != 2:
        raise ad.ShapeError("ce_loss_over_time expects (T, C) logits")
    labels = np.full(arr.shape[0], int(label), dtype=np.int64)
    return ad.cross_entropy_rows(constant(arr), labels).item()


def _ce_flat(logits_flat: Tensor, labels: np.ndarray, t_len: int) -> Tensor:
    # timestep-major rows: row t*B + b belongs to sample b
    tiled = np.tile(np.asarray(labels, dtype=np.int64), t_len)
    return ad.cross_entropy_rows(logits_flat, tiled)


def clip_gradients(grads: dict, clip_norm: float) -> tuple[dict, float]:
    """Global-norm clipping; returns (possibly rescaled grads, pre-clip norm)."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm <= clip_norm or norm == 0.0:
        return grads, norm
    scale = clip_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


class AdamW:
    """Adam with decoupled weight decay: the decay term lr*wd*theta is
    subtracted directly and never enters the moment estimates."""

    def __init__(self, leaves, weight_decay: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.leaves = list(leaves)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.leaves}
        self.v = {name: np.zeros_like(t.data) for name, t in self.leaves}

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, param in self.leaves:
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            adam_term = lr * (mhat / (np.sqrt(vhat) + self.eps))
            decay_term = (lr * self.weight_decay) * param.data
            param.data = param.data - adam_term - decay_term


class TrainingAbort(RuntimeError):
    """Raised when the loss turns non-finite; carries a diagnostic dump path."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class Checkpoint:
    arch: dict
    tensors: dict
    config: dict
    iteration: int
    val_loss: float
    val_accuracy: float
    eps: float

    def metrics(self) -> dict:
        return {"iteration": self.iteration, "val_loss": self.val_loss,
                "val_accuracy": self.val_accuracy, "eps": self.eps}


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list
    log_rows: list


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary tensor container plus a JSON sidecar at <path>.json."""
    names = sorted(ckpt.tensors)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", 1, len(names)))
        for name in names:
            arr = np.ascontiguousarray(ckpt.tensors[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.astype("<f8").tobytes())
    sidecar = {
        "format": "bmru-checkpoint",
        "version": 1,
        "arch": ckpt.arch,
        "config": ckpt.config,
        "metrics": ckpt.metrics(),
        "tensors": names,
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: expected magic {CHECKPOINT_MAGIC!r}, "
                             f"found {magic!r}")
        version, count = struct.unpack("<HI", f.read(6))
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(ndim))
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * n_items), dtype="<f8").reshape(shape)
            tensors[name] = data.copy()
    with open(str(path) + ".json") as f:
        sidecar = json.load(f)
    metrics = sidecar["metrics"]
    return Checkpoint(arch=sidecar["arch"], tensors=tensors, config=sidecar["config"],
                      iteration=metrics["iteration"], val_loss=metrics["val_loss"],
                      val_accuracy=metrics["val_accuracy"], eps=metrics["eps"])


def model_from_checkpoint(ckpt: Checkpoint) -> HardwareBackbone:
    if ckpt.arch.get("backbone") != "hardware":
        raise ValueError(f"cannot rebuild backbone kind {ckpt.arch.get('backbone')!r}")
    cfg = HardwareConfig.from_dict(ckpt.arch["config"])
    return HardwareBackbone.from_arrays(cfg, ckpt.tensors)


def evaluate_loss(model: HardwareBackbone, batches, eps: float = 0.0) -> float:
    total, count = 0.0, 0
    for xb, yb in batches:
        out = model.forward(xb, training=False, eps=eps)
        loss = _ce_flat(out.logits_flat, yb, out.t_len)
        total += loss.item() * len(yb)
        count += len(yb)
    return total / count


def evaluate_accuracy(model: HardwareBackbone, x: np.ndarray, y: np.ndarray,
                      batch: int = 256, **forward_kw) -> float:
    hits = 0
    for start in range(0, x.shape[0], batch):
        xb = x[start : start + batch]
        out = model.forward(xb, training=False, **forward_kw)
        logits = out.logits_array()
        preds = [majority_vote(logits[i]) for i in range(logits.shape[0])]
        hits += int(np.sum(np.asarray(preds) == y[start : start + len(xb)]))
    return hits / x.shape[0]


def _format_row(iteration, loss, val_loss, eps, lr) -> str:
    val = "" if val_loss is None else repr(float(val_loss))
    return f"{iteration},{loss!r},{val},{eps!r},{lr!r}"


def _dump_diagnostics(path_dir, xb, yb, iteration):
    os.makedirs(path_dir, exist_ok=True)
    dump_path = os.path.join(path_dir, f"abort_iter{iteration}.npz")
    np.savez(dump_path, x=xb, y=yb, iteration=iteration)
    return dump_path


def train(model: HardwareBackbone, task, cfg: TrainConfig,
          schedule: EpsSchedule | None = None, log_path=None,
          dump_dir=None) -> TrainResult:
    """Run the full recipe and return the best eps=0 checkpoint.

    The training curve is written as CSV rows (iter, loss, val_loss, eps,
    lr); val_loss is empty except at evaluation iterations.
    """
    if not model.trainable:
        raise ValueError("model has no trainable leaves")
    if schedule is None and model.cfg.cell == "fq-bmru":
        schedule = EpsSchedule()
    if schedule is not None and model.cfg.cell != "fq-bmru":
        raise ValueError("eps schedule applies only to bistable cells")

    leaves = model.leaves()
    optimizer = AdamW(leaves, cfg.weight_decay)
    seedseq = np.random.SeedSequence(cfg.seed)
    data_seed, model_seed, val_seed = seedseq.spawn(3)
    rng_data = np.random.default_rng(data_seed)
    rng_model = np.random.default_rng(model_seed)
    val_batches = task.val_batches(cfg.batch, cfg.eval_batches,
                                   seed=int(val_seed.generate_state(1)[0]))

    log_rows = [LOG_HEADER]
    history = []
    best = None

    for iteration in range(1, cfg.max_iters + 1):
        frac = iteration / cfg.max_iters
        eps = eps_at(schedule, frac) if schedule else 0.0
        lr = lr_at(cfg, iteration)
        xb, yb = task.train_batch(cfg.batch, rng_data)
        try:
            with GradTape() as tape:
                out = model.forward(xb, training=True, eps=eps, rng=rng_model,
                                    dropout_rate=cfg.dropout)
                loss = _ce_flat(out.logits_flat, yb, out.t_len)
                if not np.isfinite(loss.data):
                    raise NonFiniteError("loss is not finite")
                tape.backward(loss)
                grads = {name: tape.grad(t) for name, t in leaves}
        except NonFiniteError as err:
            dump_path = _dump_diagnostics(dump_dir or ".", xb, yb, iteration)
            raise TrainingAbort(
                f"non-finite loss at iteration {iteration}: {err}; "
                f"offending batch dumped to {dump_path}", dump_path) from err

        grads, _ = clip_gradients(grads, cfg.clip_norm)
        optimizer.step(grads, lr)

        val_loss = None
        if iteration % cfg.eval_every == 0 or iteration == cfg.max_iters:
            val_loss = evaluate_loss(model, val_batches, eps=eps)
            val_acc = _val_accuracy(model, val_batches, eps=eps)
            history.append({"iteration": iteration, "loss": loss.item(),
                            "val_loss": val_loss, "val_accuracy": val_acc,
                            "eps": eps, "lr": lr})
            if eps == 0.0 and (best is None or val_loss < best["val_loss"]):
                best = {"tensors": model.to_arrays(), "iteration": iteration,
                        "val_loss": val_loss, "val_accuracy": val_acc}
        log_rows.append(_format_row(iteration, loss.item(), val_loss, eps, lr))

    if best is None:
        raise TrainingAbort(
            "no eps=0 evaluation happened; increase max_iters or shrink eval_every")

    if log_path is not None:
        with open(log_path, "w") as f:
            f.write("\n".join(log_rows) + "\n")

    checkpoint = Checkpoint(
        arch={"backbone": "hardware", "config": model.cfg.to_dict(), "task": task.name},
        tensors=best["tensors"],
        config=asdict(cfg),
        iteration=best["iteration"],
        val_loss=best["val_loss"],
        val_accuracy=best["val_accuracy"],
        eps=0.0,
    )
    return TrainResult(checkpoint, history, log_rows)


def _val_accuracy(model, val_batches, eps: float) -> float:
    hits, count = 0, 0
    for xb, yb in val_batches:
        out = model.forward(xb, training=False, eps=eps)
        logits = out.logits_array()
        preds = np.array([majority_vote(logits[i]) for i in range(len(yb))])
        hits += int(np.sum(preds == yb))
        count += len(yb)
    return hits / count
