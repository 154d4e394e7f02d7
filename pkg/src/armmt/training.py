"""Joint listwise-conversion + pointwise-click objective and AdaGrad training.

The main loss is the summed cross-entropy between the one-hot conversion
labels and the listwise softmax scores (no 1/N factor); the auxiliary loss is
the per-item mean binary cross-entropy of the click head.  The asymmetry
(sum vs mean) is deliberate and covered by tests.  Total = main + lambda*aux;
only the ``full`` variant trains with a nonzero lambda.

Checkpoints are self-contained: magic bytes, a structured JSON header (config
echo, manifest of names/shapes/offsets, step counter), then a raw
little-endian float64 payload holding every parameter, its AdaGrad
accumulator, and the frozen image table.  Roundtrips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, DatasetError, DatasetMeta, GeneratorConfig, SessionExample
from .model import BatchTrace, ModelConfig, ModelParams, forward_batch
from .params import ParamStore
from .tensor import Parameter, ShapeError, Tensor

CHECKPOINT_MAGIC = b"ARMMT1"
CHECKPOINT_VERSION = 1
LOG_FLOOR = 1e-12


class NumericError(RuntimeError):
    """Training produced a non-finite loss; aborted."""


class CheckpointError(ValueError):
    """Base class for unreadable checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class PayloadSizeError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.07
    epochs: int = 20
    batch_size: int = 128
    lam: float = 1.0
    adagrad_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("lr and batch_size must be positive, epochs non-negative")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.adagrad_eps <= 0:
            raise ValueError("adagrad_eps must be positive")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _check_one_hot(y: np.ndarray) -> None:
    if y.ndim != 1 or not np.all((y == 0) | (y == 1)) or int(y.sum()) != 1:
        raise ValueError(f"conversion labels must be one-hot, got {y.tolist()}")


def main_loss(y, y_hat, normalize: bool = False) -> Tensor:
    """Listwise cross-entropy -sum(y log y_hat); summed, not averaged.

    ``normalize=True`` switches to the 1/N mean form for sensitivity checks.
    """
    y = np.asarray(y, dtype=np.float64)
    _check_one_hot(y)
    y_hat = T.as_tensor(y_hat)
    ce = T.scale(T.sum_all(T.mul(Tensor(y), T.safe_log(y_hat, LOG_FLOOR))), -1.0)
    if normalize:
        ce = ce * (1.0 / y.size)
    return ce


def aux_loss(y_ctr, y_hat_ctr) -> Tensor:
    """Mean binary cross-entropy of the click head over the candidate list."""
    y = np.asarray(y_ctr, dtype=np.float64)
    y_hat_ctr = T.as_tensor(y_hat_ctr)
    d = y_hat_ctr.data
    if np.any(d < 0.0) or np.any(d > 1.0):
        raise ValueError(
            f"click probabilities outside (0, 1): range [{d.min()}, {d.max()}]"
        )
    pos = T.mul(Tensor(y), T.safe_log(y_hat_ctr, LOG_FLOOR))
    neg = T.mul(Tensor(1.0 - y), T.safe_log(1.0 - y_hat_ctr, LOG_FLOOR))
    return T.scale(T.sum_all(pos + neg), -1.0 / y.size)


def total_loss(main, aux, lam: float):
    """Joint objective main + lambda*aux; accepts graph tensors or floats."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if isinstance(main, Tensor) or isinstance(aux, Tensor):
        return T.as_tensor(main) + T.as_tensor(aux) * float(lam)
    return main + lam * aux


def batch_objective(
    trace: BatchTrace, y: np.ndarray, y_ctr: np.ndarray, lam: float
) -> Tensor:
    """Mean over the batch of per-session total losses, in one graph."""
    bsz, n = y.shape
    for row in y:
        _check_one_hot(row)
    main = T.scale(
        T.sum_all(T.mul(Tensor(y), T.safe_log(trace.y_hat, LOG_FLOOR))), -1.0 / bsz
    )
    if lam == 0.0:
        return main
    d = trace.y_hat_ctr.data
    if np.any(d < 0.0) or np.any(d > 1.0):
        raise ValueError("click probabilities outside (0, 1)")
    pos = T.mul(Tensor(y_ctr), T.safe_log(trace.y_hat_ctr, LOG_FLOOR))
    neg = T.mul(Tensor(1.0 - y_ctr), T.safe_log(1.0 - trace.y_hat_ctr, LOG_FLOOR))
    aux = T.scale(T.sum_all(pos + neg), -1.0 / (bsz * n))
    return main + aux * float(lam)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adagrad_step(
    params: Iterable[Parameter], grads: Mapping[str, np.ndarray], config: TrainConfig
) -> None:
    """Per-entry: G += g^2; p -= lr * g / (sqrt(G) + eps).  Missing grads skip."""
    for p in params:
        g = grads.get(p.name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter {p.name!r} shape {p.data.shape}"
            )
        p.accum += g * g
        p.data -= config.lr * g / (np.sqrt(p.accum) + config.adagrad_eps)


def _abort_on_nan(model: ModelParams, context: str) -> None:
    for p in model.store:
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"{context}; first non-finite parameter: {p.name}")
    raise NumericError(f"{context}; all parameters still finite (bad input batch?)")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def train(
    dataset: Dataset | Sequence[SessionExample],
    model: ModelParams,
    config: TrainConfig,
    variant: str | None = None,
) -> tuple["Checkpoint", list[tuple[int, float]]]:
    """Epoch loop with per-epoch reshuffle; returns checkpoint + loss log.

    The gradient for a batch is the mean of per-session total losses; one
    AdaGrad step is applied per batch.  Deterministic for a fixed seed.
    """
    sessions = dataset.sessions if isinstance(dataset, Dataset) else list(dataset)
    if not sessions:
        raise DatasetError("cannot train on an empty dataset")
    if variant is not None and variant != model.variant:
        raise ValueError(f"variant {variant!r} does not match model variant {model.variant!r}")
    config.validate()
    lam = config.lam if model.variant == "full" else 0.0
    rng = np.random.default_rng(config.seed)
    log: list[tuple[int, float]] = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(sessions))
        loss_sum = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = [sessions[i] for i in order[lo : lo + config.batch_size]]
            trace = forward_batch(batch, model)
            y = np.array([s.conversion_labels for s in batch], dtype=np.float64)
            y_ctr = np.array([s.click_labels for s in batch], dtype=np.float64)
            loss = batch_objective(trace, y, y_ctr, lam)
            value = float(loss.data)
            if not np.isfinite(value):
                _abort_on_nan(model, f"non-finite loss at epoch {epoch} step {step}")
            grads = T.backward(loss)
            adagrad_step(model.store, grads, config)
            step += 1
            loss_sum += value * len(batch)
        log.append((epoch, loss_sum / len(sessions)))
    return Checkpoint(model=model, train_config=config, step=step), log


# ---------------------------------------------------------------------------
# checkpoint persistence
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: ModelParams
    train_config: TrainConfig
    step: int


def _meta_dict(meta: DatasetMeta) -> dict:
    cfg = asdict(meta.config)
    cfg["mix"] = list(cfg["mix"])
    return {
        "format_version": meta.format_version,
        "seed": meta.seed,
        "config": cfg,
        "price_log_mean": meta.price_log_mean,
        "price_log_std": meta.price_log_std,
        "sales_log_mean": meta.sales_log_mean,
        "sales_log_std": meta.sales_log_std,
    }


def _meta_from_dict(d: dict) -> DatasetMeta:
    cfg = dict(d["config"])
    cfg["mix"] = tuple(cfg["mix"])
    return DatasetMeta(
        format_version=d["format_version"],
        seed=d["seed"],
        config=GeneratorConfig(**cfg),
        price_log_mean=d["price_log_mean"],
        price_log_std=d["price_log_std"],
        sales_log_mean=d["sales_log_mean"],
        sales_log_std=d["sales_log_std"],
    )


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    model = ckpt.model
    manifest = []
    blocks: list[np.ndarray] = []
    offset = 0

    def push(arr: np.ndarray) -> int:
        nonlocal offset
        blocks.append(arr.reshape(-1))
        start = offset
        offset += arr.size
        return start

    for p in model.store:
        entry = {
            "name": p.name,
            "shape": list(p.data.shape),
            "offset": push(p.data),
            "accum_offset": push(p.accum),
        }
        manifest.append(entry)
    manifest.append(
        {
            "name": "emb/image",
            "shape": list(model.image_table.values.shape),
            "offset": push(model.image_table.values),
            "frozen": True,
        }
    )
    header = {
        "format_version": CHECKPOINT_VERSION,
        "step": ckpt.step,
        "variant": model.variant,
        "model_seed": model.seed,
        "train_config": asdict(ckpt.train_config),
        "model_config": asdict(model.config),
        "meta": _meta_dict(model.meta),
        "manifest": manifest,
        "payload_floats": offset,
    }
    payload = np.concatenate(blocks).astype("<f8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + b"\n")
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        f.write(payload.tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagicError(
            f"bad checkpoint magic {raw[:len(CHECKPOINT_MAGIC)]!r}, expected {CHECKPOINT_MAGIC!r}"
        )
    body = raw[len(CHECKPOINT_MAGIC) + 1 :]
    nl = body.index(b"\n")
    header = json.loads(body[:nl].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"checkpoint format_version {header.get('format_version')} "
            f"!= supported {CHECKPOINT_VERSION}"
        )
    payload_bytes = body[nl + 1 :]
    declared = header["payload_floats"]
    if len(payload_bytes) != declared * 8:
        raise PayloadSizeError(
            f"payload holds {len(payload_bytes) // 8} floats, header declares {declared}"
        )
    payload = np.frombuffer(payload_bytes, dtype="<f8")

    spans = []
    for entry in header["manifest"]:
        size = int(np.prod(entry["shape"]))
        spans.append((entry["offset"], size))
        if not entry.get("frozen"):
            spans.append((entry["accum_offset"], size))
    spans.sort()
    cursor = 0
    for start, size in spans:
        if start != cursor:
            raise PayloadSizeError(
                f"manifest does not tile payload: gap/overlap at float offset {start}"
            )
        cursor += size
    if cursor != declared:
        raise PayloadSizeError(
            f"manifest covers {cursor} floats, header declares {declared}"
        )

    meta = _meta_from_dict(header["meta"])
    model_config = ModelConfig(**header["model_config"])
    by_name = {e["name"]: e for e in header["manifest"]}
    img_entry = by_name["emb/image"]
    image_rows = (
        payload[img_entry["offset"] : img_entry["offset"] + int(np.prod(img_entry["shape"]))]
        .reshape(img_entry["shape"])
        .copy()
    )
    model = ModelParams(
        model_config, meta, header["variant"], header["model_seed"], image_rows
    )
    for p in model.store:
        entry = by_name.get(p.name)
        if entry is None:
            raise PayloadSizeError(f"manifest missing parameter {p.name!r}")
        size = p.data.size
        p.data[...] = payload[entry["offset"] : entry["offset"] + size].reshape(p.data.shape)
        p.accum[...] = payload[
            entry["accum_offset"] : entry["accum_offset"] + size
        ].reshape(p.data.shape)
    return Checkpoint(
        model=model,
        train_config=TrainConfig(**header["train_config"]),
        step=header["step"],
    )
