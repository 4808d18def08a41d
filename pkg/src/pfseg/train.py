"""Training loop, fine-tuning between variants, and evaluation.

Training runs in two phases: random crops (padded so the pooling stack
divides evenly) and then full-size frames at a reduced learning rate.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from pfseg.dataset import VOID, ClassTable, LabeledFramePair, default_class_table, pad_to_multiple, random_crop_pair
from pfseg.metrics import ConfusionMatrix, MetricsReport
from pfseg.models import FUSION_INITS, Model, ModelSpec, build_model, forward, init_fusion_identity
from pfseg.optim import sgd_step
from pfseg.tensor import Tape, Tensor, softmax_cross_entropy

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 4
    steps_phase1: int = 0
    steps_phase2: int = 0
    phase2_lr_scale: float = 0.1
    clip_norm: float = 0.0
    seed: int = 0
    eval_every: int = 0
    prior_offset: int = 30
    crop_h: int = 227
    crop_w: int = 227
    pad_h: int = 240
    pad_w: int = 240

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("steps_phase1", "steps_phase2", "eval_every", "prior_offset", "crop_h", "crop_w", "pad_h", "pad_w"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.clip_norm < 0:
            raise ValueError("momentum, weight_decay and clip_norm must be >= 0")
        if self.pad_h < self.crop_h or self.pad_w < self.crop_w:
            raise ValueError("pad size must be at least the crop size")
        if self.pad_h % 16 or self.pad_w % 16:
            raise ValueError("pad size must be divisible by 16")

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    """Everything needed to resume: optimizer velocity, step counter, RNG."""

    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    rng_state: Optional[dict] = None


@dataclass
class TrainingLog:
    rows: List[Tuple[int, str, float, float]] = field(default_factory=list)
    state: TrainState = field(default_factory=TrainState)

    @property
    def losses(self) -> List[float]:
        return [r[2] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("step", "phase", "loss", "lr"))
        for step, phase, loss, lr in self.rows:
            w.writerow((step, phase, repr(float(loss)), repr(float(lr))))
        return buf.getvalue()


def stack_batch(items: Sequence[LabeledFramePair], dtype=np.float32):
    prior = Tensor.wrap(np.stack([it.prior for it in items]).astype(dtype, copy=False))
    current = Tensor.wrap(np.stack([it.current for it in items]).astype(dtype, copy=False))
    labels = np.stack([it.labels for it in items]).astype(np.int64)
    return prior, current, labels


def grads_by_name(model: Model, grads) -> Dict[str, np.ndarray]:
    return {name: grads[t] for name, t in model.params.items() if t in grads}


def loss_and_grads(model: Model, items: Sequence[LabeledFramePair]):
    prior, current, labels = stack_batch(items, model.dtype)
    with Tape() as tape:
        logits = forward(model, prior if model.spec.uses_prior else None, current)
        loss = softmax_cross_entropy(logits, labels, VOID)
    return loss.item(), grads_by_name(model, tape.backward(loss))


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale all gradients in place so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches from per-epoch permutations."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size) if n >= batch_size else [0]:
            yield order[i : i + batch_size]


def train(
    model: Model,
    dataset: Sequence[LabeledFramePair],
    config: TrainConfig,
    state: Optional[TrainState] = None,
    eval_set: Optional[Sequence[LabeledFramePair]] = None,
    table: Optional[ClassTable] = None,
) -> Tuple[Model, TrainingLog]:
    """Optimise ``model`` in place; returns it with a per-step log.

    Everything random (batch order, crop windows) comes from one generator
    seeded by ``config.seed``, so a serial run is bitwise reproducible.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    state = state or TrainState()
    rng = np.random.default_rng(config.seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    out = TrainingLog(state=state)
    n = len(dataset)
    batches = _batches(n, min(config.batch_size, n), rng)
    phases = (("crop", config.steps_phase1, config.lr), ("full", config.steps_phase2, config.lr * config.phase2_lr_scale))
    for phase, steps, lr in phases:
        for _ in range(steps):
            items = [dataset[int(i)] for i in next(batches)]
            if phase == "crop":
                items = [
                    random_crop_pair(it, (config.crop_h, config.crop_w), rng, (config.pad_h, config.pad_w))
                    for it in items
                ]
            else:
                items = [pad_to_multiple(it) for it in items]
            loss, grads = loss_and_grads(model, items)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss} at step {state.step} ({phase} phase)")
            if config.clip_norm > 0:
                clip_grad_norm(grads, config.clip_norm)
            sgd_step(model.params, grads, state.velocity, lr, config.momentum, config.weight_decay)
            out.rows.append((state.step, phase, loss, lr))
            state.step += 1
            if config.eval_every and eval_set is not None and state.step % config.eval_every == 0:
                rep = evaluate(model, eval_set, table or default_class_table())
                log.info("step %d loss %.4f global %.4f", state.step, loss, rep.global_accuracy)
    state.rng_state = rng.bit_generator.state
    return model, out


# ---------------------------------------------------------------------------
# fine-tuning


def finetune_from(source: Model, target_spec: ModelSpec, seed: int = 0, fusion_init: str = "random"):
    """Build ``target_spec`` and copy every parameter ``source`` can supply.

    Returns ``(model, copied, fresh)``.  A stacked-prior first layer taking
    weights from a 3-channel model copies them onto the current-frame channels
    and zeroes the prior channels, so the initial output ignores the prior.
    Fusion modules absent from ``source`` are drawn at random, or with
    ``fusion_init="identity"`` start as a near pass-through of the image
    features (see :func:`pfseg.models.init_fusion_identity`).
    """
    if fusion_init not in FUSION_INITS:
        raise ValueError(f"fusion_init must be one of {FUSION_INITS}, got {fusion_init!r}")
    model = build_model(target_spec, seed, source.dtype)
    copied, fresh = [], []
    for name, t in model.params.items():
        src = source.params.get(name)
        if src is None:
            fresh.append(name)
            continue
        if src.shape == t.shape:
            t.data[...] = src.data
        elif name == "enc1.weight" and t.shape[1] == 2 * src.shape[1] and t.shape[0] == src.shape[0]:
            c = src.shape[1]
            t.data[:, :c] = 0
            t.data[:, c:] = src.data
        else:
            raise ValueError(f"shape conflict for {name!r}: checkpoint {src.shape} vs target {t.shape}")
        copied.append(name)
    if fusion_init == "identity":
        for site in sorted({n.split(".")[0] for n in fresh if n.startswith("fusion")}):
            init_fusion_identity(model, site)
    return model, copied, fresh


# ---------------------------------------------------------------------------
# evaluation


def predict(model: Model, items: Sequence[LabeledFramePair]) -> List[np.ndarray]:
    """Arg-max label maps, padding each batch to a multiple of 16 and trimming back."""
    padded = [pad_to_multiple(it) for it in items]
    prior, current, _ = stack_batch(padded, model.dtype)
    logits = forward(model, prior if model.spec.uses_prior else None, current).data
    out = []
    for it, lg in zip(items, logits):
        h, w = it.size
        out.append(np.argmax(lg[:, :h, :w], axis=0).astype(np.int64))
    return out


def evaluate(
    model: Model, dataset: Sequence[LabeledFramePair], table: Optional[ClassTable] = None, batch_size: int = 8
) -> MetricsReport:
    """Confusion-matrix metrics of ``model`` over ``dataset`` (default class table if none given)."""
    table = table or default_class_table()
    if model.spec.num_classes != len(table):
        raise ValueError(f"classifier has {model.spec.num_classes} outputs but the class table has {len(table)} classes")
    cm = ConfusionMatrix(len(table))
    batch: List[LabeledFramePair] = []

    def flush():
        for it, pred in zip(batch, predict(model, batch)):
            cm.update(pred, it.labels)
        batch.clear()

    for it in dataset:
        if batch and it.size != batch[0].size:
            flush()
        batch.append(it)
        if len(batch) == batch_size:
            flush()
    if batch:
        flush()
    return MetricsReport(cm, table.names, table.groups())
