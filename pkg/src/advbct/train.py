"""Old-model training and compatible new-model training."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .compat import (
    CompatLossConfig,
    CompatModels,
    Geometry,
    compute_class_geometry,
    gamma_at,
    parse_flags,
    total_loss,
)
from .data import LabeledDataset
from .errors import ConfigError, NumericError, ShapeError
from .model import (
    SGD,
    Checkpoint,
    ClassifierHead,
    DiscriminatorHead,
    MlpModel,
    classify_forward,
    discriminate_forward,
    embed,
)
from .numerics import seeded_rng

log = logging.getLogger(__name__)

OLD_HIDDEN = (64,)
ENLARGED_HIDDEN = (128, 128)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0
    flags: frozenset = frozenset({"cls", "adv", "p2s"})
    hidden: tuple = OLD_HIDDEN
    d_emb: int = 16

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ConfigError("lr must be finite and non-negative")
        if self.d_emb < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("layer widths must be positive")
        object.__setattr__(self, "flags", parse_flags(self.flags))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


def cosine_lr(base: float, step: int, total_steps: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class EpochRecord:
    epoch: int
    cls: float
    adv: float
    p2s: float
    gamma: float
    total: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    curve: list[EpochRecord]
    train_accuracy: float
    geometry: Geometry | None = None
    lam: float = 1.0


def loss_curve_csv(curve: list[EpochRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "L_cls", "L_adv", "L_p2s", "gamma", "total"])
    for r in curve:
        writer.writerow([r.epoch] + [repr(float(v)) for v in (r.cls, r.adv, r.p2s, r.gamma, r.total)])
    return buf.getvalue()


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        rows = perm[start : start + batch_size]
        if len(rows) >= 2:
            yield rows


def _fit(
    ds: LabeledDataset,
    cfg: TrainConfig,
    ccfg: CompatLossConfig,
    role: str,
    old: MlpModel | None = None,
    geometry: Geometry | None = None,
) -> TrainResult:
    ds.validate()
    init_rng = seeded_rng(cfg.seed, f"init/{role}")
    dims = [ds.dim, *cfg.hidden, cfg.d_emb]
    models = CompatModels(
        new=MlpModel.init(dims, init_rng),
        classifier=ClassifierHead.init(ds.class_count, cfg.d_emb, init_rng),
        discriminator=DiscriminatorHead.init(cfg.d_emb, init_rng),
        old=old,
    )
    uses_adv = "adv" in cfg.flags
    uses_p2s = "p2s" in cfg.flags
    if uses_adv and old is None:
        raise ConfigError("the adversarial term needs a frozen old model")
    if uses_p2s and geometry is None:
        raise ConfigError("the p2s term needs class geometry")
    if old is not None and old.d_emb != cfg.d_emb:
        raise ShapeError(f"old embedding dim {old.d_emb} != new embedding dim {cfg.d_emb}")
    if geometry is not None:
        geometry = Geometry(
            geometry.class_ids.copy(), geometry.centers.copy(), geometry.r_max.copy(), geometry.w_logit.copy()
        )
    old_z = embed(old, ds.features) if uses_adv else None
    class_ids = ds.source_labels

    params = models.params(geometry if uses_p2s else None)
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    shuffle_rng = seeded_rng(cfg.seed, f"shuffle/{role}")
    horizon = cfg.epochs if ccfg.horizon is None else ccfg.horizon
    steps_per_epoch = sum(1 for s in range(0, len(ds), cfg.batch_size) if len(ds) - s >= 2)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    curve = []
    for epoch in range(cfg.epochs):
        gamma = gamma_at(epoch, ccfg, horizon) if uses_adv else 0.0
        sums = np.zeros(4)
        n_batches = 0
        for rows in _batches(len(ds), cfg.batch_size, shuffle_rng):
            terms, grads = total_loss(
                ds.features[rows],
                ds.labels[rows],
                models,
                geometry,
                ccfg,
                gamma,
                cfg.flags,
                old_z=None if old_z is None else old_z[rows],
                class_ids=class_ids[rows],
            )
            if not math.isfinite(terms.total):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            opt.step(grads, cosine_lr(cfg.lr, step, total_steps))
            step += 1
            sums += (terms.cls, terms.adv, terms.p2s, terms.total)
            n_batches += 1
        mean = sums / n_batches
        curve.append(EpochRecord(epoch, mean[0], mean[1], mean[2], gamma, mean[3]))
        log.debug("%s epoch %d: %s", role, epoch, curve[-1])

    logits = classify_forward(models.classifier, embed(models.new, ds.features))
    acc = float(np.mean(np.argmax(logits, axis=1) == ds.labels))
    ckpt = Checkpoint(models.new, models.classifier, models.discriminator if uses_adv else None)
    return TrainResult(ckpt, curve, acc, geometry if uses_p2s else None, ccfg.lam)


def train_old(old_train: LabeledDataset, cfg: TrainConfig) -> TrainResult:
    """Classification-only training of the old model; geometry is attached."""
    cfg = replace(cfg, flags=frozenset({"cls"}))
    result = _fit(old_train, cfg, CompatLossConfig(), "old")
    result.geometry = old_geometry(result.checkpoint.embed, old_train)
    return result


def old_geometry(old_model: MlpModel, old_train: LabeledDataset) -> Geometry:
    return compute_class_geometry(
        embed(old_model, old_train.features), old_train.labels, old_train.source_classes
    )


def train_new_compatible(
    new_train: LabeledDataset,
    old_checkpoint: Checkpoint | None,
    cfg: TrainConfig,
    ccfg: CompatLossConfig,
    geometry: Geometry | None = None,
) -> TrainResult:
    """Train the new model under the enabled subset of cls / adv / p2s.

    With only ``cls`` enabled no old model is needed and the result is the
    independent model trained without compatibility.  The old model is never
    modified.  ``geometry`` defaults to nothing; pass the old model's geometry
    whenever ``p2s`` is on.
    """
    old = None if old_checkpoint is None else old_checkpoint.embed
    return _fit(new_train, cfg, ccfg, "new", old, geometry)


def discriminator_accuracy(disc: DiscriminatorHead, old_z: np.ndarray, new_z: np.ndarray) -> float:
    """Fraction of embeddings whose origin (old=0 / new=1) the discriminator gets right."""
    q_old, _ = discriminate_forward(disc, old_z)
    q_new, _ = discriminate_forward(disc, new_z)
    correct = np.sum(q_old < 0.5) + np.sum(q_new >= 0.5)
    return float(correct) / (len(old_z) + len(new_z))
