"""Old-model class geometry, elastic boundaries and the AdvBCT objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import tensorio
from .errors import ConfigError, DataError, FormatError, NumericError, ShapeError
from .model import (
    ClassifierHead,
    DiscriminatorHead,
    GrlConfig,
    MlpModel,
    classify_backward,
    classify_forward,
    discriminate_backward,
    discriminate_forward,
    embed_backward,
    embed_forward,
    grl_backward,
)
from .numerics import log_softmax, logistic, softmax

PROB_CLAMP = 1e-12
LOSS_TERMS = ("cls", "adv", "p2s")


@dataclass
class ClassGeometry:
    class_id: int
    center: np.ndarray
    r_max: float
    w_logit: float = 0.0

    @property
    def w(self) -> float:
        return logistic(self.w_logit)


@dataclass
class Geometry:
    """Per-class centers, max radii and boundary logits, stored as arrays.

    ``w_logit`` is a live parameter: the trainer hands it to the optimizer
    under the name ``"w_logit"`` and updates it in place.
    """

    class_ids: np.ndarray
    centers: np.ndarray
    r_max: np.ndarray
    w_logit: np.ndarray
    _index: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        n = len(self.class_ids)
        if self.centers.shape[0] != n or self.r_max.shape != (n,) or self.w_logit.shape != (n,):
            raise ShapeError("geometry arrays disagree on the number of classes")
        self._index = {int(c): i for i, c in enumerate(self.class_ids)}

    def __len__(self) -> int:
        return len(self.class_ids)

    def __getitem__(self, i: int) -> ClassGeometry:
        return ClassGeometry(
            int(self.class_ids[i]), self.centers[i], float(self.r_max[i]), float(self.w_logit[i])
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def w(self) -> np.ndarray:
        return logistic(self.w_logit)

    def rows_for(self, labels) -> np.ndarray:
        """Geometry row per label, -1 for classes the old model never saw."""
        return np.array([self._index.get(int(l), -1) for l in labels], dtype=np.int64)

    @classmethod
    def from_classes(cls, items: Iterable[ClassGeometry]) -> "Geometry":
        items = list(items)
        if not items:
            raise DataError("empty class geometry")
        return cls(
            np.array([g.class_id for g in items]),
            np.stack([np.asarray(g.center, dtype=np.float64) for g in items]),
            np.array([g.r_max for g in items], dtype=np.float64),
            np.array([g.w_logit for g in items], dtype=np.float64),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "class_ids": self.class_ids.astype(np.float64),
            "centers": self.centers,
            "r_max": self.r_max,
            "w_logit": self.w_logit,
        }

    def save(self, path) -> None:
        tensorio.save(path, self.tensors())

    @classmethod
    def load(cls, path) -> "Geometry":
        t = tensorio.load(path)
        missing = {"class_ids", "centers", "r_max", "w_logit"} - set(t)
        if missing:
            raise FormatError(f"geometry file lacks {sorted(missing)}")
        return cls(
            t["class_ids"][:, 0].astype(np.int64),
            t["centers"],
            t["r_max"][:, 0].copy(),
            t["w_logit"][:, 0].copy(),
        )


def compute_class_geometry(old_embeddings: np.ndarray, labels, class_ids=None) -> Geometry:
    """Mean old embedding and max distance to it, per class.

    ``labels`` index rows of ``old_embeddings``; ``class_ids`` optionally maps
    each label value to the class id stored in the geometry (used when the old
    training set was re-indexed).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if old_embeddings.shape[0] != labels.shape[0]:
        raise ShapeError("one label per embedding row is required")
    present = np.unique(labels)
    if present.size == 0:
        raise DataError("empty class set")
    centers, radii = [], []
    for k in present:
        rows = old_embeddings[labels == k]
        center = rows.mean(axis=0)
        diff = rows - center
        radii.append(float(np.sqrt(np.einsum("ij,ij->i", diff, diff)).max()))
        centers.append(center)
    ids = present if class_ids is None else np.asarray(class_ids, dtype=np.int64)[present]
    return Geometry(ids, np.stack(centers), np.array(radii), np.zeros(len(present)))


def triangle_bounds(phi_n_x, phi_o_y, center) -> tuple[float, float]:
    phi_n_x, phi_o_y, center = (np.asarray(v, dtype=np.float64) for v in (phi_n_x, phi_o_y, center))
    if not phi_n_x.shape == phi_o_y.shape == center.shape:
        raise ShapeError("triangle_bounds needs vectors of equal dimension")
    a = float(np.linalg.norm(phi_n_x - center))
    b = float(np.linalg.norm(phi_o_y - center))
    return a - b, a + b


def effective_boundary(r_max, t, w):
    """Elastic radius between ``r_max`` and the threshold ``t``.

    Vectorized over numpy inputs.  Moves from ``r_max`` (w=0) to ``t`` (w=1)
    when ``t < r_max``, and from ``t`` (w=0) to ``r_max`` (w=1) otherwise.
    """
    r_max = np.asarray(r_max, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    out = np.where(
        t < r_max,
        (1.0 - w) * r_max + w * t,
        np.where(t > r_max, w * r_max + (1.0 - w) * t, t),
    )
    return float(out) if out.ndim == 0 else out


def effective_boundary_dw(r_max, t):
    """d r_emax / d w for the case split in :func:`effective_boundary`."""
    r_max = np.asarray(r_max, dtype=np.float64)
    return np.where(t < r_max, t - r_max, np.where(t > r_max, r_max - t, 0.0))


def p2s_loss(new_embeddings: np.ndarray, labels, geometry: Geometry, t: float):
    """Summed hinge of distance-to-old-center beyond the elastic boundary.

    Samples whose class has no geometry contribute nothing.  Returns
    ``(loss, grad wrt embeddings, grad wrt geometry.w_logit)``.
    """
    z = np.asarray(new_embeddings, dtype=np.float64)
    if z.shape[1] != geometry.centers.shape[1]:
        raise ShapeError("embedding dim differs from geometry dim")
    rows = geometry.rows_for(labels)
    grad_z = np.zeros_like(z)
    grad_w = np.zeros(len(geometry))
    known = rows >= 0
    if not np.any(known):
        return 0.0, grad_z, grad_w
    k = rows[known]
    diff = z[known] - geometry.centers[k]
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    w = geometry.w[k]
    r_emax = effective_boundary(geometry.r_max[k], t, w)
    excess = dist - r_emax
    active = excess > 0
    loss = float(excess[active].sum()) if np.any(active) else 0.0
    g_known = np.zeros_like(diff)
    g_known[active] = diff[active] / dist[active, None]
    grad_z[known] = g_known
    dr_dlogit = effective_boundary_dw(geometry.r_max[k], t) * w * (1.0 - w)
    np.add.at(grad_w, k[active], -dr_dlogit[active])
    return loss, grad_z, grad_w


def cls_loss(logits: np.ndarray, labels):
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError("one label per logits row is required")
    if np.any(labels < 0) or np.any(labels >= c):
        raise DataError(f"label outside [0, {c})")
    logp = log_softmax(logits)
    loss = -float(logp[np.arange(n), labels].sum()) / n
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def adv_loss(q, origin):
    """Binary cross-entropy of discriminator outputs against origin labels (old=0, new=1)."""
    q = np.asarray(q, dtype=np.float64)
    ell = np.asarray(origin, dtype=np.float64)
    if q.shape != ell.shape:
        raise ShapeError("one origin label per probability is required")
    qc = np.clip(q, PROB_CLAMP, 1.0 - PROB_CLAMP)
    if not np.all((qc > 0) & (qc < 1)):
        raise NumericError("discriminator probabilities outside (0, 1)")
    n = q.size
    loss = -float(np.sum(ell * np.log(qc) + (1.0 - ell) * np.log1p(-qc))) / n
    grad = -(ell / qc - (1.0 - ell) / (1.0 - qc)) / n
    grad = np.where((q == qc), grad, 0.0)
    return loss, grad


@dataclass(frozen=True)
class CompatLossConfig:
    lam: float = 1.0
    gamma0: float = 1.0
    horizon: int | None = None
    t: float = 0.4
    grl_beta: float = 1.0

    def __post_init__(self):
        for name in ("lam", "gamma0", "t", "grl_beta"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and non-negative, got {v}")
        if self.horizon is not None and self.horizon < 0:
            raise ConfigError("gamma decay horizon must be non-negative")


def gamma_at(epoch: int, cfg: CompatLossConfig, horizon: int | None = None) -> float:
    """Linearly decayed adversarial weight; ``horizon`` falls back to ``cfg.horizon``."""
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    h = cfg.horizon if horizon is None else horizon
    if h is None:
        raise ConfigError("gamma decay horizon is not set")
    if h == 0:
        return cfg.gamma0 if epoch == 0 else 0.0
    return cfg.gamma0 * max(0.0, 1.0 - epoch / h)


def flags_name(flags) -> str:
    """Canonical ``cls+adv+p2s``-style spelling of a loss-term subset."""
    flags = parse_flags(flags)
    return "+".join(t for t in LOSS_TERMS if t in flags)


def parse_flags(flags) -> frozenset[str]:
    if isinstance(flags, str):
        flags = [f for f in flags.replace(",", "+").split("+") if f]
    flags = frozenset(flags)
    unknown = flags - set(LOSS_TERMS)
    if unknown:
        raise ConfigError(f"unknown loss terms {sorted(unknown)}")
    if not flags:
        raise ConfigError("at least one loss term must be enabled")
    return flags


@dataclass
class CompatModels:
    new: MlpModel
    classifier: ClassifierHead
    discriminator: DiscriminatorHead
    old: MlpModel | None = None

    def params(self, geometry: Geometry | None = None) -> dict[str, np.ndarray]:
        out = dict(self.new.params())
        out.update(self.classifier.params())
        out.update(self.discriminator.params())
        if geometry is not None:
            out["w_logit"] = geometry.w_logit
        return out


@dataclass
class LossTerms:
    cls: float
    adv: float
    p2s: float
    gamma: float
    total: float


def total_loss(
    x: np.ndarray,
    labels,
    models: CompatModels,
    geometry: Geometry | None,
    cfg: CompatLossConfig,
    gamma: float,
    flags,
    old_z: np.ndarray | None = None,
    class_ids=None,
) -> tuple[LossTerms, dict[str, np.ndarray]]:
    """Loss value and gradients of ``cls + lam * p2s + gamma * adv``.

    The adversarial gradient reaching the embedding network passes through
    the GRL (scaled by ``-grl_beta``); the discriminator gets it unreversed.
    ``old_z`` are frozen old-model embeddings of the same rows; computed from
    ``models.old`` when omitted.  ``class_ids`` are the geometry ids of the
    rows when they differ from the classifier ``labels``.
    """
    flags = parse_flags(flags)
    labels = np.asarray(labels, dtype=np.int64)
    z, tape = embed_forward(models.new, x)
    grad_z = np.zeros_like(z)
    grads: dict[str, np.ndarray] = {}
    l_cls = l_adv = l_p2s = 0.0
    weighted = []

    if "cls" in flags:
        logits = classify_forward(models.classifier, z)
        l_cls, g_logits = cls_loss(logits, labels)
        g_cls, g_z = classify_backward(models.classifier, z, g_logits)
        grads.update(g_cls)
        grad_z += g_z
        weighted.append(l_cls)

    if "p2s" in flags:
        if geometry is None:
            raise ConfigError("p2s term enabled without class geometry")
        l_p2s, g_z, g_w = p2s_loss(z, labels if class_ids is None else class_ids, geometry, cfg.t)
        grad_z += cfg.lam * g_z
        grads["w_logit"] = cfg.lam * g_w
        weighted.append(cfg.lam * l_p2s)

    if "adv" in flags:
        if old_z is None:
            if models.old is None:
                raise ConfigError("adv term enabled without an old model")
            old_z = embed_forward(models.old, x)[0]
        both = np.vstack([old_z, z])
        origin = np.concatenate([np.zeros(len(old_z)), np.ones(len(z))])
        q, dtape = discriminate_forward(models.discriminator, both)
        l_adv, g_q = adv_loss(q, origin)
        g_disc, g_in = discriminate_backward(models.discriminator, dtape, gamma * g_q)
        grads.update(g_disc)
        grad_z += grl_backward(g_in[len(old_z):], GrlConfig(cfg.grl_beta))
        weighted.append(gamma * l_adv)

    g_embed, _ = embed_backward(models.new, tape, grad_z)
    grads.update(g_embed)
    total = weighted[0]
    for term in weighted[1:]:
        total += term
    return LossTerms(l_cls, l_adv, l_p2s, gamma, float(total)), grads
