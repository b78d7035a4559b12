"""MLP embedding network, classifier/discriminator heads, GRL and SGD.

Every forward returns a tape; the matching ``*_backward`` turns an upstream
gradient into parameter gradients (and the gradient w.r.t. the input when the
caller needs to keep propagating).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .errors import ConfigError, DegenerateVectorError, FormatError, ShapeError
from .numerics import EPS_NORM, check_finite, logistic


def glorot_uniform(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_out, d_in))


@dataclass
class MlpModel:
    """Affine layers with ReLU between them; output rows are L2-normalized."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} input dim does not chain")

    @classmethod
    def init(cls, dims: list[int], rng: np.random.Generator) -> "MlpModel":
        """``dims = [d_in, hidden..., d_emb]``."""
        if len(dims) < 2:
            raise ConfigError("an MLP needs at least input and output dims")
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            weights.append(glorot_uniform(rng, d_out, d_in))
            biases.append(np.zeros(d_out))
        return cls(weights, biases)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def d_emb(self) -> int:
        return self.weights[-1].shape[0]

    def params(self, prefix: str = "embed") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.{i}.weight"] = w
            out[f"{prefix}.{i}.bias"] = b
        return out

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class EmbedTape:
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    norms: np.ndarray
    out: np.ndarray


def embed_forward(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, EmbedTape]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.d_in:
        raise ShapeError(f"input {x.shape} does not match model input dim {model.d_in}")
    inputs, preacts = [], []
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        a = h @ w.T + b
        preacts.append(a)
        h = np.maximum(a, 0.0) if i < last else a
    norms = np.sqrt(np.einsum("ij,ij->i", h, h))
    if np.any(norms <= EPS_NORM):
        raise DegenerateVectorError("an embedding has (near) zero norm before normalization")
    z = h / norms[:, None]
    check_finite(z, "embeddings")
    return z, EmbedTape(inputs, preacts, norms, z)


def embed(model: MlpModel, x: np.ndarray) -> np.ndarray:
    return embed_forward(model, x)[0]


def normalize_backward(z: np.ndarray, norms: np.ndarray, grad_z: np.ndarray) -> np.ndarray:
    """Exact Jacobian-vector product of ``v -> v/|v|`` (row-wise)."""
    radial = np.einsum("ij,ij->i", z, grad_z)
    return (grad_z - z * radial[:, None]) / norms[:, None]


def embed_backward(
    model: MlpModel, tape: EmbedTape, grad_z: np.ndarray, prefix: str = "embed"
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Returns (parameter gradients, gradient w.r.t. the input rows)."""
    g = normalize_backward(tape.out, tape.norms, grad_z)
    grads = {}
    for i in range(len(model.weights) - 1, -1, -1):
        if i < len(model.weights) - 1:
            g = g * (tape.preacts[i] > 0)
        grads[f"{prefix}.{i}.weight"] = g.T @ tape.inputs[i]
        grads[f"{prefix}.{i}.bias"] = g.sum(axis=0)
        g = g @ model.weights[i]
    return grads, g


@dataclass
class ClassifierHead:
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, n_classes: int, d_emb: int, rng: np.random.Generator) -> "ClassifierHead":
        return cls(glorot_uniform(rng, n_classes, d_emb), np.zeros(n_classes))

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def params(self, prefix: str = "cls") -> dict[str, np.ndarray]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


def classify_forward(head: ClassifierHead, z: np.ndarray) -> np.ndarray:
    if z.ndim != 2 or z.shape[1] != head.weight.shape[1]:
        raise ShapeError(f"embeddings {z.shape} do not match classifier dim {head.weight.shape[1]}")
    return z @ head.weight.T + head.bias


def classify_backward(
    head: ClassifierHead, z: np.ndarray, grad_logits: np.ndarray, prefix: str = "cls"
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    grads = {f"{prefix}.weight": grad_logits.T @ z, f"{prefix}.bias": grad_logits.sum(axis=0)}
    return grads, grad_logits @ head.weight


@dataclass
class DiscriminatorHead:
    """affine -> ReLU -> affine -> logistic; hidden width defaults to d_emb."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, d_emb: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or d_emb
        return cls(
            glorot_uniform(rng, hidden, d_emb),
            np.zeros(hidden),
            glorot_uniform(rng, 1, hidden),
            np.zeros(1),
        )

    @classmethod
    def zeros(cls, d_emb: int, hidden: int | None = None):
        hidden = hidden or d_emb
        return cls(np.zeros((hidden, d_emb)), np.zeros(hidden), np.zeros((1, hidden)), np.zeros(1))

    def params(self, prefix: str = "disc") -> dict[str, np.ndarray]:
        return {
            f"{prefix}.0.weight": self.w1,
            f"{prefix}.0.bias": self.b1,
            f"{prefix}.1.weight": self.w2,
            f"{prefix}.1.bias": self.b2,
        }


@dataclass
class DiscTape:
    z: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    q: np.ndarray


def discriminate_forward(head: DiscriminatorHead, z: np.ndarray) -> tuple[np.ndarray, DiscTape]:
    if z.ndim != 2 or z.shape[1] != head.w1.shape[1]:
        raise ShapeError(f"embeddings {z.shape} do not match discriminator dim {head.w1.shape[1]}")
    pre = z @ head.w1.T + head.b1
    hidden = np.maximum(pre, 0.0)
    score = (hidden @ head.w2.T + head.b2)[:, 0]
    q = logistic(score)
    return q, DiscTape(z, pre, hidden, q)


def discriminate_backward(
    head: DiscriminatorHead, tape: DiscTape, grad_q: np.ndarray, prefix: str = "disc"
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    g_score = (grad_q * tape.q * (1.0 - tape.q))[:, None]
    g_hidden = (g_score @ head.w2) * (tape.pre > 0)
    grads = {
        f"{prefix}.1.weight": g_score.T @ tape.hidden,
        f"{prefix}.1.bias": g_score.sum(axis=0),
        f"{prefix}.0.weight": g_hidden.T @ tape.z,
        f"{prefix}.0.bias": g_hidden.sum(axis=0),
    }
    return grads, g_hidden @ head.w1


@dataclass(frozen=True)
class GrlConfig:
    beta: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ConfigError("GRL beta must be finite and non-negative")


def grl_forward(x: np.ndarray) -> np.ndarray:
    return x


def grl_backward(upstream_grad: np.ndarray, cfg: GrlConfig) -> np.ndarray:
    return -cfg.beta * np.asarray(upstream_grad, dtype=np.float64)


@dataclass
class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    Parameters are updated in place so model objects sharing them see the step.
    """

    params: dict[str, np.ndarray]
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        sgd_step(self.params, grads, lr, self.momentum, self.weight_decay, self.velocity)


def sgd_step(params, grads, lr, momentum, weight_decay, velocity=None):
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    if velocity is None:
        velocity = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, param {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v + g + weight_decay * p
        velocity[name] = v
        p -= lr * v
    return params


@dataclass
class Checkpoint:
    """Embedding network plus whichever heads were trained with it."""

    embed: MlpModel
    classifier: ClassifierHead | None = None
    discriminator: DiscriminatorHead | None = None

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.embed.params())
        if self.classifier is not None:
            out.update(self.classifier.params())
        if self.discriminator is not None:
            out.update(self.discriminator.params())
        return out

    def save(self, path) -> None:
        tensorio.save(path, self.tensors())

    def to_bytes(self) -> bytes:
        return tensorio.dumps(self.tensors())

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "Checkpoint":
        weights, biases = [], []
        i = 0
        while f"embed.{i}.weight" in t:
            weights.append(t[f"embed.{i}.weight"].copy())
            biases.append(t[f"embed.{i}.bias"][:, 0].copy())
            i += 1
        if not weights:
            raise FormatError("checkpoint has no embedding layers")
        classifier = None
        if "cls.weight" in t:
            classifier = ClassifierHead(t["cls.weight"].copy(), t["cls.bias"][:, 0].copy())
        disc = None
        if "disc.0.weight" in t:
            disc = DiscriminatorHead(
                t["disc.0.weight"].copy(),
                t["disc.0.bias"][:, 0].copy(),
                t["disc.1.weight"].copy(),
                t["disc.1.bias"][:, 0].copy(),
            )
        return cls(MlpModel(weights, biases), classifier, disc)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_tensors(tensorio.load(path))
