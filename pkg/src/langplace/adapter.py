"""Residual bottleneck adapters over frozen tokens, trained with cross-entropy.

Each adapter is a 3-layer MLP ``D -> h -> h -> D`` (ReLU after the first two
layers) mixed with its input through a gate::

    X* = gate * A(X) + (1 - gate) * X

Grounding probabilities are a temperature-scaled softmax over cosine
similarities between adapted textual and visual tokens.  Gradients are
derived by hand; there is no autodiff dependency.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from langplace.core import Scene, Tuple
from langplace.embeddings import tokenize_scene

log = logging.getLogger(__name__)

DEFAULT_HIDDEN = 112
LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    pass


class DegenerateToken(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class AdapterWeights:
    W1: np.ndarray  # h x D
    b1: np.ndarray  # h
    W2: np.ndarray  # h x h
    b2: np.ndarray  # h
    W3: np.ndarray  # D x h
    b3: np.ndarray  # D

    NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")

    def __post_init__(self):
        h, d = self.W1.shape
        expected = {"W1": (h, d), "b1": (h,), "W2": (h, h), "b2": (h,), "W3": (d, h), "b3": (d,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.NAMES]

    def copy(self) -> "AdapterWeights":
        return AdapterWeights(*(a.copy() for a in self.arrays()))

    @classmethod
    def zeros(cls, dim: int, hidden: int) -> "AdapterWeights":
        return cls(np.zeros((hidden, dim)), np.zeros(hidden), np.zeros((hidden, hidden)),
                   np.zeros(hidden), np.zeros((dim, hidden)), np.zeros(dim))

    @classmethod
    def init(cls, dim: int, hidden: int, rng: np.random.Generator) -> "AdapterWeights":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
        def u(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)
        return cls(u(dim, (hidden, dim)), u(dim, hidden), u(hidden, (hidden, hidden)),
                   u(hidden, hidden), u(hidden, (dim, hidden)), u(hidden, dim))


@dataclass
class AdapterPair:
    visual: AdapterWeights
    textual: AdapterWeights
    alpha: float = 0.2
    beta: float = 0.2
    temperature: float = 0.01

    def __post_init__(self):
        if not (0 <= self.alpha <= 1 and 0 <= self.beta <= 1):
            raise ValueError("gates must lie in [0, 1]")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if (self.visual.dim, self.visual.hidden) != (self.textual.dim, self.textual.hidden):
            raise ShapeError("visual and textual adapters disagree on (D, h)")

    @classmethod
    def create(cls, dim: int = 512, hidden: int = DEFAULT_HIDDEN, seed: int = 0, **kwargs) -> "AdapterPair":
        rng = np.random.default_rng(seed)
        visual = AdapterWeights.init(dim, hidden, rng)
        textual = AdapterWeights.init(dim, hidden, rng)
        return cls(visual, textual, **kwargs)

    @property
    def dim(self) -> int:
        return self.visual.dim

    @property
    def hidden(self) -> int:
        return self.visual.hidden

    def arrays(self) -> list[np.ndarray]:
        return self.visual.arrays() + self.textual.arrays()

    def copy(self) -> "AdapterPair":
        return replace(self, visual=self.visual.copy(), textual=self.textual.copy())

    def adapt(self, V: np.ndarray, T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return adapter_forward(self.visual, self.alpha, V), adapter_forward(self.textual, self.beta, T)

    def probs(self, V: np.ndarray, T: np.ndarray) -> np.ndarray:
        Vs, Ts = self.adapt(V, T)
        return similarity_probs(Vs, Ts, self.temperature)


def parameter_count(dim: int = 512, hidden: int = DEFAULT_HIDDEN) -> int:
    per_adapter = (dim * hidden + hidden) + (hidden * hidden + hidden) + (hidden * dim + dim)
    return 2 * per_adapter


def _mlp(w: AdapterWeights, X: np.ndarray):
    pre1 = X @ w.W1.T + w.b1
    h1 = np.maximum(pre1, 0.0)
    pre2 = h1 @ w.W2.T + w.b2
    h2 = np.maximum(pre2, 0.0)
    out = h2 @ w.W3.T + w.b3
    return out, (X, pre1, h1, pre2, h2)


def _mlp_backward(w: AdapterWeights, cache, d_out: np.ndarray) -> AdapterWeights:
    X, pre1, h1, pre2, h2 = cache
    dW3 = d_out.T @ h2
    db3 = d_out.sum(axis=0)
    d_pre2 = (d_out @ w.W3) * (pre2 > 0)
    dW2 = d_pre2.T @ h1
    db2 = d_pre2.sum(axis=0)
    d_pre1 = (d_pre2 @ w.W2) * (pre1 > 0)
    dW1 = d_pre1.T @ X
    db1 = d_pre1.sum(axis=0)
    return AdapterWeights(dW1, db1, dW2, db2, dW3, db3)


def _check_tokens(X: np.ndarray, dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != dim:
        raise ShapeError(f"token matrix of shape {X.shape} does not have {dim} columns")
    return X


def adapter_forward(w: AdapterWeights, gate: float, X: np.ndarray) -> np.ndarray:
    X = _check_tokens(X, w.dim)
    out, _ = _mlp(w, X)
    return gate * out + (1.0 - gate) * X


def _unit_rows(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise DegenerateToken("token with zero or non-finite norm")
    return X / norms[:, None], norms


def cosine_matrix(Vs: np.ndarray, Ts: np.ndarray) -> np.ndarray:
    if Vs.shape[1] != Ts.shape[1]:
        raise ShapeError(f"token widths differ: {Vs.shape[1]} vs {Ts.shape[1]}")
    Vh, _ = _unit_rows(Vs)
    Th, _ = _unit_rows(Ts)
    return Th @ Vh.T


def _softmax_rows(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def similarity_probs(Vs: np.ndarray, Ts: np.ndarray, temperature: float) -> np.ndarray:
    """Row-stochastic L x (N+1) matrix ``softmax_n(cos(t_l, v_n) / temperature)``."""
    return _softmax_rows(cosine_matrix(Vs, Ts) / temperature)


def ce_loss(P: np.ndarray, labels: Sequence[int]) -> float:
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (P.shape[0],) or np.any(labels < 0) or np.any(labels >= P.shape[1]):
        raise ValueError(f"labels {labels.tolist()} do not fit a {P.shape} probability matrix")
    picked = P[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, LOG_CLAMP))))


def backward(pair: AdapterPair, V: np.ndarray, T: np.ndarray, labels: Sequence[int]):
    """Loss and exact gradients w.r.t. both adapters' weights.

    Returns ``(loss, grad_visual, grad_textual)`` where the gradients are
    :class:`AdapterWeights` instances holding d(loss)/d(weight).
    """
    V = _check_tokens(V, pair.dim)
    T = _check_tokens(T, pair.dim)
    labels = np.asarray(labels, dtype=int)
    L = T.shape[0]

    a_v, cache_v = _mlp(pair.visual, V)
    a_t, cache_t = _mlp(pair.textual, T)
    Vs = pair.alpha * a_v + (1 - pair.alpha) * V
    Ts = pair.beta * a_t + (1 - pair.beta) * T
    Vh, v_norm = _unit_rows(Vs)
    Th, t_norm = _unit_rows(Ts)
    P = _softmax_rows((Th @ Vh.T) / pair.temperature)
    loss = ce_loss(P, labels)

    Y = np.zeros_like(P)
    Y[np.arange(L), labels] = 1.0
    dZ = (P - Y) / L
    # the clamp is flat below LOG_CLAMP, so those rows carry no gradient
    dZ[P[np.arange(L), labels] < LOG_CLAMP] = 0.0
    dS = dZ / pair.temperature
    dTh = dS @ Vh
    dVh = dS.T @ Th
    # d(x/|x|) = (I - x̂x̂ᵀ)/|x|
    dTs = (dTh - Th * np.sum(dTh * Th, axis=1, keepdims=True)) / t_norm[:, None]
    dVs = (dVh - Vh * np.sum(dVh * Vh, axis=1, keepdims=True)) / v_norm[:, None]

    grad_v = _mlp_backward(pair.visual, cache_v, pair.alpha * dVs)
    grad_t = _mlp_backward(pair.textual, cache_t, pair.beta * dTs)
    return loss, grad_v, grad_t


@dataclass
class TrainSample:
    scene: Scene
    tuples: list[Tuple]
    labels: list[int]

    def __post_init__(self):
        if len(self.tuples) != len(self.labels):
            raise ValueError("one label per tuple")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    steps: int = 20_000
    batch_size: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in known})


class Adam:
    """Adam over a single flat parameter vector, updated in place."""

    def __init__(self, params: np.ndarray, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr = params, lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros_like(params)
        self.v = np.zeros_like(params)
        self._tmp = np.empty_like(params)
        self.t = 0

    def step(self, grad: np.ndarray) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        m, v, tmp = self.m, self.v, self._tmp
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        np.multiply(grad, grad, out=tmp)
        tmp *= 1 - self.beta2
        v += tmp
        # p -= lr * m_hat / (sqrt(v_hat) + eps)
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += self.eps
        np.divide(m, tmp, out=tmp)
        tmp *= self.lr / c1
        self.params -= tmp


class SGD:
    def __init__(self, params: np.ndarray, lr: float):
        self.params, self.lr = params, lr

    def step(self, grad: np.ndarray) -> None:
        self.params -= self.lr * grad


def batch_backward(pair: AdapterPair, batch: Sequence[tuple[np.ndarray, np.ndarray, Sequence[int]]]):
    """Mean loss and mean gradients over a batch of (V, T, labels) samples."""
    total_loss = 0.0
    total = None
    for V, T, labels in batch:
        loss, gv, gt = backward(pair, V, T, labels)
        grads = gv.arrays() + gt.arrays()
        total_loss += loss
        if total is None:
            total = grads
        else:
            for acc, g in zip(total, grads):
                acc += g
    n = len(batch)
    return total_loss / n, [g / n for g in total]


def _flatten(pair: AdapterPair) -> np.ndarray:
    """Move all weights of ``pair`` into one buffer; the pair's arrays become views of it."""
    flat = np.concatenate([a.ravel() for a in pair.arrays()])
    pos = 0
    for w in (pair.visual, pair.textual):
        for name in AdapterWeights.NAMES:
            a = getattr(w, name)
            setattr(w, name, flat[pos:pos + a.size].reshape(a.shape))
            pos += a.size
    return flat


def train(pair: AdapterPair, dataset: Sequence[TrainSample], cfg: TrainConfig, provider,
          tokens: Optional[list] = None):
    """Fit both adapters on ``dataset``; returns ``(trained_pair, loss_trace)``.

    The input pair is left untouched.  ``tokens`` may carry precomputed
    ``(V, T)`` per sample to skip the (frozen) encoder.
    """
    if not dataset:
        raise ValueError("empty training set")
    pair = pair.copy()
    if tokens is None:
        tokens = [tokenize_scene(provider, s.scene, s.tuples) for s in dataset]
    samples = [(V, T, s.labels) for (V, T), s in zip(tokens, dataset)]

    flat = _flatten(pair)
    params = flat
    if cfg.optimizer == "adam":
        opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    else:
        opt = SGD(params, cfg.learning_rate)

    rng = np.random.default_rng(cfg.seed)
    order = np.empty(0, dtype=int)
    trace = np.empty(cfg.steps)
    for step in range(cfg.steps):
        while len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(samples))])
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        loss, grads = batch_backward(pair, [samples[i] for i in idx])
        opt.step(np.concatenate([g.ravel() for g in grads]))
        trace[step] = loss
        if step % 5000 == 0:
            log.debug("step %d loss %.4f", step, loss)
    return pair, trace


def grounding_accuracy(pair: AdapterPair, tokens, labels) -> float:
    hits = total = 0
    for (V, T), y in zip(tokens, labels):
        pred = np.argmax(pair.probs(V, T), axis=1)
        hits += int(np.sum(pred == np.asarray(y)))
        total += len(y)
    return hits / total if total else float("nan")


MAGIC = b"ADPT"
VERSION = 1
_HEADER = struct.Struct("<4sIIIfff")


def save_weights(pair: AdapterPair, path) -> None:
    header = _HEADER.pack(MAGIC, VERSION, pair.dim, pair.hidden, pair.alpha, pair.beta, pair.temperature)
    with open(path, "wb") as fh:
        fh.write(header)
        for a in pair.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_weights(path, expected_dim: Optional[int] = None) -> AdapterPair:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read weights file {path}: {exc.strerror}") from exc
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, dim, hidden, alpha, beta, tau = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise FormatError(f"{path}: weights have D={dim} but the encoder produces D={expected_dim}")
    expected = _HEADER.size + 4 * parameter_count(dim, hidden)
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for D={dim}, h={hidden}, got {len(data)}")
    shapes = [(hidden, dim), (hidden,), (hidden, hidden), (hidden,), (dim, hidden), (dim,)]
    pos = _HEADER.size
    arrays = []
    for shape in shapes * 2:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(np.float64).reshape(shape))
        pos += 4 * n
    return AdapterPair(AdapterWeights(*arrays[:6]), AdapterWeights(*arrays[6:]),
                       float(alpha), float(beta), float(tau))
