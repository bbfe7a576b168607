"""Two-branch convolutional matching model over document-embedding matrices.

Each branch (candidate, query) runs a row-wise valid convolution with ``k`` filters
spanning ``f`` documents, non-overlapping max pooling of width ``p``, and a fully
connected tanh layer producing a latent vector. The latent vectors meet in three
neurons::

    o1 = act(w1 * <Lc, Lq> + b1)
    o2 = act(w2 . [Lc; Lq] + b2)
    o3 = tanh(w3 . [o1, o2] + b3)

Everything is plain numpy with hand-written gradients; arrays carry a leading batch
axis internally.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

CNN_MAGIC = b"ESM-CNN-v1"


class ModelError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


# --- activations ----------------------------------------------------------------


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(pre, out):
    return (pre > 0).astype(pre.dtype)


def _tanh_grad(pre, out):
    return 1.0 - out * out


ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
    "identity": (lambda x: x, lambda pre, out: np.ones_like(pre)),
}


def _activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ModelError(f"unknown activation {name!r}") from None


# --- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    n: int = 2000
    m_d: int = 100
    k: int = 2
    f: int = 2
    p: int = 2
    m_c: int = 32
    m_q: int = 32
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if self.f < 1 or self.n < self.f:
            raise ModelError(f"need n >= f >= 1, got n={self.n}, f={self.f}")
        if self.p < 1:
            raise ModelError(f"pooling window must be >= 1, got {self.p}")
        if self.k < 1 or self.m_d < 1:
            raise ModelError("k and m_d must be >= 1")
        if self.m_c != self.m_q or self.m_c < 1:
            raise ModelError(f"latent sizes must match and be positive (m_c={self.m_c}, m_q={self.m_q})")
        if self.activation not in ("relu", "tanh"):
            raise ModelError(f"activation must be relu or tanh, got {self.activation!r}")

    @property
    def conv_len(self) -> int:
        return self.n - self.f + 1

    @property
    def pooled_len(self) -> int:
        return math.ceil(self.conv_len / self.p)

    @property
    def flat_len(self) -> int:
        return self.k * self.pooled_len

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for side, out in (("c", self.m_c), ("q", self.m_q)):
            shapes[f"{side}.filters"] = (self.k, self.f, self.m_d)
            shapes[f"{side}.filter_bias"] = (self.k,)
            shapes[f"{side}.fc_weight"] = (self.flat_len, out)
            shapes[f"{side}.fc_bias"] = (out,)
        shapes["o1.weight"] = (1,)
        shapes["o1.bias"] = (1,)
        shapes["o2.weight"] = (self.m_c + self.m_q,)
        shapes["o2.bias"] = (1,)
        shapes["o3.weight"] = (2,)
        shapes["o3.bias"] = (1,)
        return shapes


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 32
    patience: int = 10
    loss: str = "mse"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ModelError("learning rate must be > 0")
        if self.epochs < 1:
            raise ModelError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ModelError("batch size must be >= 1")
        if self.loss != "mse":
            raise ModelError(f"unsupported loss {self.loss!r}")


# --- layers -----------------------------------------------------------------------


def build_embedding_matrix(docs: Sequence[np.ndarray], n: int, m_d: int | None = None) -> np.ndarray:
    """Stack up to ``n`` document vectors as rows; missing rows stay zero."""
    if m_d is None:
        if not len(docs):
            raise ModelError("m_d is required when there are no documents")
        m_d = len(docs[0])
    out = np.zeros((n, m_d))
    for j, vec in enumerate(docs[:n]):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (m_d,):
            raise ModelError(f"document vector {j} has shape {vec.shape}, expected ({m_d},)")
        out[j] = vec
    for j, vec in enumerate(docs[n:], start=n):
        if np.shape(vec) != (m_d,):
            raise ModelError(f"document vector {j} has shape {np.shape(vec)}, expected ({m_d},)")
    return out


def _conv(E: np.ndarray, filters: np.ndarray, bias: np.ndarray):
    """Batched valid convolution: E (B, n, m_d) -> pre-activations (B, k, n-f+1)."""
    f = filters.shape[1]
    if E.shape[1] < f:
        raise ModelError(f"need at least f={f} rows, got {E.shape[1]}")
    win = sliding_window_view(E, f, axis=1)  # (B, R, m_d, f)
    pre = np.einsum("brdf,kfd->bkr", win, filters, optimize=True) + bias[None, :, None]
    return pre, win


def conv_forward(E: np.ndarray, filters: np.ndarray, biases: np.ndarray, activation: str = "relu") -> np.ndarray:
    """Feature maps (k, n-f+1) of one embedding matrix."""
    fn, _ = _activation(activation)
    E = np.asarray(E, dtype=float)
    filters = np.asarray(filters, dtype=float)
    if filters.ndim == 2:
        filters = filters[None]
    pre, _ = _conv(E[None], filters, np.atleast_1d(np.asarray(biases, dtype=float)))
    return fn(pre)[0]


def _pool(a: np.ndarray, p: int):
    """Non-overlapping max pooling on the last axis; returns values and absolute argmax."""
    r = a.shape[-1]
    n_out = math.ceil(r / p)
    pad = n_out * p - r
    if pad:
        fill = np.full(a.shape[:-1] + (pad,), -np.inf)
        a = np.concatenate([a, fill], axis=-1)
    blocks = a.reshape(a.shape[:-1] + (n_out, p))
    local = blocks.argmax(axis=-1)
    values = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]
    return values, local + np.arange(n_out) * p


def maxpool(feature_map: np.ndarray, p: int):
    """Max over consecutive windows of ``p`` (the last may be shorter).

    Returns ``(pooled, argmax_indices)``.
    """
    if p < 1:
        raise ModelError(f"pooling window must be >= 1, got {p}")
    fm = np.asarray(feature_map, dtype=float)
    if fm.size == 0:
        raise ModelError("cannot pool an empty feature map")
    return _pool(fm, p)


# --- model ------------------------------------------------------------------------


@dataclass(frozen=True)
class ForwardResult:
    Lc: np.ndarray
    Lq: np.ndarray
    o1: np.ndarray
    o2: np.ndarray
    o3: np.ndarray


@dataclass
class DualCnnModel:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: ModelConfig) -> "DualCnnModel":
        """Glorot-uniform weights, zero biases, all drawn from ``config.seed``."""
        rng = np.random.default_rng(config.seed)
        params = {}
        for name, shape in config.param_shapes().items():
            if name.endswith("bias"):
                params[name] = np.zeros(shape)
                continue
            if name.endswith("filters"):
                fan_in, fan_out = config.f * config.m_d, config.f * config.k
            elif len(shape) == 2:
                fan_in, fan_out = shape
            else:
                fan_in, fan_out = shape[0], 1
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
        return cls(config, params)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "DualCnnModel":
        return cls(config, {k: np.zeros(s) for k, s in config.param_shapes().items()})

    def copy(self) -> "DualCnnModel":
        return DualCnnModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    # forward / backward -----------------------------------------------------

    def _check(self, E: np.ndarray) -> np.ndarray:
        E = np.asarray(E, dtype=float)
        if E.ndim == 2:
            E = E[None]
        cfg = self.config
        if E.ndim != 3 or E.shape[1:] != (cfg.n, cfg.m_d):
            raise ModelError(f"embedding matrix shape {E.shape[-2:]} does not match (n={cfg.n}, m_d={cfg.m_d})")
        return E

    def _branch(self, side: str, E: np.ndarray):
        P = self.params
        act, _ = _activation(self.config.activation)
        pre, win = _conv(E, P[f"{side}.filters"], P[f"{side}.filter_bias"])
        a = act(pre)
        pooled, idx = _pool(a, self.config.p)
        flat = pooled.reshape(len(E), -1)
        latent = np.tanh(flat @ P[f"{side}.fc_weight"] + P[f"{side}.fc_bias"])
        return latent, (win, pre, a, idx, flat, latent)

    def _forward(self, Ec, Eq):
        Ec, Eq = self._check(Ec), self._check(Eq)
        if len(Ec) != len(Eq):
            raise ModelError("candidate and query batches differ in size")
        P = self.params
        act, _ = _activation(self.config.activation)
        Lc, cache_c = self._branch("c", Ec)
        Lq, cache_q = self._branch("q", Eq)
        dot = np.einsum("bi,bi->b", Lc, Lq)
        pre1 = P["o1.weight"][0] * dot + P["o1.bias"][0]
        o1 = act(pre1)
        cat = np.concatenate([Lc, Lq], axis=1)
        pre2 = cat @ P["o2.weight"] + P["o2.bias"][0]
        o2 = act(pre2)
        o3 = np.tanh(P["o3.weight"][0] * o1 + P["o3.weight"][1] * o2 + P["o3.bias"][0])
        cache = (cache_c, cache_q, dot, pre1, o1, cat, pre2, o2, o3)
        return ForwardResult(Lc, Lq, o1, o2, o3), cache

    def forward(self, Ec: np.ndarray, Eq: np.ndarray) -> ForwardResult:
        """Outputs for one pair of (n, m_d) matrices or a batch (B, n, m_d)."""
        single = np.ndim(Ec) == 2
        out, _ = self._forward(Ec, Eq)
        if single:
            return ForwardResult(out.Lc[0], out.Lq[0], out.o1[0], out.o2[0], out.o3[0])
        return out

    def score(self, Ec: np.ndarray, Eq: np.ndarray, chunk: int = 256) -> np.ndarray:
        Ec, Eq = self._check(Ec), self._check(Eq)
        return np.concatenate([self._forward(Ec[i:i + chunk], Eq[i:i + chunk])[0].o3
                               for i in range(0, len(Ec), chunk)] or [np.zeros(0)])

    def loss_and_gradients(self, Ec, Eq, target) -> tuple[float, dict[str, np.ndarray]]:
        """Mean squared error of o3 over the batch and its exact gradient."""
        out, cache = self._forward(Ec, Eq)
        cache_c, cache_q, dot, pre1, o1, cat, pre2, o2, o3 = cache
        y = np.broadcast_to(np.asarray(target, dtype=float), o3.shape)
        B = len(o3)
        P = self.params
        _, dact = _activation(self.config.activation)
        m = self.config.m_c
        grads: dict[str, np.ndarray] = {}

        diff = o3 - y
        loss = float(np.mean(diff * diff))
        d3 = (2.0 / B) * diff * (1.0 - o3 * o3)
        grads["o3.weight"] = np.array([d3 @ o1, d3 @ o2])
        grads["o3.bias"] = np.array([d3.sum()])
        d1 = d3 * P["o3.weight"][0] * dact(pre1, o1)
        d2 = d3 * P["o3.weight"][1] * dact(pre2, o2)
        grads["o1.weight"] = np.array([d1 @ dot])
        grads["o1.bias"] = np.array([d1.sum()])
        grads["o2.weight"] = cat.T @ d2
        grads["o2.bias"] = np.array([d2.sum()])
        dcat = d2[:, None] * P["o2.weight"][None, :]
        Lc, Lq = out.Lc, out.Lq
        ddot = d1 * P["o1.weight"][0]
        dLc = dcat[:, :m] + ddot[:, None] * Lq
        dLq = dcat[:, m:] + ddot[:, None] * Lc
        self._branch_backward("c", cache_c, dLc, grads)
        self._branch_backward("q", cache_q, dLq, grads)
        return loss, grads

    def _branch_backward(self, side, cache, dL, grads):
        win, pre, a, idx, flat, latent = cache
        P = self.params
        _, dact = _activation(self.config.activation)
        dz = dL * (1.0 - latent * latent)
        grads[f"{side}.fc_weight"] = flat.T @ dz
        grads[f"{side}.fc_bias"] = dz.sum(axis=0)
        dpooled = (dz @ P[f"{side}.fc_weight"].T).reshape(idx.shape)
        B, k, R = a.shape
        padded = np.zeros((B, k, idx.shape[-1] * self.config.p))
        np.put_along_axis(padded, idx, dpooled, axis=-1)
        dpre = padded[..., :R] * dact(pre, a)
        grads[f"{side}.filters"] = np.einsum("bkr,brdf->kfd", dpre, win, optimize=True)
        grads[f"{side}.filter_bias"] = dpre.sum(axis=(0, 2))


def forward(model: DualCnnModel, Ec: np.ndarray, Eq: np.ndarray) -> ForwardResult:
    return model.forward(Ec, Eq)


def backward(model: DualCnnModel, Ec: np.ndarray, Eq: np.ndarray, target) -> dict[str, np.ndarray]:
    return model.loss_and_gradients(Ec, Eq, target)[1]


# --- training -----------------------------------------------------------------------


@dataclass
class PairData:
    """Training pairs as indices into per-user and per-query embedding matrices."""

    user_mats: np.ndarray   # (U, n, m_d)
    query_mats: np.ndarray  # (Q, n, m_d)
    user_idx: np.ndarray
    query_idx: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    def batch(self, rows: np.ndarray):
        return self.user_mats[self.user_idx[rows]], self.query_mats[self.query_idx[rows]], self.targets[rows]


@dataclass(frozen=True)
class TrainResult:
    model: DualCnnModel
    history: list[tuple[int, float, float]]
    best_epoch: int


def evaluate_loss(model: DualCnnModel, data: PairData, chunk: int = 256) -> float:
    total = 0.0
    for i in range(0, len(data), chunk):
        Ec, Eq, y = data.batch(np.arange(i, min(i + chunk, len(data))))
        o3 = model._forward(Ec, Eq)[0].o3
        total += float(np.sum((o3 - y) ** 2))
    return total / len(data)


def fit(model: DualCnnModel, train: PairData, val: PairData, cfg: TrainConfig) -> TrainResult:
    """Mini-batch Adam on the training pairs with early stopping on validation loss.

    The model passed in is not modified; the returned model holds the parameters of
    the epoch with the lowest validation loss.
    """
    if len(train) == 0 or len(val) == 0:
        raise TrainingError("training and validation splits must be nonempty")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    m1 = {k: np.zeros_like(v) for k, v in model.params.items()}
    m2 = {k: np.zeros_like(v) for k, v in model.params.items()}
    step = 0
    best = (math.inf, model.copy(), 0)
    history: list[tuple[int, float, float]] = []
    wait = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            Ec, Eq, y = train.batch(order[start:start + cfg.batch_size])
            _, grads = model.loss_and_gradients(Ec, Eq, y)
            step += 1
            c1 = 1.0 - cfg.beta1 ** step
            c2 = 1.0 - cfg.beta2 ** step
            for name in sorted(grads):
                g = grads[name]
                m1[name] = cfg.beta1 * m1[name] + (1 - cfg.beta1) * g
                m2[name] = cfg.beta2 * m2[name] + (1 - cfg.beta2) * g * g
                model.params[name] = model.params[name] - cfg.learning_rate * (m1[name] / c1) / (
                    np.sqrt(m2[name] / c2) + cfg.eps)
                if not np.all(np.isfinite(model.params[name])):
                    raise TrainingError(f"non-finite values in {name} after step {step}")
        train_loss = evaluate_loss(model, train)
        val_loss = evaluate_loss(model, val)
        history.append((epoch, train_loss, val_loss))
        if val_loss < best[0]:
            best = (val_loss, model.copy(), epoch)
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best[2])
                break
    return TrainResult(best[1], history, best[2])


def write_history(history: Sequence[tuple[int, float, float]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for epoch, tr, va in history:
            fh.write(f"{epoch},{tr!r},{va!r}\n")


# --- persistence ----------------------------------------------------------------------


def save_model(model: DualCnnModel, path: str | Path) -> None:
    names = list(model.config.param_shapes())
    header = json.dumps({"config": asdict(model.config), "params": names}, sort_keys=True).encode()
    flat = np.concatenate([model.params[n].ravel() for n in names]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(CNN_MAGIC + b"\n")
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(flat.tobytes())


def load_model(path: str | Path) -> DualCnnModel:
    data = Path(path).read_bytes()
    magic, sep, rest = data.partition(b"\n")
    if magic != CNN_MAGIC:
        found = magic[:32].decode("utf-8", "replace") if sep else "<no header>"
        raise ModelError(f"{path}: expected {CNN_MAGIC.decode()}, found {found}")
    if len(rest) < 8:
        raise ModelError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", rest[:8])
    if len(rest) < 8 + hlen:
        raise ModelError(f"{path}: truncated checkpoint")
    try:
        meta = json.loads(rest[8:8 + hlen])
    except json.JSONDecodeError:
        raise ModelError(f"{path}: corrupt checkpoint header") from None
    config = ModelConfig(**meta["config"])
    shapes = config.param_shapes()
    expected = sum(int(np.prod(s)) for s in shapes.values())
    body = rest[8 + hlen:]
    if len(body) != 8 * expected:
        raise ModelError(f"{path}: truncated checkpoint ({len(body)} of {8 * expected} parameter bytes)")
    flat = np.frombuffer(body, dtype="<f8").astype(float)
    params, offset = {}, 0
    for name in meta["params"]:
        size = int(np.prod(shapes[name]))
        params[name] = flat[offset:offset + size].reshape(shapes[name]).copy()
        offset += size
    return DualCnnModel(config, params)
