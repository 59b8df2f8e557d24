"""Graph convolution head, sparsity-constrained loss and training loop.

Pipeline for one sequence::

    X   = relu(frames @ P + bias)                  (d, c)
    A   = threshold(X X^T, q)                      (d, d)
    M   = D^-1/2 (A + I) D^-1/2                    (or A + I without GLSPR)
    Z   = relu(M Z W_l)   for l = 0 .. g_n-1       (d, g_dim)
    h   = relu(mean_nodes(Z) @ W_out)              (n_out,)
    Y   = softmax(h @ W_cls)                       (n_cls,)

Everything is batched over a leading sample axis.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .entanglement import entangle, propagator, threshold_affinity
from .feature_context import SequenceSample, apply_mask, flatten_frames
from .metrics import summarize
from .numerics import (
    Tape,
    Var,
    absolute,
    add,
    log,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    scale,
    softmax,
)

PROB_FLOOR = 1e-12
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Training hit a non-finite loss."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class Hyper:
    c: int = 8
    g_n: int = 8
    g_dim: int = 32
    n_out: int = 64
    n_cls: int = 2
    alpha: float = 1e-5
    q: float = 0.5
    glspr_enabled: bool = True
    sc_enabled: bool = True


@dataclass(frozen=True)
class Prediction:
    probabilities: np.ndarray
    logits: np.ndarray


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _one_hot(labels, n_cls: int) -> np.ndarray:
    y = np.zeros((len(labels), n_cls))
    y[np.arange(len(labels)), np.asarray(labels, dtype=int)] = 1.0
    return y


def stack_frames(samples) -> np.ndarray:
    return np.stack([s.frames for s in samples])


def cross_entropy(probs: Var, labels, n_cls: int) -> Var:
    """Per-sample ``-sum_c Y_c log max(Yhat_c, 1e-12)``."""
    y = _one_hot(labels, n_cls)
    return scale(reduce_sum(mul(log(probs, floor=PROB_FLOOR), y), axis=-1), -1.0)


class _Model:
    """Shared parameter bookkeeping for the trainable heads."""

    kind = "model"
    params: dict[str, np.ndarray]

    def loss_terms(self, vars_: dict[str, Var], frames: np.ndarray, labels) -> tuple[Var, Var, Var]:
        raise NotImplementedError

    def logits(self, vars_: dict[str, Var], frames: np.ndarray) -> tuple[Var, Var]:
        raise NotImplementedError

    def as_vars(self, requires_grad: bool = False) -> dict[str, Var]:
        return {k: Var(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    def loss_value(self, frames, labels) -> float:
        total, _, _ = self.loss_terms(self.as_vars(), frames, labels)
        return float(total.value)

    def predict_proba(self, frames: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """``(B, n_cls)`` class probabilities, evaluated without a tape."""
        vars_ = self.as_vars()
        out = []
        for i in range(0, len(frames), batch_size):
            logits, _ = self.logits(vars_, frames[i : i + batch_size])
            out.append(softmax(logits).value)
        return np.concatenate(out) if out else np.zeros((0, 2))

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new


class GraceModel(_Model):
    """Projector, ``g_n`` graph-convolution layers, readout and classifier."""

    kind = "grace"

    def __init__(self, hyper: Hyper, c_in: int, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.hyper = hyper
        self.c_in = c_in
        if params is None:
            params = self.init_params(hyper, c_in, seed)
        self.params = params
        self._check_shapes()

    @staticmethod
    def init_params(hyper: Hyper, c_in: int, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng([seed, 0x6C])
        params = {"P": glorot(rng, c_in, hyper.c), "bias": np.zeros(hyper.c)}
        dims = [hyper.c] + [hyper.g_dim] * hyper.g_n
        for l in range(hyper.g_n):
            params[f"W{l}"] = glorot(rng, dims[l], dims[l + 1])
        params["W_out"] = glorot(rng, hyper.g_dim, hyper.n_out)
        params["W_cls"] = glorot(rng, hyper.n_out, hyper.n_cls)
        return params

    def _check_shapes(self):
        h = self.hyper
        if h.n_cls != 2:
            raise ValueError("only binary classification is supported")
        want = {"P": (self.c_in, h.c), "bias": (h.c,), "W_out": (h.g_dim, h.n_out), "W_cls": (h.n_out, h.n_cls)}
        dims = [h.c] + [h.g_dim] * h.g_n
        for l in range(h.g_n):
            want[f"W{l}"] = (dims[l], dims[l + 1])
        if set(want) != set(self.params):
            raise ValueError(f"parameter names {sorted(self.params)} do not match hyperparameters")
        for k, shape in want.items():
            if self.params[k].shape != shape:
                raise ValueError(f"{k} has shape {self.params[k].shape}, expected {shape}")

    @property
    def gcn_weights(self) -> list[np.ndarray]:
        return [self.params[f"W{l}"] for l in range(self.hyper.g_n)]

    def features(self, vars_: dict[str, Var], frames: np.ndarray) -> Var:
        return relu(add(matmul(flatten_frames(frames), vars_["P"]), vars_["bias"]))

    def propagation(self, X: Var) -> Var:
        A = threshold_affinity(entangle(X), self.hyper.q)
        return propagator(A, normalize=self.hyper.glspr_enabled)

    def logits(self, vars_, frames):
        X = self.features(vars_, frames)
        M = self.propagation(X)
        Z = X
        for l in range(self.hyper.g_n):
            Z = gcn_layer(Z, M, vars_[f"W{l}"])
        pooled = reduce_mean(Z, axis=-2)
        h = relu(matmul(pooled, vars_["W_out"]))
        return matmul(h, vars_["W_cls"]), X

    def loss_terms(self, vars_, frames, labels):
        logits, X = self.logits(vars_, frames)
        ce = reduce_mean(cross_entropy(softmax(logits), labels, self.hyper.n_cls))
        alpha = self.hyper.alpha if self.hyper.sc_enabled else 0.0
        l1 = reduce_mean(reduce_sum(absolute(X), axis=(-2, -1)))
        return add(ce, scale(l1, alpha)), ce, l1

    def with_hyper(self, **changes) -> "GraceModel":
        return GraceModel(replace(self.hyper, **changes), self.c_in, {k: v.copy() for k, v in self.params.items()})


def gcn_layer(Z, M, W) -> Var:
    """One propagation step ``relu(M Z W)``."""
    return relu(matmul(matmul(M, Z), W))


def forward(model: _Model, sample: SequenceSample) -> Prediction:
    logits, _ = model.logits(model.as_vars(), sample.frames[None])
    return Prediction(softmax(logits).value[0], logits.value[0])


def loss(model: _Model, sample: SequenceSample, label: int | None = None) -> float:
    label = sample.label if label is None else label
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    return model.loss_value(sample.frames[None], [label])


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 200
    decay: float = 0.1
    decay_every: int = 100
    batch_size: int = 8
    seed: int = 0
    train_m_r: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.decay ** (epoch // self.decay_every)


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] -= lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def state_dict(self) -> dict:
        return {
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "t": self.t,
            "m": {k: a.tolist() for k, a in self.m.items()},
            "v": {k: a.tolist() for k, a in self.v.items()},
        }

    @classmethod
    def from_state(cls, st: dict) -> "Adam":
        return cls(
            st["beta1"],
            st["beta2"],
            st["eps"],
            st["t"],
            {k: np.array(a, dtype=float) for k, a in st["m"].items()},
            {k: np.array(a, dtype=float) for k, a in st["v"].items()},
        )


@dataclass
class TrainResult:
    model: _Model
    trace: list[dict]
    optimizer: Adam
    epoch: int
    steps: list[float]

    @property
    def losses(self) -> list[float]:
        return [row["train_loss"] for row in self.trace]


def gradients(model: _Model, frames, labels) -> tuple[float, dict[str, np.ndarray]]:
    vars_ = model.as_vars(requires_grad=True)
    with Tape() as tape:
        total, _, _ = model.loss_terms(vars_, frames, labels)
    tape.backward(total)
    grads = {k: (np.zeros_like(v.value) if v.grad is None else v.grad) for k, v in vars_.items()}
    return float(total.value), grads


def train(
    model: _Model,
    dataset: list[SequenceSample],
    cfg: TrainConfig,
    val: list[SequenceSample] | None = None,
    optimizer: Adam | None = None,
    start_epoch: int = 0,
    epochs: int | None = None,
) -> TrainResult:
    """Mini-batch Adam with step decay; deterministic in ``cfg.seed``.

    Returns a new model; the input is left untouched. ``start_epoch`` and
    ``optimizer`` resume an interrupted run: epoch ``e`` always shuffles with
    the stream ``(seed, e)``. ``epochs`` caps how many epochs to run in this
    call (default: up to ``cfg.epochs``).
    """
    if not dataset:
        raise ValueError("empty training set")
    model = model.copy()
    opt = optimizer if optimizer is not None else Adam()
    frames = stack_frames(dataset)
    labels = np.array([s.label for s in dataset])
    val_frames = stack_frames(val) if val else None
    val_labels = np.array([s.label for s in val]) if val else None
    end = cfg.epochs if epochs is None else min(cfg.epochs, start_epoch + epochs)
    trace, steps = [], []
    for epoch in range(start_epoch, end):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        lr = cfg.lr_at(epoch)
        batch_losses = []
        for b, i in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[i : i + cfg.batch_size]
            value, grads = gradients(model, frames[idx], labels[idx])
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(epoch, b, value)
            if lr > 0:
                opt.step(model.params, grads, lr)
            batch_losses.append(value)
            steps.append(value)
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(batch_losses))}
        if val_frames is not None:
            p = model.predict_proba(val_frames)[:, 1]
            row["val_acc"] = float(np.mean((p >= 0.5).astype(int) == val_labels))
        else:
            row["val_acc"] = float("nan")
        trace.append(row)
    return TrainResult(model, trace, opt, end, steps)


def evaluate(model: _Model, dataset: list[SequenceSample], m_r: float, mode: str, seed: int = 0,
             background_scale: float = 1.0) -> dict:
    """Mask every sample at ``m_r`` and score Accuracy, macro-F1 and AUC."""
    masked = [apply_mask(s, m_r, mode, seed=seed, background_scale=background_scale) for s in dataset]
    labels = np.array([s.label for s in dataset])
    p_fake = model.predict_proba(stack_frames(masked))[:, 1] if masked else np.zeros(0)
    return summarize(labels, p_fake)


def l1_features(model: GraceModel, dataset: list[SequenceSample]) -> float:
    """Mean over samples of ``|X|_1`` of the assembled feature context."""
    X = model.features(model.as_vars(), stack_frames(dataset)).value
    return float(np.mean(np.abs(X).sum(axis=(-2, -1))))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def model_to_dict(model: _Model) -> dict:
    hyper = asdict(model.hyper) if hasattr(model, "hyper") else {}
    return {
        "kind": model.kind,
        "c_in": model.c_in,
        "hyper": hyper,
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
        "weights": {k: v.tolist() for k, v in model.params.items()},
    }


def model_from_dict(obj: dict) -> _Model:
    params = {k: np.array(v, dtype=float).reshape(obj["shapes"][k]) for k, v in obj["weights"].items()}
    if obj["kind"] == "grace":
        return GraceModel(Hyper(**obj["hyper"]), obj["c_in"], params)
    if obj["kind"] == "baseline":
        from .baseline import MeanPoolBaseline

        return MeanPoolBaseline(obj["c_in"], obj["hyper"]["c"], params)
    raise ValueError(f"unknown model kind {obj['kind']!r}")


def save_checkpoint(path, model: _Model, optimizer: Adam | None = None, epoch: int = 0,
                    train_cfg: TrainConfig | None = None, extra: dict | None = None) -> None:
    obj = {
        "format": "grace-checkpoint",
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "model": model_to_dict(model),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "train": asdict(train_cfg) if train_cfg is not None else None,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True) + "\n")


def load_checkpoint(path) -> dict:
    obj = json.loads(Path(path).read_text())
    if obj.get("format") != "grace-checkpoint":
        raise ValueError(f"{path} is not a checkpoint")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('version')}")
    return {
        "model": model_from_dict(obj["model"]),
        "optimizer": Adam.from_state(obj["optimizer"]) if obj["optimizer"] else None,
        "epoch": obj["epoch"],
        "train": TrainConfig(**obj["train"]) if obj["train"] else None,
        "extra": obj["extra"],
    }
