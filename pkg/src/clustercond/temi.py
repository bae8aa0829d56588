"""TEMI self-distillation clustering over fixed embeddings.

H student/teacher head pairs are stored as stacked arrays (leading axis = head)
so every layer runs as one batched matmul over all heads. Gradients are
derived by hand; ``tests/test_temi.py`` checks them against central finite
differences.

Head layout::

    Linear(D, hidden) -> GELU -> Linear(hidden, hidden) -> GELU
    -> Linear(hidden, bottleneck) -> L2 normalize -> Linear(bottleneck, C, bias=False)
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .checkpoint import read_blob, write_blob
from .dataset import FeatureSet, NeighborSets
from .errors import DataError, NumericalError, ParameterError
from .kmeans import ClusterAssignment
from .nn import AdamW, gelu, gelu_and_grad, softmax

EPS = 1e-12
PROB_FLOOR = 1e-300
PARAM_NAMES = ("W0", "b0", "W1", "b1", "W2", "b2", "W3")
CHECKPOINT_MAGIC = b"CCTM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TemiConfig:
    C: int
    H: int = 50
    hidden_dim: int = 512
    bottleneck_dim: int = 256
    gamma: float = 0.6
    momentum: float = 0.996
    temperature: float = 0.1
    m: int = 50
    epochs: int = 200
    batch_size: int = 512
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.C < 1 or self.H < 1:
            raise ParameterError("C and H must be >= 1")
        if not 0.5 < self.gamma <= 1.0:
            raise ParameterError(f"gamma must lie in (0.5, 1], got {self.gamma}")
        if not 0.0 < self.momentum < 1.0:
            raise ParameterError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.temperature <= 0:
            raise ParameterError("temperature must be positive")
        if min(self.hidden_dim, self.bottleneck_dim, self.m, self.epochs, self.batch_size) < 1:
            raise ParameterError("sizes and counts must be positive")

    def replace(self, **kw) -> TemiConfig:
        return dataclasses.replace(self, **kw)


@dataclass(eq=False)
class PairBatch:
    anchor_indices: np.ndarray
    neighbor_indices: np.ndarray

    def __post_init__(self):
        self.anchor_indices = np.asarray(self.anchor_indices, dtype=np.int64)
        self.neighbor_indices = np.asarray(self.neighbor_indices, dtype=np.int64)
        if self.anchor_indices.shape != self.neighbor_indices.shape:
            raise DataError("anchor and neighbor index vectors differ in length")

    def __len__(self):
        return self.anchor_indices.size

    def validate(self, neighbors: NeighborSets) -> None:
        rows = neighbors.neighbors[self.anchor_indices]
        if not np.all((rows == self.neighbor_indices[:, None]).any(axis=1)):
            raise DataError("pair batch contains a neighbor outside its anchor's set")


@dataclass(eq=False)
class TemiModel:
    config: TemiConfig
    dim: int
    student: dict
    teacher: dict
    qt_tilde: np.ndarray
    per_head_loss: np.ndarray
    step: int = 0
    optimizer: AdamW | None = None
    _epoch_losses: list = field(default_factory=list, repr=False)

    @property
    def H(self) -> int:
        return self.config.H

    @property
    def C(self) -> int:
        return self.config.C

    def best_head(self) -> int:
        return int(np.argmin(self.per_head_loss))

    def head_params(self, i: int, which: str = "teacher") -> dict:
        src = self.teacher if which == "teacher" else self.student
        return {k: v[i] for k, v in src.items()}

    def save(self, path) -> None:
        meta = {"config": dataclasses.asdict(self.config), "dim": self.dim, "step": self.step,
                "per_head_loss": self.per_head_loss.tolist()}
        tensors = {f"student.{k}": self.student[k] for k in PARAM_NAMES}
        tensors.update({f"teacher.{k}": self.teacher[k] for k in PARAM_NAMES})
        tensors["qt_tilde"] = self.qt_tilde
        write_blob(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, meta, tensors, width=4)

    @classmethod
    def load(cls, path) -> TemiModel:
        meta, t = read_blob(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        cfg = TemiConfig(**meta["config"])
        return cls(cfg, meta["dim"],
                   {k: t[f"student.{k}"] for k in PARAM_NAMES},
                   {k: t[f"teacher.{k}"] for k in PARAM_NAMES},
                   t["qt_tilde"], np.array(meta["per_head_loss"]), meta["step"])


# ---------------------------------------------------------------------------
# Construction


def temi_init(config: TemiConfig, D: int) -> TemiModel:
    rng = np.random.default_rng(config.seed)
    H, hid, bot, C = config.H, config.hidden_dim, config.bottleneck_dim, config.C

    def dense(fan_in, fan_out):
        return rng.standard_normal((H, fan_in, fan_out)) / np.sqrt(fan_in)

    student = {
        "W0": dense(D, hid), "b0": np.zeros((H, hid)),
        "W1": dense(hid, hid), "b1": np.zeros((H, hid)),
        "W2": dense(hid, bot), "b2": np.zeros((H, bot)),
        "W3": dense(bot, C),
    }
    teacher = {k: v.copy() for k, v in student.items()}
    return TemiModel(
        config, D, student, teacher,
        qt_tilde=np.full((H, C), 1.0 / C),
        per_head_loss=np.zeros(H),
        optimizer=AdamW(config.learning_rate, weight_decay=config.weight_decay,
                        decay=("W0", "W1", "W2", "W3")),
    )


# ---------------------------------------------------------------------------
# Forward / backward


def probs_from_logits(logits, temperature: float) -> np.ndarray:
    """Temperature softmax, floored to stay strictly positive."""
    return np.maximum(softmax(logits, temperature), PROB_FLOOR)


def _forward(params: dict, x: np.ndarray, temperature: float, grad: bool = False):
    """Logits for all heads: returns ``(logits (H, n, C), cache)``.

    ``cache`` is None unless ``grad`` is set.
    """
    act = gelu_and_grad if grad else gelu
    a0 = np.matmul(x, params["W0"])
    a0 += params["b0"][:, None, :]
    h0 = act(a0)
    if grad:
        h0, d0 = h0
    a1 = h0 @ params["W1"]
    a1 += params["b1"][:, None, :]
    h1 = act(a1)
    if grad:
        h1, d1 = h1
    u = h1 @ params["W2"]
    u += params["b2"][:, None, :]
    r = np.sqrt((u * u).sum(-1, keepdims=True) + EPS)
    v = u / r
    logits = v @ params["W3"]
    return logits, ((x, d0, h0, d1, h1, r, v) if grad else None)


def _backward(params: dict, cache, dlogits: np.ndarray) -> dict:
    x, d0, h0, d1, h1, r, v = cache
    g = {"W3": v.transpose(0, 2, 1) @ dlogits}
    dv = dlogits @ params["W3"].transpose(0, 2, 1)
    du = (dv - v * (v * dv).sum(-1, keepdims=True)) / r
    g["W2"] = h1.transpose(0, 2, 1) @ du
    g["b2"] = du.sum(1)
    da1 = du @ params["W2"].transpose(0, 2, 1)
    da1 *= d1
    g["W1"] = h0.transpose(0, 2, 1) @ da1
    g["b1"] = da1.sum(1)
    da0 = da1 @ params["W1"].transpose(0, 2, 1)
    da0 *= d0
    g["W0"] = np.matmul(x.T, da0)
    g["b0"] = da0.sum(1)
    return g


def head_probs(params: dict, z, temperature: float) -> np.ndarray:
    """Probabilities of a single head (unstacked params) for feature row(s) ``z``."""
    z = np.asarray(z, dtype=np.float64)
    stacked = {k: np.asarray(v)[None] for k, v in params.items()}
    logits, _ = _forward(stacked, np.atleast_2d(z), temperature)
    out = probs_from_logits(logits[0], temperature)
    return out[0] if z.ndim == 1 else out


def all_head_probs(model: TemiModel, x, which: str = "teacher") -> np.ndarray:
    params = model.teacher if which == "teacher" else model.student
    logits, _ = _forward(params, np.asarray(x, dtype=np.float64), model.config.temperature)
    return probs_from_logits(logits, model.config.temperature)


# ---------------------------------------------------------------------------
# Loss


def pair_loss(qs_x, qt_xp, qt_heads_x, qt_heads_xp, qt_tilde, gamma: float) -> float:
    """Per-head TEMI loss for one ordered pair, given probability vectors.

    ``qs_x``/``qt_xp``: head-i student probs of x and teacher probs of x'.
    ``qt_heads_x``/``qt_heads_xp``: (H, C) teacher probs of all heads, which
    give the pair-agreement weight. ``qt_tilde``: head-i cluster prior.
    """
    w = float(np.mean(np.sum(np.asarray(qt_heads_x) * np.asarray(qt_heads_xp), axis=-1)))
    prior = np.maximum(np.asarray(qt_tilde, dtype=np.float64), EPS)
    inner = np.sum((np.asarray(qs_x) * np.asarray(qt_xp)) ** gamma / prior)
    return -w * float(np.log(max(inner, EPS)))


def temi_pair_loss(model: TemiModel, x, xp, i: int) -> float:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xp = np.atleast_2d(np.asarray(xp, dtype=np.float64))
    tx, txp = all_head_probs(model, x)[:, 0], all_head_probs(model, xp)[:, 0]
    sx = all_head_probs(model, x, "student")[i, 0]
    return pair_loss(sx, txp[i], tx, txp, model.qt_tilde[i], model.config.gamma)


def _ordered_terms(log_s, t_other, weight, log_prior, gamma):
    """Loss (H, B) and student-prob responsibilities for one pair ordering."""
    with np.errstate(divide="ignore"):
        log_a = gamma * (log_s + np.log(t_other)) - log_prior[:, None, :]
    log_inner = logsumexp(log_a, axis=-1)
    floored = log_inner < np.log(EPS)
    loss = -weight[None, :] * np.maximum(log_inner, np.log(EPS))
    resp = np.exp(log_a - log_inner[..., None])
    resp[floored] = 0.0
    return loss, resp, floored


def batch_objective(model: TemiModel, xa, xn, grad: bool = True):
    """Symmetrized loss over a batch of (anchor, neighbor) feature rows.

    Returns ``(per_head (H,), mean, grads or None, teacher_probs (H, 2B, C))``.
    Teacher outputs and the pair-agreement weight carry no gradient.
    """
    cfg = model.config
    B = xa.shape[0]
    if B == 0:
        raise DataError("empty pair batch")
    x = np.concatenate([np.asarray(xa, np.float64), np.asarray(xn, np.float64)])
    t_logits, _ = _forward(model.teacher, x, cfg.temperature)
    t = probs_from_logits(t_logits, cfg.temperature)
    s_logits, cache = _forward(model.student, x, cfg.temperature, grad=grad)
    z = s_logits / cfg.temperature
    log_s = z - logsumexp(z, axis=-1, keepdims=True)
    s = np.exp(log_s)
    weight = np.mean(np.sum(t[:, :B] * t[:, B:], axis=-1), axis=0)  # (B,)
    log_prior = np.log(np.maximum(model.qt_tilde, EPS))
    la, ra, fa = _ordered_terms(log_s[:, :B], t[:, B:], weight, log_prior, cfg.gamma)
    lb, rb, fb = _ordered_terms(log_s[:, B:], t[:, :B], weight, log_prior, cfg.gamma)
    per_head = 0.5 * (la + lb).mean(axis=1)
    if not np.all(np.isfinite(per_head)):
        raise NumericalError("non-finite TEMI loss")
    mean = float(per_head.mean())
    if not grad:
        return per_head, mean, None, t
    # d(mean)/d(logit) = (w * gamma / tau) * (s - resp) / (2 B H) per ordering
    scale = cfg.gamma / (cfg.temperature * 2.0 * B * model.H)
    resp = np.concatenate([ra, rb], axis=1)
    dz = s - resp
    dz[:, :B][fa] = 0.0
    dz[:, B:][fb] = 0.0
    dlogits = scale * np.concatenate([weight, weight])[None, :, None] * dz
    return per_head, mean, _backward(model.student, cache, dlogits), t


def temi_loss(model: TemiModel, fs_or_x, batch: PairBatch):
    x = fs_or_x.features if isinstance(fs_or_x, FeatureSet) else np.asarray(fs_or_x)
    if len(batch) == 0:
        raise DataError("empty pair batch")
    per_head, mean, _, _ = batch_objective(
        model, x[batch.anchor_indices], x[batch.neighbor_indices], grad=False)
    return per_head, mean


# ---------------------------------------------------------------------------
# Updates


def teacher_ema_update(model: TemiModel, momentum: float | None = None) -> None:
    """``teacher <- lam * teacher + (1 - lam) * student``; ``momentum`` overrides the config."""
    lam = model.config.momentum if momentum is None else momentum
    for k in PARAM_NAMES:
        model.teacher[k] *= lam
        model.teacher[k] += (1.0 - lam) * model.student[k]


def cluster_dist_ema_update(model: TemiModel, teacher_probs: np.ndarray,
                            momentum: float | None = None) -> None:
    """``teacher_probs``: (H, n, C) teacher probabilities of the current batch."""
    lam = model.config.momentum if momentum is None else momentum
    model.qt_tilde = lam * model.qt_tilde + (1.0 - lam) * np.asarray(teacher_probs).mean(axis=1)


def temi_train_step(model: TemiModel, fs_or_x, batch: PairBatch) -> float:
    x = fs_or_x.features if isinstance(fs_or_x, FeatureSet) else np.asarray(fs_or_x)
    per_head, mean, grads, t = batch_objective(
        model, x[batch.anchor_indices], x[batch.neighbor_indices])
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k} at step {model.step}")
    model.optimizer.step(model.student, grads)
    teacher_ema_update(model)
    cluster_dist_ema_update(model, t)
    model.step += 1
    model._epoch_losses.append(per_head)
    return mean


def epoch_batches(neighbors: NeighborSets, batch_size: int, rng: np.random.Generator):
    """One shuffled pass: every sample is an anchor once, with a random neighbor."""
    n = neighbors.neighbors.shape[0]
    order = rng.permutation(n)
    pick = rng.integers(neighbors.m, size=n)
    partner = neighbors.neighbors[order, pick]
    for s in range(0, n, batch_size):
        yield PairBatch(order[s : s + batch_size], partner[s : s + batch_size])


def temi_fit(fs: FeatureSet, neighbors: NeighborSets, config: TemiConfig, log=None):
    """Train a fresh model; returns ``(model, curve)``.

    ``curve`` rows are ``(step, mean_loss, per_head_min)``. ``per_head_loss``
    ends as the mean per-head loss over the final epoch.
    """
    model = temi_init(config, fs.dim)
    x = fs.features.astype(np.float64)
    rng = np.random.default_rng([config.seed, 1])
    curve = []
    for epoch in range(config.epochs):
        model._epoch_losses = []
        for batch in epoch_batches(neighbors, config.batch_size, rng):
            loss = temi_train_step(model, x, batch)
            curve.append((model.step, loss, float(model._epoch_losses[-1].min())))
        model.per_head_loss = np.mean(model._epoch_losses, axis=0)
        if log is not None:
            log(epoch, model)
    return model, curve


# ---------------------------------------------------------------------------
# Inference


def temi_assign(model: TemiModel, fs: FeatureSet, head: int | None = None) -> ClusterAssignment:
    i = model.best_head() if head is None else head
    probs = all_head_probs(model, fs.features.astype(np.float64))[i]
    return ClusterAssignment.from_assignments(np.argmax(probs, axis=1), model.C, "temi")


def msp_confidence(model: TemiModel, fs_or_x, head: int | None = None) -> np.ndarray:
    x = fs_or_x.features if isinstance(fs_or_x, FeatureSet) else np.asarray(fs_or_x)
    i = model.best_head() if head is None else head
    return all_head_probs(model, np.asarray(x, np.float64))[i].max(axis=1)
