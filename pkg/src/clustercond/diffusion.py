"""Cluster-conditional EDM diffusion on low-dimensional data.

The denoiser is ``D(x, s, c) = c_skip(s) x + c_out(s) F(c_in(s) x, c_noise(s), c)``
with an MLP ``F``. The condition embedding (row ``c`` of a ``(C + 1) x hidden``
table; row ``C`` means "unconditional") is added to the first hidden layer.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .checkpoint import read_blob, write_blob
from .errors import DataError, NumericalError, ParameterError
from .nn import AdamW, silu, silu_grad

CHECKPOINT_MAGIC = b"CCDM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    P_mean: float = -1.2
    P_std: float = 1.2
    num_steps: int = 18

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ParameterError("need 0 < sigma_min < sigma_max")
        if self.num_steps < 2:
            raise ParameterError(f"num_steps must be >= 2, got {self.num_steps}")
        if self.P_std < 0:
            raise ParameterError("P_std must be non-negative")

    def replace(self, **kw) -> NoiseSchedule:
        return dataclasses.replace(self, **kw)

    def sigmas(self) -> np.ndarray:
        """Sampling grid: ``num_steps`` rho-spaced levels followed by 0."""
        i = np.arange(self.num_steps)
        lo, hi = self.sigma_min ** (1 / self.rho), self.sigma_max ** (1 / self.rho)
        s = (hi + i / (self.num_steps - 1) * (lo - hi)) ** self.rho
        return np.append(s, 0.0)


@dataclass(frozen=True)
class TrainRunConfig:
    M_img: int = 200_000
    batch_size: int = 256
    learning_rate: float = 2e-3
    seed: int = 0
    condition_source: str = "cluster"
    milestones: int = 10
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if self.batch_size < 1 or self.M_img < self.batch_size:
            raise ParameterError("need 1 <= batch_size <= M_img")
        if self.condition_source not in ("cluster", "labels", "none"):
            raise ParameterError(f"unknown condition_source {self.condition_source!r}")
        if self.milestones < 1:
            raise ParameterError("milestones must be >= 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ParameterError(f"unknown lr_schedule {self.lr_schedule!r}")

    def replace(self, **kw) -> TrainRunConfig:
        return dataclasses.replace(self, **kw)

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant":
            return self.learning_rate
        frac = step / (self.M_img // self.batch_size)
        return self.learning_rate * 0.5 * (1.0 + np.cos(np.pi * frac))

    def milestone_samples(self) -> list[int]:
        return [round(self.M_img * (k + 1) / self.milestones) for k in range(self.milestones)]


# ---------------------------------------------------------------------------
# Preconditioning


def preconditioning(sigma, sigma_data: float):
    """``(c_skip, c_out, c_in, c_noise)`` for noise level(s) ``sigma``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    s2, d2 = sigma * sigma, sigma_data * sigma_data
    c_skip = d2 / (s2 + d2)
    c_out = sigma * sigma_data / np.sqrt(s2 + d2)
    c_in = 1.0 / np.sqrt(s2 + d2)
    c_noise = 0.25 * np.log(sigma)
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma, sigma_data: float):
    sigma = np.asarray(sigma, dtype=np.float64)
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def sample_training_sigma(schedule: NoiseSchedule, rng: np.random.Generator, size=None):
    return np.exp(schedule.P_mean + schedule.P_std * rng.standard_normal(size))


def score_from_denoiser(x, sigma, x_hat):
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ParameterError("sigma must be positive")
    if sigma.ndim == 1:
        sigma = sigma[:, None]
    return (np.asarray(x_hat) - np.asarray(x)) / sigma**2


# ---------------------------------------------------------------------------
# Model


def _sigma_features(c_noise: np.ndarray, n_freq: int) -> np.ndarray:
    c = c_noise[:, None]
    k = 2.0 ** np.arange(n_freq)[None, :]
    return np.concatenate([c, np.sin(k * c), np.cos(k * c)], axis=1)


@dataclass(eq=False)
class DiffusionModel:
    params: dict
    data_dim: int
    num_conditions: int
    sigma_data: float = 0.5
    hidden: int = 128
    depth: int = 3
    n_freq: int = 4

    @classmethod
    def create(cls, data_dim: int, num_conditions: int, sigma_data: float = 0.5,
               hidden: int = 128, depth: int = 3, n_freq: int = 4, seed: int = 0) -> DiffusionModel:
        if num_conditions < 0 or depth < 1:
            raise ParameterError("num_conditions must be >= 0 and depth >= 1")
        rng = np.random.default_rng([seed, 7])
        in_dim = data_dim + 1 + 2 * n_freq
        p = {}
        fan = in_dim
        for k in range(depth):
            p[f"W{k}"] = rng.standard_normal((fan, hidden)) / np.sqrt(fan)
            p[f"b{k}"] = np.zeros(hidden)
            fan = hidden
        p["Wout"] = np.zeros((hidden, data_dim))
        p["bout"] = np.zeros(data_dim)
        # separate stream so the table size does not perturb the shared weights
        p["E"] = np.random.default_rng([seed, 8]).standard_normal((num_conditions + 1, hidden))
        return cls(p, data_dim, num_conditions, sigma_data, hidden, depth, n_freq)

    @property
    def unconditional_id(self) -> int:
        return self.num_conditions

    def _check_conditions(self, c, n):
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
        if c.size and (c.min() < 0 or c.max() > self.num_conditions):
            raise DataError(f"condition ids must lie in [0, {self.num_conditions}]")
        return c

    def net(self, x_in, c_noise, c, grad: bool = False):
        """Raw network ``F``; returns ``(out, cache)``."""
        p = self.params
        h = np.concatenate([x_in, _sigma_features(c_noise, self.n_freq)], axis=1)
        inputs, derivs = [h], []
        for k in range(self.depth):
            a = h @ p[f"W{k}"]
            a += p[f"b{k}"]
            if k == 0:
                a += p["E"][c]
            if grad:
                derivs.append(silu_grad(a))
            h = silu(a)
            inputs.append(h)
        out = h @ p["Wout"] + p["bout"]
        return out, (inputs, derivs, c)

    def net_backward(self, cache, dout) -> dict:
        p = self.params
        inputs, derivs, c = cache
        g = {"Wout": inputs[-1].T @ dout, "bout": dout.sum(0)}
        dh = dout @ p["Wout"].T
        for k in reversed(range(self.depth)):
            da = dh * derivs[k]
            g[f"W{k}"] = inputs[k].T @ da
            g[f"b{k}"] = da.sum(0)
            if k == 0:
                gE = np.zeros_like(p["E"])
                np.add.at(gE, c, da)
                g["E"] = gE
            else:
                dh = da @ p[f"W{k}"].T
        return g

    def denoise(self, x, sigma, c=None):
        """Preconditioned denoiser output for rows ``x`` at noise level(s) ``sigma``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
        if np.any(sigma <= 0):
            raise ParameterError("sigma must be positive")
        c = self._check_conditions(self.unconditional_id if c is None else c, n)
        c_skip, c_out, c_in, c_noise = preconditioning(sigma, self.sigma_data)
        F, _ = self.net(c_in[:, None] * x, c_noise, c)
        return c_skip[:, None] * x + c_out[:, None] * F

    __call__ = denoise

    def save(self, path, extra_meta: dict | None = None, extra_tensors: dict | None = None) -> None:
        meta = {"data_dim": self.data_dim, "num_conditions": self.num_conditions,
                "sigma_data": self.sigma_data, "hidden": self.hidden, "depth": self.depth,
                "n_freq": self.n_freq, "param_names": list(self.params)}
        if extra_meta:
            meta["extra"] = extra_meta
        tensors = {f"param.{k}": v for k, v in self.params.items()}
        tensors.update(extra_tensors or {})
        write_blob(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, meta, tensors, width=8)

    @classmethod
    def load(cls, path, with_extra: bool = False):
        meta, t = read_blob(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        params = {k: t[f"param.{k}"] for k in meta["param_names"]}
        model = cls(params, meta["data_dim"], meta["num_conditions"], meta["sigma_data"],
                    meta["hidden"], meta["depth"], meta["n_freq"])
        if not with_extra:
            return model
        rest = {k: v for k, v in t.items() if not k.startswith("param.")}
        return model, meta.get("extra", {}), rest


def denoise(model: DiffusionModel, x, sigma, c=None):
    return model.denoise(x, sigma, c)


# ---------------------------------------------------------------------------
# Loss


def diffusion_loss(model: DiffusionModel, y, c, sigma, noise, grad: bool = True):
    """Weighted L2 denoising loss for given noise draws.

    ``sigma`` has one level per row, ``noise`` is standard normal (scaled by
    ``sigma`` here). Returns ``(loss, grads or None)``.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    sigma = np.asarray(sigma, dtype=np.float64).reshape(n)
    c = model._check_conditions(c, n)
    c_skip, c_out, c_in, c_noise = preconditioning(sigma, model.sigma_data)
    x = y + sigma[:, None] * noise
    F, cache = model.net(c_in[:, None] * x, c_noise, c, grad=grad)
    D = c_skip[:, None] * x + c_out[:, None] * F
    w = loss_weight(sigma, model.sigma_data)
    resid = D - y
    per = w * (resid * resid).sum(1)
    loss = float(per.mean())
    if not np.isfinite(loss):
        bad = sigma[~np.isfinite(per)]
        raise NumericalError(f"non-finite diffusion loss at sigma={bad[:5].tolist()}")
    if not grad:
        return loss, None
    dF = (2.0 / n) * (w * c_out)[:, None] * resid
    return loss, model.net_backward(cache, dF)


def diffusion_loss_rng(model, y, c, schedule: NoiseSchedule, rng: np.random.Generator):
    """Draw sigma and noise from ``rng``, then evaluate the loss with gradients."""
    n = np.asarray(y).shape[0]
    sigma = sample_training_sigma(schedule, rng, n)
    noise = rng.standard_normal((n, model.data_dim))
    return diffusion_loss(model, y, c, sigma, noise)


# ---------------------------------------------------------------------------
# Training


class DiffusionTrainer:
    """Minibatch Adam loop with resumable state.

    Data order comes from its own stream seeded by ``cfg.seed`` alone, so runs
    that differ only in their conditions see identical minibatches.
    """

    def __init__(self, model: DiffusionModel, data, conditions, cfg: TrainRunConfig,
                 schedule: NoiseSchedule):
        self.model = model
        self.data = np.asarray(data, dtype=np.float64)
        n = self.data.shape[0]
        if n < cfg.batch_size:
            raise ParameterError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
        self.conditions = model._check_conditions(conditions, n).copy()
        self.cfg = cfg
        self.schedule = schedule
        self.opt = AdamW(cfg.learning_rate)
        self.data_rng = np.random.default_rng([cfg.seed, 0])
        self.noise_rng = np.random.default_rng([cfg.seed, 1])
        self.perm = self.data_rng.permutation(n)
        self.cursor = 0
        self.step = 0
        self.samples_seen = 0
        self.curve: list[tuple[int, float]] = []

    @property
    def total_steps(self) -> int:
        return self.cfg.M_img // self.cfg.batch_size

    def next_batch(self) -> np.ndarray:
        b = self.cfg.batch_size
        if self.cursor + b > self.perm.size:
            self.perm = self.data_rng.permutation(self.perm.size)
            self.cursor = 0
        idx = self.perm[self.cursor : self.cursor + b]
        self.cursor += b
        return idx

    def train_step(self) -> float:
        idx = self.next_batch()
        loss, grads = diffusion_loss_rng(
            self.model, self.data[idx], self.conditions[idx], self.schedule, self.noise_rng)
        if loss > 1e6:
            raise NumericalError(f"diffusion training diverged: loss {loss:.3g} at step {self.step}")
        self.opt.lr = self.cfg.lr_at(self.step)
        self.opt.step(self.model.params, grads)
        self.step += 1
        self.samples_seen += idx.size
        self.curve.append((self.samples_seen, loss))
        return loss

    def run(self, on_milestone: Callable | None = None) -> list[tuple[int, float]]:
        """Train until ``M_img`` samples; ``on_milestone(trainer, k)`` fires at each checkpoint.

        Milestone ``k`` fires after the last step that does not overshoot its
        sample mark, so a milestone never reports more samples than its mark.
        """
        marks = self.cfg.milestone_samples()
        b = self.cfg.batch_size
        done = sum(1 for m in marks if self.samples_seen + b > m) if self.step else 0
        while self.step < self.total_steps:
            self.train_step()
            while done < len(marks) and (self.samples_seen + b > marks[done]
                                         or self.step == self.total_steps):
                if on_milestone is not None:
                    on_milestone(self, done)
                done += 1
        return self.curve

    # -- checkpointing --------------------------------------------------------

    def save(self, path) -> None:
        opt_meta, opt_t = self.opt.state()
        meta = {
            "train": dataclasses.asdict(self.cfg),
            "schedule": dataclasses.asdict(self.schedule),
            "step": self.step, "samples_seen": self.samples_seen, "cursor": self.cursor,
            "data_rng": self.data_rng.bit_generator.state,
            "noise_rng": self.noise_rng.bit_generator.state,
            "optimizer": opt_meta,
        }
        tensors = {f"opt.{k}": v for k, v in opt_t.items()}
        tensors["perm"] = self.perm.astype(np.float64)
        self.model.save(path, meta, tensors)

    @classmethod
    def resume(cls, path, data, conditions) -> DiffusionTrainer:
        model, meta, t = DiffusionModel.load(path, with_extra=True)
        tr = cls(model, data, conditions, TrainRunConfig(**meta["train"]),
                 NoiseSchedule(**meta["schedule"]))
        tr.opt = AdamW.from_state(meta["optimizer"],
                                  {k[4:]: v for k, v in t.items() if k.startswith("opt.")})
        tr.data_rng.bit_generator.state = meta["data_rng"]
        tr.noise_rng.bit_generator.state = meta["noise_rng"]
        tr.perm = t["perm"].astype(np.int64)
        tr.cursor, tr.step, tr.samples_seen = meta["cursor"], meta["step"], meta["samples_seen"]
        return tr


def train_diffusion(model: DiffusionModel, data, conditions, cfg: TrainRunConfig,
                    schedule: NoiseSchedule | None = None, on_milestone=None):
    """Train ``model`` in place; returns the ``(samples_seen, loss)`` curve."""
    trainer = DiffusionTrainer(model, data, conditions, cfg, schedule or NoiseSchedule())
    return trainer.run(on_milestone)


# ---------------------------------------------------------------------------
# Sampling


def sample_conditions(q, n: int, rng: np.random.Generator, uniform: bool = False) -> np.ndarray:
    """I.i.d. categorical condition ids from ``q`` (or uniform over ``len(q)``)."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.size == 0 or np.any(q < 0) or abs(q.sum() - 1.0) > 1e-6:
        raise ParameterError("q must be a non-negative vector summing to 1")
    if uniform:
        return rng.integers(q.size, size=n)
    return rng.choice(q.size, size=n, p=q / q.sum())


def heun_sample(denoiser, n: int | None, conditions, schedule: NoiseSchedule,
                rng: np.random.Generator | None = None, x0=None, solver: str = "heun",
                chunk: int = 8192) -> np.ndarray:
    """Deterministic probability-flow ODE sampling from ``sigma_max`` to 0.

    ``denoiser(x, sigma, c)`` may be a :class:`DiffusionModel` or any callable.
    Either ``rng`` (initial noise drawn here) or ``x0`` (already scaled by
    ``sigma_max``) must be given.
    """
    if schedule.num_steps < 2:
        raise ParameterError("num_steps must be >= 2")
    if solver not in ("heun", "euler"):
        raise ParameterError(f"unknown solver {solver!r}")
    if x0 is None:
        dim = denoiser.data_dim
        x0 = schedule.sigma_max * rng.standard_normal((n, dim))
    x = np.array(x0, dtype=np.float64)
    n = x.shape[0]
    conditions = np.broadcast_to(np.asarray(conditions), (n,))
    sig = schedule.sigmas()
    out = np.empty_like(x)
    for s in range(0, n, chunk):
        xc, cc = x[s : s + chunk], conditions[s : s + chunk]
        for i in range(schedule.num_steps):
            s_cur, s_next = sig[i], sig[i + 1]
            d = (xc - denoiser(xc, s_cur, cc)) / s_cur
            x_next = xc + (s_next - s_cur) * d
            if solver == "heun" and s_next > 0:
                d2 = (x_next - denoiser(x_next, s_next, cc)) / s_next
                x_next = xc + (s_next - s_cur) * 0.5 * (d + d2)
            xc = x_next
        out[s : s + chunk] = xc
    return out
