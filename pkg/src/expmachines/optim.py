"""Training: the linear warm start, stochastic Riemannian descent with
Armijo backtracking, and the core-wise SGD baseline.

Both trainers minimize

    L_S(W) = 1/|S| sum_{f in S} l(<X_f, W>, y_f) + lam / 2 * ||W||_F^2

where the gradient always comes from the current mini-batch and the line
search evaluates ``S`` = that mini-batch (``armijo_scope="batch"``) or the
whole training set (``armijo_scope="full"``).
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, NamedTuple

import numpy as np

from .data import Dataset
from .model import EncodedBatch, LossSpec, left_states, linear_init, outer_sum, predict_encoded, right_states
from .riemannian import TangentVector, riemannian_gradient_encoded, step_point, tangent_space
from .tt import TTTensor, round_cores, tt_norm, tt_random


class ConfigError(ValueError):
    pass


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    rank: int = 8
    iterations: int = 100
    batch_size: int = 100
    lam: float = 0.0
    rho: float = 0.5
    c1: float = 0.1
    keep_prob: float = 1.0
    seed: int = 0
    loss: str = "logistic"
    alpha_min: float = 1e-12
    max_backtracks: int = 40
    optimizer: str = "riemannian"
    learning_rate: float = 1.0
    armijo_scope: str = "batch"
    init: str = "linear"
    penalty: str = "l2"
    full_loss_every: int = 0

    def __post_init__(self):
        problems = []
        if not (isinstance(self.rank, int) and self.rank >= 1):
            problems.append("rank: must be an integer >= 1")
        if self.init == "linear" and self.rank < 2:
            problems.append("rank: linear initialization needs rank >= 2")
        if self.iterations < 0:
            problems.append("iterations: must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size: must be >= 1")
        if not self.lam >= 0:
            problems.append("lam: must be >= 0")
        if not 0 < self.rho < 1:
            problems.append("rho: must lie in (0, 1)")
        if not 0 < self.c1 < 0.5:
            problems.append("c1: must lie in (0, 0.5)")
        if not 0 < self.keep_prob <= 1:
            problems.append("keep_prob: must lie in (0, 1]")
        if self.loss not in ("logistic", "squared"):
            problems.append("loss: must be 'logistic' or 'squared'")
        if not self.alpha_min > 0:
            problems.append("alpha_min: must be > 0")
        if self.max_backtracks < 1:
            problems.append("max_backtracks: must be >= 1")
        if self.optimizer not in ("riemannian", "core_sgd"):
            problems.append("optimizer: must be 'riemannian' or 'core_sgd'")
        if not self.learning_rate > 0:
            problems.append("learning_rate: must be > 0")
        if self.armijo_scope not in ("batch", "full"):
            problems.append("armijo_scope: must be 'batch' or 'full'")
        if self.init not in ("linear", "random"):
            problems.append("init: must be 'linear' or 'random'")
        if self.penalty != "l2":
            if self.optimizer == "riemannian":
                problems.append(
                    "penalty: only 'l2' keeps the projected gradient at rank 2r on the Riemannian path"
                )
            else:
                problems.append("penalty: only 'l2' is supported")
        if self.full_loss_every < 0:
            problems.append("full_loss_every: must be >= 0")
        if problems:
            raise ConfigError("invalid training config: " + "; ".join(problems))

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string or typed values, e.g. a parsed key=value file."""
        kinds = {f.name: f.type for f in fields(cls)}
        known = {}
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name not in kinds:
                raise ConfigError(f"unknown config field {key!r}")
            default = getattr(cls, name)
            try:
                if isinstance(default, bool):
                    known[name] = str(raw).lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    known[name] = int(raw)
                elif isinstance(default, float):
                    known[name] = float(raw)
                else:
                    known[name] = str(raw)
            except ValueError:
                raise ConfigError(f"{name}: cannot parse {raw!r}") from None
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TraceRecord:
    iter: int
    epoch: float
    alpha: float
    batch_loss: float
    full_loss: float | None
    grad_norm: float
    backtracks: int
    wall_ms: float
    loss_before: float = math.nan
    accepted: bool = True


TRACE_COLUMNS = ("iter", "alpha", "batch_loss", "full_loss", "grad_norm", "backtracks", "wall_ms")


@dataclass
class TrainTrace:
    records: list[TraceRecord] = field(default_factory=list)
    stalled: bool = False
    linear_converged: bool | None = None

    def append(self, rec: TraceRecord):
        if self.records and rec.iter <= self.records[-1].iter:
            raise ValueError("trace iterations must increase")
        self.records.append(rec)

    def column(self, name) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records])

    def to_csv(self, include_wall=True) -> str:
        lines = [",".join(TRACE_COLUMNS)]
        for r in self.records:
            vals = [
                str(r.iter),
                repr(r.alpha),
                repr(r.batch_loss),
                "" if r.full_loss is None else repr(r.full_loss),
                repr(r.grad_norm),
                str(r.backtracks),
                f"{r.wall_ms:.3f}" if include_wall else "",
            ]
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"


class LinearFit(NamedTuple):
    w: np.ndarray
    b: float
    converged: bool
    iterations: int


def _linear_objective(Phi, y, loss, lam):
    def f(w, b):
        yhat = Phi @ w + b
        return float(np.sum(loss.value(yhat, y)) + 0.5 * lam * (w @ w))

    def grad(w, b):
        yhat = Phi @ w + b
        g = loss.deriv(yhat, y)
        return Phi.T @ g + lam * w, float(np.sum(g))

    return f, grad


def train_linear(
    ds: Dataset | np.ndarray,
    lam: float = 0.0,
    loss: LossSpec | str = "logistic",
    y=None,
    *,
    tol: float = 1e-6,
    max_iter: int = 20000,
) -> LinearFit:
    """Fit ``sum l(<phi, w> + b, y) + lam/2 ||w||^2`` by full-batch gradient descent.

    ``phi`` are the order-one features of the object tensors, which are the
    raw features for a plain numeric schema. Steps are chosen by Armijo
    backtracking, starting from twice the previous accepted step. Stops once
    the gradient norm drops below ``tol``; otherwise returns the last iterate
    with ``converged=False`` and a warning.
    """
    loss = LossSpec(loss) if isinstance(loss, str) else loss
    if isinstance(ds, Dataset):
        Phi = ds.encoded().linear_features()
        y = ds.y
    else:
        Phi = np.asarray(ds, dtype=np.float64)
    y = loss.check_labels(y)
    if Phi.shape[0] == 0:
        raise ValueError("train_linear needs a nonempty dataset")
    f, grad = _linear_objective(Phi, y, loss, lam)
    p = Phi.shape[1]
    w, b = np.zeros(p), 0.0
    fx = f(w, b)
    # A step of 1/L is a guaranteed descent step, so backtracking stops there
    # even when the sufficient-decrease test is lost in roundoff.
    curv = 2.0 if loss.kind == "squared" else 0.25
    aug = np.hstack([Phi, np.ones((Phi.shape[0], 1))])
    lipschitz = curv * np.linalg.norm(aug, 2) ** 2 + lam
    safe = 1.0 / lipschitz if lipschitz > 0 else 1.0
    step = safe
    for it in range(max_iter):
        gw, gb = grad(w, b)
        gsq = float(gw @ gw + gb * gb)
        if math.sqrt(gsq) <= tol:
            return LinearFit(w, b, True, it)
        step *= 2.0
        while True:
            w_new, b_new = w - step * gw, b - step * gb
            f_new = f(w_new, b_new)
            if f_new <= fx - 0.5 * step * gsq or step <= safe:
                break
            step = max(0.5 * step, safe)
        w, b, fx = w_new, b_new, f_new
    warnings.warn("linear model did not reach the gradient tolerance; returning the last iterate")
    return LinearFit(w, b, False, max_iter)


def apply_dropout(x, p: float, rng) -> np.ndarray:
    """Zero each coordinate of ``x`` independently with probability ``1 - p``."""
    x = np.asarray(x, dtype=np.float64)
    if p >= 1.0:
        return x
    return x * (rng.random(x.shape) < p)


def dropout_batch(batch: EncodedBatch, p: float, rng) -> EncodedBatch:
    """Dropout on object tensors: a dropped feature keeps only its constant slot."""
    if p >= 1.0:
        return batch
    keep = rng.random((batch.n_rows, len(batch.values))) < p
    return batch.masked(keep)


class ArmijoResult(NamedTuple):
    alpha: float
    point: object
    loss: float
    backtracks: int
    stalled: bool


def _backtrack(candidate, loss_fn, loss0, gsq, alpha, cfg: TrainConfig) -> ArmijoResult:
    if gsq == 0.0:
        return ArmijoResult(alpha, candidate(0.0), loss0, 0, False)
    for bt in range(cfg.max_backtracks + 1):
        point = candidate(alpha)
        val = loss_fn(point)
        if math.isnan(val):
            raise NumericalError(f"loss evaluated to NaN at step size {alpha:g}")
        if val <= loss0 - cfg.c1 * alpha * gsq:
            return ArmijoResult(alpha, point, val, bt, False)
        if bt == cfg.max_backtracks or alpha * cfg.rho < cfg.alpha_min:
            break
        alpha *= cfg.rho
    return ArmijoResult(alpha, None, loss0, bt, True)


def armijo_step(w: TTTensor, g: TangentVector, alpha_init: float, cfg: TrainConfig, loss_fn, loss0=None):
    """Backtrack ``alpha`` until ``L(round(w - alpha g)) <= L(w) - c1 alpha ||g||^2``.

    Returns an :class:`ArmijoResult`; when no step size at or above
    ``cfg.alpha_min`` passes, ``stalled`` is set and ``point`` is ``w``.
    """
    if loss0 is None:
        loss0 = loss_fn(w)
    gsq = g.sq_norm()
    if not math.isfinite(gsq):
        raise NumericalError("non-finite gradient norm")
    if gsq == 0.0:
        return ArmijoResult(alpha_init, w, loss0, 0, False)

    def candidate(alpha):
        return TTTensor._trusted(round_cores(step_point(g, alpha).cores, cfg.rank))

    res = _backtrack(candidate, loss_fn, loss0, gsq, alpha_init, cfg)
    if res.stalled:
        return res._replace(point=w)
    return res


def _objective(loss: LossSpec, lam: float):
    def value(w_cores, batch: EncodedBatch, y) -> float:
        yhat = left_states(w_cores, batch)[-1][:, 0]
        val = float(np.mean(loss.value(yhat, y))) if y.size else 0.0
        if lam:
            val += 0.5 * lam * tt_norm(TTTensor._trusted(w_cores)) ** 2
        return val

    return value


def mean_loss(w: TTTensor, ds: Dataset, loss: LossSpec | str, lam: float = 0.0) -> float:
    """Training objective (mean loss plus penalty) on the whole dataset."""
    loss = LossSpec(loss) if isinstance(loss, str) else loss
    return _objective(loss, lam)(w.cores, ds.encoded(), ds.y)


def initial_tensor(ds: Dataset, cfg: TrainConfig) -> TTTensor:
    loss = LossSpec(cfg.loss)
    modes = ds.schema.mode_sizes
    if cfg.init == "random":
        return tt_random(modes, cfg.rank, seed=cfg.seed)
    fit = train_linear(ds, cfg.lam * ds.n_rows, loss)
    return linear_init(fit.w, fit.b, cfg.rank, mode_sizes=modes, seed=cfg.seed)


def _loop(ds: Dataset, cfg: TrainConfig, w0: TTTensor, step_fn, callback=None):
    loss = LossSpec(cfg.loss)
    y_all = loss.check_labels(ds.y)
    full_batch = ds.encoded()
    objective = _objective(loss, cfg.lam)
    rng = np.random.default_rng([cfg.seed, 1])
    trace = TrainTrace()
    w = w0
    # Riemannian steps start from 1; the baseline from its learning rate.
    alpha_cap = 1.0 if cfg.optimizer == "riemannian" else cfg.learning_rate
    alpha = alpha_cap
    n = ds.n_rows
    for t in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        idx = rng.integers(0, n, size=cfg.batch_size)
        batch = dropout_batch(full_batch.take(idx), cfg.keep_prob, rng)
        y = y_all[idx]
        if t > 1:
            alpha = min(alpha_cap, alpha / cfg.rho)
        w_new, res, gnorm, loss_before = step_fn(w, batch, y, alpha, objective, full_batch, y_all)
        if res.stalled:
            trace.stalled = True
        else:
            alpha = res.alpha
            w = w_new
        full = None
        if cfg.armijo_scope == "full":
            full = res.loss
        elif cfg.full_loss_every and (t % cfg.full_loss_every == 0 or t == cfg.iterations):
            full = objective(w.cores, full_batch, y_all)
        if not math.isfinite(res.loss):
            raise NumericalError(f"non-finite loss at iteration {t}")
        trace.append(
            TraceRecord(
                iter=t,
                epoch=t * cfg.batch_size / n,
                alpha=res.alpha,
                batch_loss=res.loss,
                full_loss=full,
                grad_norm=gnorm,
                backtracks=res.backtracks,
                wall_ms=1000.0 * (time.perf_counter() - t0),
                loss_before=loss_before,
                accepted=not res.stalled,
            )
        )
        if callback is not None:
            callback(t, w, trace)
        if res.stalled:
            break
    return w, trace


def train_riemannian(ds: Dataset, cfg: TrainConfig, w0: TTTensor | None = None, callback=None):
    """Stochastic Riemannian gradient descent on the fixed-rank manifold.

    Every iteration samples ``batch_size`` rows with replacement, applies
    dropout, projects the mini-batch gradient onto the tangent space at the
    current point and backtracks along it with retraction by TT rounding.
    Returns ``(W, trace)``; ``trace.stalled`` marks an early stop because no
    admissible step was found.
    """
    loss = LossSpec(cfg.loss)
    w = initial_tensor(ds, cfg) if w0 is None else w0

    def step(w, batch, y, alpha, objective, full_batch, y_all):
        space = tangent_space(w)
        g, _ = riemannian_gradient_encoded(space, batch, y, loss, cfg.lam, scale=1.0 / batch.n_rows)
        if cfg.armijo_scope == "batch":
            loss0 = objective(w.cores, batch, y)

            def loss_fn(p):
                return objective(p.cores, batch, y)
        else:
            loss0 = objective(w.cores, full_batch, y_all)

            def loss_fn(p):
                return objective(p.cores, full_batch, y_all)

        res = armijo_step(w, g, alpha, cfg, loss_fn, loss0)
        return res.point, res, g.norm(), loss0

    return _loop(ds, cfg, w, step, callback)


def core_gradients(cores, batch: EncodedBatch, coeffs, lam=0.0):
    """Gradient of ``sum_f coeffs_f <X_f, W> + lam/2 ||W||^2`` with respect to every core."""
    d = len(cores)
    lefts = left_states(cores, batch, upto=d - 1)
    rights = right_states(cores, batch, downto=1)
    grads = [outer_sum(lefts[k] * coeffs[:, None], batch.values[k], rights[k + 1]) for k in range(d)]
    if lam:
        envl = [np.ones((1, 1))]
        for k in range(d - 1):
            tmp = np.tensordot(envl[-1], cores[k], axes=(0, 0))
            envl.append(np.tensordot(tmp, cores[k], axes=([0, 1], [0, 1])))
        envr = [None] * (d + 1)
        envr[d] = np.ones((1, 1))
        for k in range(d - 1, 0, -1):
            tmp = np.tensordot(cores[k], envr[k + 1], axes=(2, 0))
            envr[k] = np.tensordot(tmp, cores[k], axes=([1, 2], [1, 2]))
        for k in range(d):
            reg = np.tensordot(np.tensordot(envl[k], cores[k], axes=(1, 0)), envr[k + 1], axes=(2, 0))
            grads[k] = grads[k] + lam * reg
    return grads


def train_core_sgd(ds: Dataset, cfg: TrainConfig, w0: TTTensor | None = None, callback=None):
    """Baseline: SGD directly on the TT cores, step size by the same backtracking."""
    loss = LossSpec(cfg.loss)
    w = initial_tensor(ds, cfg) if w0 is None else w0

    def step(w, batch, y, alpha, objective, full_batch, y_all):
        cores = w.cores
        yhat = predict_encoded(w, batch)
        coeffs = loss.deriv(yhat, y) / batch.n_rows
        grads = core_gradients(cores, batch, coeffs, cfg.lam)
        gsq = float(sum(np.vdot(g, g) for g in grads))
        if not math.isfinite(gsq):
            raise NumericalError("non-finite core gradient")
        if cfg.armijo_scope == "batch":
            loss0 = objective(cores, batch, y)

            def loss_fn(p):
                return objective(p.cores, batch, y)
        else:
            loss0 = objective(cores, full_batch, y_all)

            def loss_fn(p):
                return objective(p.cores, full_batch, y_all)

        def candidate(a):
            return TTTensor._trusted([c - a * g for c, g in zip(cores, grads)])

        res = _backtrack(candidate, loss_fn, loss0, gsq, alpha, cfg)
        point = w if res.stalled else res.point
        return point, res, math.sqrt(gsq), loss0

    return _loop(ds, cfg, w, step, callback)


def train(ds: Dataset, cfg: TrainConfig, **kwargs):
    if cfg.optimizer == "riemannian":
        return train_riemannian(ds, cfg, **kwargs)
    return train_core_sgd(ds, cfg, **kwargs)
