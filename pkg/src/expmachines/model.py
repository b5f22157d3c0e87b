"""The Exponential Machines predictor.

The model scores a feature vector ``x`` as ``<X, W>`` where ``W`` is a TT
weight tensor and ``X`` is the rank-1 object tensor whose mode-``k`` vector
holds ``c(x_k, i)`` for every index ``i`` of that mode. For a plain numeric
feature that vector is ``(1, x_k)``, so ``<X, W>`` sums ``W[i_1..i_d]`` times
the monomial ``prod x_k^{i_k}`` over all ``2^d`` feature subsets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from scipy.special import expit

from .tt import TTError, TTTensor, feasible_ranks, tt_norm


class SchemaError(ValueError):
    """Feature values or tensors incompatible with a schema."""


def _checked_log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(x)


def _safe_log(x):
    return np.sign(x) * np.log1p(np.abs(x))


FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "log": _checked_log,
    "safe_log": _safe_log,
    "square": np.square,
    "abs": np.abs,
}


@dataclass(frozen=True)
class Numeric:
    functions: tuple[str, ...] = ()

    def __post_init__(self):
        for name in self.functions:
            if name not in FUNCTIONS:
                raise SchemaError(f"unknown feature function {name!r}; known: {sorted(FUNCTIONS)}")

    @property
    def mode_size(self) -> int:
        return len(self.functions) + 2


@dataclass(frozen=True)
class Categorical:
    levels: int

    def __post_init__(self):
        if self.levels < 2:
            raise SchemaError(f"categorical feature needs at least 2 levels, got {self.levels}")

    @property
    def mode_size(self) -> int:
        return self.levels + 1


Feature = Union[Numeric, Categorical]


@dataclass(frozen=True)
class FeatureSchema:
    """Per-feature description fixing the mode sizes of the weight tensor.

    The text form has one feature per line: ``numeric``, ``numeric [log,square]``
    or ``categorical K``. Blank lines and ``#`` comments are ignored.
    """

    features: tuple[Feature, ...]

    @classmethod
    def numeric(cls, d: int) -> "FeatureSchema":
        return cls(tuple(Numeric() for _ in range(d)))

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def mode_sizes(self) -> tuple[int, ...]:
        return tuple(f.mode_size for f in self.features)

    @property
    def is_plain(self) -> bool:
        return all(isinstance(f, Numeric) and not f.functions for f in self.features)

    def to_text(self) -> str:
        lines = []
        for f in self.features:
            if isinstance(f, Categorical):
                lines.append(f"categorical {f.levels}")
            elif f.functions:
                lines.append(f"numeric [{','.join(f.functions)}]")
            else:
                lines.append("numeric")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FeatureSchema":
        features = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            kind, _, rest = line.partition(" ")
            rest = rest.strip()
            if kind == "numeric":
                if not rest:
                    features.append(Numeric())
                    continue
                if not (rest.startswith("[") and rest.endswith("]")):
                    raise SchemaError(f"line {lineno}: expected 'numeric [fn,...]', got {raw!r}")
                names = tuple(s.strip() for s in rest[1:-1].split(",") if s.strip())
                features.append(Numeric(names))
            elif kind == "categorical":
                try:
                    features.append(Categorical(int(rest)))
                except ValueError:
                    raise SchemaError(f"line {lineno}: expected 'categorical K', got {raw!r}") from None
            else:
                raise SchemaError(f"line {lineno}: unknown feature kind {kind!r}")
        if not features:
            raise SchemaError("schema has no features")
        return cls(tuple(features))


@dataclass(frozen=True)
class ObjectTensor:
    """Rank-1 object tensor of one data point, stored as its per-mode vectors."""

    vectors: tuple[np.ndarray, ...]

    @property
    def mode_sizes(self):
        return tuple(v.size for v in self.vectors)

    def to_tt(self) -> TTTensor:
        return TTTensor([v.reshape(1, -1, 1) for v in self.vectors])


@dataclass
class EncodedBatch:
    """Object tensors of ``N`` rows, one ``(N, n_k)`` value array per mode.

    Categorical modes also keep the raw level per row in ``levels[k]`` (0 means
    the feature is switched off, as after dropout) so inference can gather the
    two nonzero slices instead of summing over all of them.
    """

    values: list[np.ndarray]
    levels: list = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return self.values[0].shape[0]

    def take(self, idx) -> "EncodedBatch":
        return EncodedBatch(
            [v[idx] for v in self.values],
            [None if lv is None else lv[idx] for lv in self.levels],
        )

    def masked(self, keep: np.ndarray) -> "EncodedBatch":
        """Switch off features where ``keep`` (``N x d`` boolean) is False."""
        values = []
        levels = []
        for k, (v, lv) in enumerate(zip(self.values, self.levels)):
            v = v.copy()
            v[:, 1:] *= keep[:, k, None]
            values.append(v)
            levels.append(None if lv is None else np.where(keep[:, k], lv, 0))
        return EncodedBatch(values, levels)

    def linear_features(self) -> np.ndarray:
        """Order-one features: every non-constant slot of every mode."""
        return np.hstack([v[:, 1:] for v in self.values])


def encode(xs: np.ndarray, schema: FeatureSchema) -> EncodedBatch:
    """Object-tensor vectors for every row of ``xs``."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2:
        raise SchemaError(f"expected a 2-D feature matrix, got shape {xs.shape}")
    if xs.shape[1] != schema.n_features:
        raise SchemaError(f"rows have {xs.shape[1]} features, schema has {schema.n_features}")
    n = xs.shape[0]
    values, levels = [], []
    for k, feat in enumerate(schema.features):
        col = xs[:, k]
        if not np.all(np.isfinite(col)):
            bad = int(np.flatnonzero(~np.isfinite(col))[0])
            raise SchemaError(f"non-finite value in row {bad}, feature {k}")
        if isinstance(feat, Categorical):
            lv = col.astype(np.int64)
            bad = (lv != col) | (lv < 1) | (lv > feat.levels)
            if bad.any():
                row = int(np.flatnonzero(bad)[0])
                raise SchemaError(
                    f"row {row}, feature {k}: categorical value {col[row]!r} outside 1..{feat.levels}"
                )
            v = np.zeros((n, feat.mode_size))
            v[:, 0] = 1.0
            v[np.arange(n), lv] = 1.0
            values.append(v)
            levels.append(lv)
        else:
            cols = [np.ones(n), col]
            for name in feat.functions:
                g = FUNCTIONS[name](col)
                if not np.all(np.isfinite(g)):
                    row = int(np.flatnonzero(~np.isfinite(g))[0])
                    raise SchemaError(f"row {row}, feature {k}: {name}({col[row]!r}) is not finite")
                cols.append(g)
            values.append(np.stack(cols, axis=1))
            levels.append(None)
    return EncodedBatch(values, levels)


def build_object_tensor(x: Sequence[float], schema: FeatureSchema) -> ObjectTensor:
    batch = encode(np.asarray(x, dtype=np.float64).reshape(1, -1), schema)
    return ObjectTensor(tuple(v[0] for v in batch.values))


def _check_modes(w: TTTensor, schema_modes):
    if w.mode_sizes != tuple(schema_modes):
        for k, (a, b) in enumerate(zip(w.mode_sizes, schema_modes)):
            if a != b:
                raise SchemaError(f"feature {k}: weight tensor mode size {a}, schema mode size {b}")
        raise SchemaError(f"weight tensor has {w.ndim} modes, schema has {len(schema_modes)} features")


def _row_times(state: np.ndarray, mat: np.ndarray) -> np.ndarray:
    # state @ mat with the sum over the shared index unrolled, so every row is
    # computed by the same sequence of operations whatever the batch size.
    out = state[:, 0, None] * mat[0]
    for a in range(1, mat.shape[0]):
        out += state[:, a, None] * mat[a]
    return out


def _times_col(mat: np.ndarray, state: np.ndarray) -> np.ndarray:
    out = state[:, 0, None] * mat[:, 0]
    for b in range(1, mat.shape[1]):
        out += state[:, b, None] * mat[:, b]
    return out


def contract_left(state, core, values, levels=None):
    """Row-wise ``state[n] @ A_k[n]`` with ``A_k[n] = sum_i v_k[n, i] G_k[:, i, :]``.

    Slot 0 of every value vector is the constant 1.
    """
    out = _row_times(state, core[:, 0, :])
    if levels is not None:
        # Categorical rows have exactly one nonzero slice besides the constant one.
        for lv in range(1, core.shape[1]):
            rows = np.flatnonzero(levels == lv)
            if rows.size:
                out[rows] += _row_times(state[rows], core[:, lv, :])
        return out
    for i in range(1, core.shape[1]):
        out += values[:, i, None] * _row_times(state, core[:, i, :])
    return out


def contract_right(core, state, values, levels=None):
    """Row-wise ``A_k[n] @ state[n]``."""
    out = _times_col(core[:, 0, :], state)
    if levels is not None:
        for lv in range(1, core.shape[1]):
            rows = np.flatnonzero(levels == lv)
            if rows.size:
                out[rows] += _times_col(core[:, lv, :], state[rows])
        return out
    for i in range(1, core.shape[1]):
        out += values[:, i, None] * _times_col(core[:, i, :], state)
    return out


def left_states(cores, batch: EncodedBatch, upto=None):
    """Prefix row vectors ``A_1 ... A_k`` for ``k = 0 .. upto`` (the empty product is 1)."""
    upto = len(cores) if upto is None else upto
    states = [np.ones((batch.n_rows, 1))]
    for k in range(upto):
        states.append(contract_left(states[-1], cores[k], batch.values[k], batch.levels[k]))
    return states


def right_states(cores, batch: EncodedBatch, downto=0):
    """Suffix column vectors; ``out[k]`` is ``A_k ... A_d`` and ``out[d]`` is 1."""
    d = len(cores)
    out = [None] * (d + 1)
    out[d] = np.ones((batch.n_rows, 1))
    for k in range(d - 1, downto - 1, -1):
        out[k] = contract_right(cores[k], out[k + 1], batch.values[k], batch.levels[k])
    return out


def outer_sum(lefts: np.ndarray, values: np.ndarray, rights: np.ndarray) -> np.ndarray:
    """``sum_n lefts[n] (x) values[n] (x) rights[n]`` as an ``(a, i, b)`` core."""
    return np.stack([(lefts * values[:, i, None]).T @ rights for i in range(values.shape[1])], axis=1)


def predict_encoded(w: TTTensor, batch: EncodedBatch) -> np.ndarray:
    return left_states(w.cores, batch)[-1][:, 0]


def predict_batch(w: TTTensor, xs, schema: FeatureSchema) -> np.ndarray:
    """Scores for every row of ``xs``, ``O(N d n r^2)``."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0 and (xs.ndim == 1 or xs.shape[0] == 0):
        return np.zeros(0)
    _check_modes(w, schema.mode_sizes)
    return predict_encoded(w, encode(xs, schema))


def predict(w: TTTensor, x, schema: FeatureSchema) -> float:
    return float(predict_batch(w, np.asarray(x, dtype=np.float64).reshape(1, -1), schema)[0])


def linear_init(
    w: Sequence[float],
    b: float,
    target_rank: int = 2,
    mode_sizes: Sequence[int] | None = None,
    seed=0,
) -> TTTensor:
    """TT tensor reproducing the linear model ``<phi(x), w> + b``.

    With binary modes ``phi(x) = x`` and the rank-2 cores are::

        G_1[0] = [1 0]     G_1[1] = [0 w_1]
        G_k[0] = I_2       G_k[1] = [[0 w_k], [0 0]]
        G_d[0] = [b 1]^T   G_d[1] = [w_d 0]^T

    Wider modes (feature functions, categorical levels) get one weight per
    non-constant slot, taken from ``w`` in mode order.

    For ``target_rank > 2`` the rank-2 cores sit in the top-left block of
    larger cores; the remaining entries get Gaussian noise with standard
    deviation ``1e-4 * (1 + |b| + ||w||)`` so every TT-rank is exactly the
    (clamped) target.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    if mode_sizes is None:
        mode_sizes = (2,) * w.size
    mode_sizes = tuple(int(n) for n in mode_sizes)
    if target_rank < 2:
        raise TTError(f"linear_init needs target_rank >= 2, got {target_rank}")
    if w.size != sum(n - 1 for n in mode_sizes):
        raise TTError(f"{w.size} weights for mode sizes {mode_sizes}")
    d = len(mode_sizes)
    offsets = np.cumsum([0] + [n - 1 for n in mode_sizes])
    wk = [w[offsets[k]:offsets[k + 1]] for k in range(d)]

    if d == 1:
        return TTTensor([np.concatenate([[b], wk[0]]).reshape(1, -1, 1)])

    base = []
    for k, n in enumerate(mode_sizes):
        if k == 0:
            core = np.zeros((1, n, 2))
            core[0, 0, 0] = 1.0
            core[0, 1:, 1] = wk[0]
        elif k == d - 1:
            core = np.zeros((2, n, 1))
            core[0, 0, 0] = b
            core[1, 0, 0] = 1.0
            core[0, 1:, 0] = wk[k]
        else:
            core = np.zeros((2, n, 2))
            core[0, 0, 0] = core[1, 0, 1] = 1.0
            core[0, 1:, 1] = wk[k]
        base.append(core)

    ranks = feasible_ranks(mode_sizes, target_rank)
    if all(r == 2 for r in ranks[1:-1]):
        return TTTensor(base)

    # Small modes near the boundary can make rank 2 itself infeasible only for
    # d == 1, handled above; here every interior rank is >= 2.
    rng = np.random.default_rng(seed)
    scale = 1e-4 * (1.0 + abs(b) + float(np.linalg.norm(w)))
    cores = []
    for k, core in enumerate(base):
        r0, n, r1 = ranks[k], mode_sizes[k], ranks[k + 1]
        big = scale * rng.standard_normal((r0, n, r1))
        b0, _, b1 = core.shape
        big[:b0, :, :b1] = core
        cores.append(big)
    return TTTensor(cores)


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class LossSpec:
    """Pointwise loss ``l(yhat, y)`` and its derivative in ``yhat``.

    ``logistic`` expects labels in {-1, +1}; ``squared`` accepts any real target.
    """

    kind: str = "logistic"

    def __post_init__(self):
        if self.kind not in ("logistic", "squared"):
            raise ValueError(f"unknown loss {self.kind!r}; expected 'logistic' or 'squared'")

    def check_labels(self, y):
        y = np.asarray(y, dtype=np.float64)
        if self.kind == "logistic" and not np.all(np.abs(y) == 1.0):
            raise LabelError("logistic loss requires labels in {-1, +1}")
        return y

    def value(self, yhat, y):
        yhat = np.asarray(yhat, dtype=np.float64)
        y = self.check_labels(y)
        if self.kind == "logistic":
            return np.logaddexp(0.0, -y * yhat)
        return (yhat - y) ** 2

    def deriv(self, yhat, y):
        yhat = np.asarray(yhat, dtype=np.float64)
        y = self.check_labels(y)
        if self.kind == "logistic":
            return -y * expit(-y * yhat)
        return 2.0 * (yhat - y)


def loss_value(spec: LossSpec, yhat, y):
    return spec.value(yhat, y)


def loss_deriv(spec: LossSpec, yhat, y):
    return spec.deriv(yhat, y)


def full_loss(w: TTTensor, ds, spec: LossSpec, lam: float = 0.0) -> float:
    """Sum of pointwise losses over ``ds`` plus ``lam / 2 * ||w||_F^2``."""
    reg = 0.5 * lam * tt_norm(w) ** 2 if lam else 0.0
    if ds.n_rows == 0:
        return float(reg)
    yhat = predict_batch(w, ds.X, ds.schema)
    return float(np.sum(spec.value(yhat, ds.y)) + reg)
