"""Tangent spaces of the manifold of fixed-TT-rank tensors.

At a point ``W`` with left-orthogonal cores ``U_k`` and right-orthogonal
cores ``V_k`` every tangent vector has the form

    T = sum_k  U_1 .. U_{k-1} dU_k V_{k+1} .. V_d

with the gauge ``unfold(U_k)^T unfold(dU_k) = 0`` for ``k < d``. Under this
gauge the terms are mutually orthogonal, so ``||T||^2 = sum_k ||dU_k||^2``,
and ``T`` converts to a TT tensor of rank at most ``2 r``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import EncodedBatch, LossSpec, _check_modes, encode, left_states, outer_sum, right_states
from .tt import TTError, TTTensor, _left_sweep, _right_sweep, tt_round

RANK_DEFICIENCY_TOL = 1e-14


class RankDeficientError(TTError):
    """The base point is not of full TT-rank, so its tangent space is ill-posed."""


@dataclass(frozen=True)
class TangentSpace:
    """Left- and right-orthogonal gauges of a base point."""

    left: tuple[np.ndarray, ...]
    right: tuple[np.ndarray, ...]

    @property
    def ndim(self):
        return len(self.left)

    @property
    def mode_sizes(self):
        return tuple(c.shape[1] for c in self.left)

    @property
    def ranks(self):
        return (1,) + tuple(c.shape[2] for c in self.left)


def _check_rs(rs, where):
    for r in rs:
        s = np.linalg.svd(r, compute_uv=False)
        if s.size == 0 or s[0] == 0 or s[-1] < RANK_DEFICIENCY_TOL * s[0] or r.shape[0] < r.shape[1]:
            raise RankDeficientError(f"base point is rank deficient ({where} gauge)")


def tangent_space(w: TTTensor) -> TangentSpace:
    left, rs = _left_sweep(w.cores)
    _check_rs(rs, "left")
    right, rs = _right_sweep(w.cores)
    _check_rs(rs, "right")
    return TangentSpace(tuple(left), tuple(right))


@dataclass(frozen=True)
class TangentVector:
    space: TangentSpace
    deltas: tuple[np.ndarray, ...]

    def sq_norm(self) -> float:
        return float(sum(np.vdot(dk, dk) for dk in self.deltas))

    def norm(self) -> float:
        return float(np.sqrt(self.sq_norm()))

    def inner(self, other: "TangentVector") -> float:
        return float(sum(np.vdot(a, b) for a, b in zip(self.deltas, other.deltas)))

    def scaled(self, c: float) -> "TangentVector":
        return TangentVector(self.space, tuple(c * dk for dk in self.deltas))

    def __add__(self, other: "TangentVector") -> "TangentVector":
        return TangentVector(self.space, tuple(a + b for a, b in zip(self.deltas, other.deltas)))

    def to_tt(self) -> TTTensor:
        return _assemble(self.space, self.deltas)

    @classmethod
    def of_base(cls, space: TangentSpace) -> "TangentVector":
        """The base point itself, which lies in its own tangent space."""
        deltas = [np.zeros_like(c) for c in space.left]
        deltas[-1] = space.left[-1].copy()
        return cls(space, tuple(deltas))


def _assemble(space: TangentSpace, deltas) -> TTTensor:
    """TT cores ``[[V_k, 0], [dU_k, U_k]]`` with the obvious boundary versions."""
    d = space.ndim
    U, V = space.left, space.right
    if d == 1:
        return TTTensor._trusted([deltas[0]])
    cores = []
    for k in range(d):
        if k == 0:
            core = np.concatenate([deltas[0], U[0]], axis=2)
        elif k == d - 1:
            core = np.concatenate([V[k], deltas[k]], axis=0)
        else:
            rv0, n, rv1 = V[k].shape
            ru0, _, ru1 = U[k].shape
            core = np.zeros((rv0 + ru0, n, rv1 + ru1))
            core[:rv0, :, :rv1] = V[k]
            core[rv0:, :, :rv1] = deltas[k]
            core[rv0:, :, rv1:] = U[k]
        cores.append(core)
    for k in range(1, d):
        if cores[k].shape[0] > 2 * space.ranks[k]:
            raise AssertionError("tangent vector exceeds the 2r rank bound")
    return TTTensor._trusted(cores)


def _gauge(space: TangentSpace, raw):
    # Remove the component along U_k from every non-final delta.
    out = []
    d = space.ndim
    for k, dk in enumerate(raw):
        if k < d - 1:
            u = space.left[k]
            r0, n, r1 = u.shape
            um = u.reshape(r0 * n, r1)
            dm = dk.reshape(r0 * n, r1)
            dm = dm - um @ (um.T @ dm)
            dk = dm.reshape(r0, n, r1)
        out.append(dk)
    return tuple(out)


def _project_tt(space: TangentSpace, z: TTTensor):
    d = space.ndim
    U, V = space.left, space.right
    lhs = [np.ones((1, 1))]
    for k in range(d - 1):
        tmp = np.tensordot(lhs[-1], U[k], axes=(0, 0))  # (rz, n, ru')
        lhs.append(np.tensordot(tmp, z.cores[k], axes=([0, 1], [0, 1])))  # (ru', rz')
    rhs = [None] * (d + 1)
    rhs[d] = np.ones((1, 1))
    for k in range(d - 1, 0, -1):
        tmp = np.tensordot(z.cores[k], rhs[k + 1], axes=(2, 0))  # (rz, n, rv)
        rhs[k] = np.tensordot(tmp, V[k], axes=([1, 2], [1, 2]))  # (rz, rv')
    raw = []
    for k in range(d):
        tmp = np.tensordot(lhs[k], z.cores[k], axes=(1, 0))
        raw.append(np.tensordot(tmp, rhs[k + 1], axes=(2, 0)))
    return raw


def _project_objects(space: TangentSpace, batch: EncodedBatch, coeffs: np.ndarray, lefts=None):
    d = space.ndim
    if lefts is None:
        lefts = left_states(space.left, batch, upto=d - 1)
    rights = right_states(space.right, batch, downto=1)
    return [outer_sum(lefts[k] * coeffs[:, None], batch.values[k], rights[k + 1]) for k in range(d)]


def project_tangent(w, z, weights=None) -> TangentVector:
    """Orthogonal projection onto the tangent space at ``w``.

    ``z`` is either a ``TTTensor`` or an :class:`EncodedBatch` of object
    tensors; in the latter case the projected tensor is
    ``sum_f weights[f] * X_f`` (unit weights by default), accumulated in a
    single pass over the batch. ``w`` may also be a precomputed
    :class:`TangentSpace`.
    """
    space = w if isinstance(w, TangentSpace) else tangent_space(w)
    if isinstance(z, TTTensor):
        if z.mode_sizes != space.mode_sizes:
            raise TTError(f"mode sizes differ: {space.mode_sizes} vs {z.mode_sizes}")
        raw = _project_tt(space, z)
        if weights is not None:
            raw = [float(weights) * r for r in raw]
    else:
        if tuple(v.shape[1] for v in z.values) != space.mode_sizes:
            raise TTError("object tensors do not match the base point's mode sizes")
        coeffs = np.ones(z.n_rows) if weights is None else np.asarray(weights, dtype=np.float64)
        raw = _project_objects(space, z, coeffs)
    return TangentVector(space, _gauge(space, raw))


def riemannian_gradient_encoded(w, batch: EncodedBatch, y, loss: LossSpec, lam=0.0, scale=1.0):
    """Projected gradient of ``scale * sum(loss) + lam/2 ||w||^2`` on a batch.

    Returns ``(tangent, yhat)`` where ``yhat`` are the batch predictions at ``w``.
    """
    space = w if isinstance(w, TangentSpace) else tangent_space(w)
    n = batch.n_rows
    if n:
        # The prediction is the last prefix vector of the left-orthogonal sweep.
        lefts = left_states(space.left, batch)
        yhat = lefts[-1][:, 0]
        coeffs = scale * loss.deriv(yhat, y)
        g = TangentVector(space, _gauge(space, _project_objects(space, batch, coeffs, lefts)))
    else:
        yhat = np.zeros(0)
        g = TangentVector(space, tuple(np.zeros_like(c) for c in space.left))
    if lam:
        g = g + TangentVector.of_base(space).scaled(lam)
    return g, yhat


def riemannian_gradient(w: TTTensor, xs, ys, schema, loss: LossSpec, lam: float = 0.0) -> TangentVector:
    """Projected gradient ``sum_f l'(yhat_f, y_f) P(X_f) + lam * w``."""
    _check_modes(w, schema.mode_sizes)
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, schema.n_features)
    if xs.shape[0] == 0 and not lam:
        raise ValueError("empty batch with lam == 0 has no gradient")
    batch = encode(xs, schema) if xs.shape[0] else None
    if batch is None:
        space = tangent_space(w)
        return TangentVector.of_base(space).scaled(lam)
    g, _ = riemannian_gradient_encoded(w, batch, ys, loss, lam)
    return g


def retract(point: TTTensor, r: int) -> TTTensor:
    """Map a point near the manifold back onto it by fixed-rank TT rounding."""
    return tt_round(point, r)


def step_point(g: TangentVector, alpha: float) -> TTTensor:
    """``W - alpha * G`` as a rank-``2r`` TT tensor, with ``W`` the base of ``g``."""
    deltas = [-alpha * dk for dk in g.deltas]
    deltas[-1] = deltas[-1] + g.space.left[-1]
    return _assemble(g.space, deltas)

