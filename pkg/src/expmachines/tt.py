"""Tensor Train tensors and their algebra.

A d-mode tensor ``A`` of shape ``n_1 x ... x n_d`` is stored as ``d`` cores,
core ``k`` shaped ``(r_{k-1}, n_k, r_k)`` with ``r_0 = r_d = 1``, so that

    A[i_1, ..., i_d] = G_1[:, i_1, :] @ G_2[:, i_2, :] @ ... @ G_d[:, i_d, :]

All routines here are pure: they never modify their inputs and return new
``TTTensor`` values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MATERIALIZE_CAP = 2**20

# Singular values below this fraction of the largest one count as numerically
# zero; they are lifted to _PAD_LEVEL so that the kept rank stays exact.
_TINY_SV = 1e-14
_PAD_LEVEL = 1e-12


class TTError(ValueError):
    """Invalid TT construction or incompatible operands."""


class TTTensor:
    """Immutable Tensor Train.

    Parameters
    ----------
    cores : sequence of ndarray
        Three-index cores. They are copied and frozen.
    """

    __slots__ = ("_cores",)

    def __init__(self, cores: Sequence[np.ndarray]):
        cores = [np.array(c, dtype=np.float64, copy=True) for c in cores]
        _validate(cores)
        for c in cores:
            c.setflags(write=False)
        self._cores = tuple(cores)

    @classmethod
    def _trusted(cls, cores):
        # Internal fast path: cores are freshly computed and already valid.
        obj = cls.__new__(cls)
        cores = [np.ascontiguousarray(c, dtype=np.float64) for c in cores]
        for c in cores:
            c.setflags(write=False)
        obj._cores = tuple(cores)
        return obj

    @property
    def cores(self) -> tuple[np.ndarray, ...]:
        return self._cores

    @property
    def ndim(self) -> int:
        return len(self._cores)

    @property
    def mode_sizes(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self._cores)

    @property
    def tt_ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(c.shape[2] for c in self._cores)

    @property
    def max_rank(self) -> int:
        return max(self.tt_ranks)

    def n_params(self) -> int:
        return sum(c.size for c in self._cores)

    def __repr__(self):
        return f"TTTensor(mode_sizes={self.mode_sizes}, tt_ranks={self.tt_ranks})"

    def __add__(self, other):
        return tt_add(self, other)

    def __sub__(self, other):
        return tt_add(self, tt_scale(other, -1.0))

    def __mul__(self, c):
        return tt_scale(self, c)

    __rmul__ = __mul__

    def __neg__(self):
        return tt_scale(self, -1.0)


@dataclass(frozen=True)
class OrthoForm:
    """A TT tensor together with the orthogonality it satisfies.

    ``flavor == "left"``: cores ``0 .. pivot-1`` have orthonormal columns in
    their ``(r_{k-1} n_k) x r_k`` unfolding. ``flavor == "right"``: cores
    ``pivot+1 .. d-1`` have orthonormal rows in the ``r_{k-1} x (n_k r_k)``
    unfolding.
    """

    tensor: TTTensor
    flavor: str
    pivot: int


def _validate(cores):
    if len(cores) == 0:
        raise TTError("a TT tensor needs at least one core")
    for k, c in enumerate(cores):
        if c.ndim != 3:
            raise TTError(f"core {k} has {c.ndim} dimensions, expected 3")
        if min(c.shape) < 1:
            raise TTError(f"core {k} has a zero-sized dimension: {c.shape}")
    if cores[0].shape[0] != 1:
        raise TTError(f"first core must have r_0 = 1, got {cores[0].shape[0]}")
    if cores[-1].shape[2] != 1:
        raise TTError(f"last core must have r_d = 1, got {cores[-1].shape[2]}")
    for k in range(len(cores) - 1):
        if cores[k].shape[2] != cores[k + 1].shape[0]:
            raise TTError(
                f"rank mismatch between core {k} (right rank {cores[k].shape[2]}) "
                f"and core {k + 1} (left rank {cores[k + 1].shape[0]})"
            )


def feasible_ranks(mode_sizes: Sequence[int], r: int) -> list[int]:
    """Ranks ``r_0 .. r_d`` obtained by clamping a uniform ``r`` to the
    largest values the unfoldings admit."""
    d = len(mode_sizes)
    ranks = [1] * (d + 1)
    for k in range(1, d):
        left = int(np.prod(mode_sizes[:k], dtype=float))
        right = int(np.prod(mode_sizes[k:], dtype=float))
        ranks[k] = int(min(r, left, right))
    return ranks


def tt_from_cores(cores: Sequence[np.ndarray]) -> TTTensor:
    return TTTensor(cores)


def tt_zeros(mode_sizes: Sequence[int]) -> TTTensor:
    return TTTensor._trusted([np.zeros((1, n, 1)) for n in mode_sizes])


def tt_ones(mode_sizes: Sequence[int]) -> TTTensor:
    return TTTensor._trusted([np.ones((1, n, 1)) for n in mode_sizes])


def tt_rank1(vectors: Sequence[np.ndarray]) -> TTTensor:
    """Outer product of the given vectors as a rank-1 TT tensor."""
    return TTTensor([np.asarray(v, dtype=np.float64).reshape(1, -1, 1) for v in vectors])


def tt_element(t: TTTensor, idx: Sequence[int]) -> float:
    if len(idx) != t.ndim:
        raise IndexError(f"expected {t.ndim} indices, got {len(idx)}")
    row = np.ones(1)
    for k, (core, i) in enumerate(zip(t.cores, idx)):
        if not 0 <= i < core.shape[1]:
            raise IndexError(f"index {i} out of range for mode {k} of size {core.shape[1]}")
        row = row @ core[:, i, :]
    return float(row[0])


def tt_materialize(t: TTTensor, cap: int = MATERIALIZE_CAP) -> np.ndarray:
    """Dense array of all elements; refuses tensors with more than ``cap`` entries."""
    size = float(np.prod(t.mode_sizes, dtype=float))
    if size > cap:
        raise TTError(f"tensor has {size:.0f} elements, above the materialization cap {cap}")
    full = t.cores[0].reshape(t.cores[0].shape[1], -1)
    for core in t.cores[1:]:
        r0, n, r1 = core.shape
        full = (full @ core.reshape(r0, n * r1)).reshape(-1, r1)
    return full.reshape(t.mode_sizes)


def _fix_signs(u, vt):
    # Largest-magnitude entry of every left singular vector made nonnegative;
    # argmax picks the first entry on ties.
    pos = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pos, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def _truncated_svd(mat, r):
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    rr = min(r, s.size)
    u, s, vt = u[:, :rr], s[:rr].copy(), vt[:rr]
    u, vt = _fix_signs(u, vt)
    if s.size and s[0] > 0:
        tiny = s < _TINY_SV * s[0]
        s[tiny] = _PAD_LEVEL * s[0]
    return u, s, vt


def tt_decompose(dense: np.ndarray, max_rank: int, cap: int = MATERIALIZE_CAP) -> TTTensor:
    """TT-SVD of a dense array with every rank truncated to ``max_rank``."""
    dense = np.asarray(dense, dtype=np.float64)
    if dense.size > cap:
        raise TTError(f"array has {dense.size} elements, above the cap {cap}")
    if max_rank < 1:
        raise TTError("max_rank must be >= 1")
    shape = dense.shape
    cores = []
    rest = dense.reshape(1, -1)
    r_prev = 1
    for n in shape[:-1]:
        mat = rest.reshape(r_prev * n, -1)
        u, s, vt = _truncated_svd(mat, max_rank)
        cores.append(u.reshape(r_prev, n, -1))
        rest = s[:, None] * vt
        r_prev = u.shape[1]
    cores.append(rest.reshape(r_prev, shape[-1], 1))
    return TTTensor._trusted(cores)


def tt_dot(a: TTTensor, b: TTTensor) -> float:
    """Inner product ``sum(a * b)`` without materializing either tensor."""
    if a.mode_sizes != b.mode_sizes:
        raise TTError(f"mode sizes differ: {a.mode_sizes} vs {b.mode_sizes}")
    env = np.ones((1, 1))
    for ca, cb in zip(a.cores, b.cores):
        tmp = np.tensordot(env, ca, axes=(0, 0))  # (rb, n, ra')
        env = np.tensordot(tmp, cb, axes=([0, 1], [0, 1]))  # (ra', rb')
    return float(env[0, 0])


def _qr_pos(mat):
    q, r = np.linalg.qr(mat)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs, r * signs[:, None]


def _left_sweep(cores, stop=None):
    """Left-orthogonalize cores ``0 .. stop-1``; returns new cores and R factors."""
    cores = list(cores)
    d = len(cores)
    stop = d - 1 if stop is None else stop
    rs = []
    for k in range(stop):
        r0, n, r1 = cores[k].shape
        q, r = _qr_pos(cores[k].reshape(r0 * n, r1))
        cores[k] = q.reshape(r0, n, q.shape[1])
        cores[k + 1] = np.tensordot(r, cores[k + 1], axes=(1, 0))
        rs.append(r)
    return cores, rs


def _right_sweep(cores, stop=0):
    """Right-orthogonalize cores ``d-1 .. stop+1``; returns new cores and R factors."""
    cores = list(cores)
    rs = []
    for k in range(len(cores) - 1, stop, -1):
        r0, n, r1 = cores[k].shape
        q, r = _qr_pos(cores[k].reshape(r0, n * r1).T)
        cores[k] = q.T.reshape(q.shape[1], n, r1)
        cores[k - 1] = np.tensordot(cores[k - 1], r.T, axes=(2, 0))
        rs.append(r)
    return cores, rs


def tt_orthogonalize(a: TTTensor, flavor: str = "left") -> OrthoForm:
    """Orthogonal gauge of ``a``: ``"left"`` pivots on the last core, ``"right"`` on the first."""
    if flavor == "left":
        cores, _ = _left_sweep(a.cores)
        return OrthoForm(TTTensor._trusted(cores), "left", a.ndim - 1)
    if flavor == "right":
        cores, _ = _right_sweep(a.cores)
        return OrthoForm(TTTensor._trusted(cores), "right", 0)
    raise ValueError(f"flavor must be 'left' or 'right', got {flavor!r}")


def tt_norm(a: TTTensor) -> float:
    cores, _ = _left_sweep(a.cores)
    return float(np.linalg.norm(cores[-1]))


def tt_scale(a: TTTensor, c: float) -> TTTensor:
    cores = list(a.cores)
    cores[-1] = cores[-1] * float(c)
    return TTTensor._trusted(cores)


def tt_add(a: TTTensor, b: TTTensor) -> TTTensor:
    """Element-wise sum via block-diagonal stacking; interior ranks add."""
    if a.mode_sizes != b.mode_sizes:
        raise TTError(f"mode sizes differ: {a.mode_sizes} vs {b.mode_sizes}")
    d = a.ndim
    if d == 1:
        return TTTensor._trusted([a.cores[0] + b.cores[0]])
    cores = []
    for k, (ca, cb) in enumerate(zip(a.cores, b.cores)):
        if k == 0:
            cores.append(np.concatenate([ca, cb], axis=2))
        elif k == d - 1:
            cores.append(np.concatenate([ca, cb], axis=0))
        else:
            ra0, n, ra1 = ca.shape
            rb0, _, rb1 = cb.shape
            core = np.zeros((ra0 + rb0, n, ra1 + rb1))
            core[:ra0, :, :ra1] = ca
            core[ra0:, :, ra1:] = cb
            cores.append(core)
    return TTTensor._trusted(cores)


def round_cores(cores, r):
    """Fixed-rank rounding on raw cores; result is left-orthogonal up to the last core."""
    cores, _ = _right_sweep(cores)
    d = len(cores)
    for k in range(d - 1):
        r0, n, r1 = cores[k].shape
        u, s, vt = _truncated_svd(cores[k].reshape(r0 * n, r1), r)
        cores[k] = u.reshape(r0, n, u.shape[1])
        cores[k + 1] = np.tensordot(s[:, None] * vt, cores[k + 1], axes=(1, 0))
    return cores


def tt_round(a: TTTensor, r: int) -> TTTensor:
    """Quasi-optimal approximation of ``a`` with every TT-rank at most ``r``.

    Right-to-left QR sweep followed by a left-to-right sweep of truncated SVDs.
    Singular vectors follow a fixed sign convention so the result is a
    deterministic function of the input.
    """
    if r < 1:
        raise TTError("rank must be >= 1")
    return TTTensor._trusted(round_cores(a.cores, int(r)))


def tt_random(mode_sizes: Sequence[int], r: int, seed=None) -> TTTensor:
    """Gaussian cores at clamped rank ``r``, rescaled to unit Frobenius norm."""
    if r < 1:
        raise TTError("rank must be >= 1")
    rng = np.random.default_rng(seed)
    ranks = feasible_ranks(mode_sizes, r)
    cores = [rng.standard_normal((ranks[k], n, ranks[k + 1])) for k, n in enumerate(mode_sizes)]
    norm = tt_norm(TTTensor._trusted(cores))
    # Spread the rescaling over all cores to keep their magnitudes balanced.
    factor = norm ** (-1.0 / len(cores))
    cores = [c * factor for c in cores]
    cores[-1] = cores[-1] / tt_norm(TTTensor._trusted(cores))
    return TTTensor._trusted(cores)
