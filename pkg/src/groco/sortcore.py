"""Hard and relaxed odd-even sorting networks over lists of real values.

An odd-even network sorts n values in exactly n fixed compare-and-swap
steps: odd steps compare the adjacent pairs starting at index 0, even steps
the pairs starting at index 1 (0-based). Relaxing each conditional swap with
an arctan sigmoid turns the network into a chain of doubly stochastic swap
matrices whose product is a differentiable permutation matrix.

`diff_sort` accepts either a plain array (returning concrete results) or a
`diffgrad.Tensor` (recording the whole network so gradients can flow back to
the inputs). Swap probabilities at each step are computed from the running,
partially-sorted values, i.e. the relaxation follows the sequential network
rather than re-reading the original input; this is an interpretation choice
and is pinned by the oracle tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffgrad as dg
from .diffgrad import Tensor

__all__ = [
    "SortConfig",
    "RelaxedPermutation",
    "HardPermutation",
    "sigmoid_f",
    "soft_swap",
    "swap_matrix",
    "step_matrix",
    "diff_sort",
    "hard_sort",
    "permutation_matrix",
]

_INV_PI = 1.0 / math.pi


def _check_beta(beta: float) -> float:
    beta = float(beta)
    if not math.isfinite(beta) or beta <= 0.0:
        raise ValueError(f"beta must be a finite positive real, got {beta}")
    return beta


def _check_values(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError(f"expected a non-empty 1-D value list, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("values must be finite")
    return arr


@dataclass(frozen=True)
class SortConfig:
    """Inverse temperature and input length of one relaxed sorting network."""

    beta: float
    length: int

    def __post_init__(self):
        _check_beta(self.beta)
        if int(self.length) < 1:
            raise ValueError(f"length must be >= 1, got {self.length}")


@dataclass(frozen=True)
class RelaxedPermutation:
    """Doubly stochastic matrix; rows are output positions, columns inputs."""

    entries: np.ndarray

    def __post_init__(self):
        e = self.entries
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValueError(f"entries must be square, got shape {e.shape}")

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def apply(self, values) -> np.ndarray:
        return self.entries @ np.asarray(values, dtype=np.float64)


@dataclass(frozen=True)
class HardPermutation:
    """Output position for each input index (0-based bijection)."""

    mapping: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mapping)
        if m.ndim != 1 or sorted(m.tolist()) != list(range(m.size)):
            raise ValueError("mapping must be a bijection on 0..n-1")

    @property
    def n(self) -> int:
        return self.mapping.size

    def apply(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        out = np.empty_like(values)
        out[self.mapping] = values
        return out


def permutation_matrix(perm: HardPermutation) -> np.ndarray:
    """0/1 matrix of a hard permutation, same row/column convention as
    `RelaxedPermutation`."""
    n = perm.n
    q = np.zeros((n, n), dtype=np.float64)
    q[perm.mapping, np.arange(n)] = 1.0
    return q


def sigmoid_f(x: float, beta: float) -> float:
    """Swap sigmoid arctan(beta*x)/pi + 0.5, strictly increasing, with
    f(x) + f(-x) = 1."""
    beta = _check_beta(beta)
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"x must be finite, got {x}")
    return math.atan(beta * x) * _INV_PI + 0.5


def soft_swap(d_i: float, d_j: float, beta: float) -> tuple[float, float]:
    """Relaxed conditional swap: returns (softmin, softmax) of the pair.

    The outputs are convex combinations, so their sum equals d_i + d_j up to
    rounding, and equal inputs are a fixed point.
    """
    f_ji = sigmoid_f(float(d_j) - float(d_i), beta)
    f_ij = sigmoid_f(float(d_i) - float(d_j), beta)
    lo = d_i * f_ji + d_j * f_ij
    hi = d_i * f_ij + d_j * f_ji
    return lo, hi


def swap_matrix(n: int, i: int, j: int, d_i: float, d_j: float, beta: float) -> RelaxedPermutation:
    """n-by-n identity except the symmetric 2x2 block coupling positions i, j
    (0-based, i < j) with stay probability f(d_j - d_i)."""
    n = int(n)
    if not (0 <= i < j < n):
        raise ValueError(f"need 0 <= i < j < n, got i={i}, j={j}, n={n}")
    stay = sigmoid_f(float(d_j) - float(d_i), beta)
    swap = sigmoid_f(float(d_i) - float(d_j), beta)
    m = np.eye(n, dtype=np.float64)
    m[i, i] = m[j, j] = stay
    m[i, j] = m[j, i] = swap
    return RelaxedPermutation(m)


def _step_pairs(n: int, step: int) -> tuple[tuple[int, int], ...]:
    start = 0 if step % 2 == 1 else 1
    return tuple((i, i + 1) for i in range(start, n - 1, 2))


_GATHER_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _step_gather(n: int, step: int):
    """Index arrays for assembling one step matrix from a value pool
    [stay_0..stay_{p-1}, swap_0..swap_{p-1}, 0.0, 1.0]."""
    key = (n, step % 2)
    cached = _GATHER_CACHE.get(key)
    if cached is not None:
        return cached
    pairs = _step_pairs(n, step)
    p = len(pairs)
    idx_i = np.array([i for i, _ in pairs], dtype=np.intp)
    idx_j = np.array([j for _, j in pairs], dtype=np.intp)
    gather = np.full((n, n), 2 * p, dtype=np.intp)  # default: the 0.0 slot
    gather[np.arange(n), np.arange(n)] = 2 * p + 1  # diagonal: the 1.0 slot
    for k, (i, j) in enumerate(pairs):
        gather[i, i] = gather[j, j] = k
        gather[i, j] = gather[j, i] = p + k
    result = (idx_i, idx_j, gather)
    _GATHER_CACHE[key] = result
    return result


def _stay_probs(values, idx_i, idx_j, beta):
    vi = dg.index_select(values, idx_i)
    vj = dg.index_select(values, idx_j)
    return dg.scale(dg.arctan(dg.scale(vj - vi, beta)), _INV_PI) + 0.5


def step_matrix(values, step: int, beta: float) -> RelaxedPermutation:
    """Product of the independent adjacent-pair swap matrices of one step.

    `values` are the current (partially sorted) values entering the step;
    `step` is 1-based and must be in 1..n. Odd steps pair from index 0, even
    steps from index 1.
    """
    arr = _check_values(values)
    beta = _check_beta(beta)
    n = arr.size
    step = int(step)
    if not (1 <= step <= n):
        raise ValueError(f"step must be in 1..{n}, got {step}")
    return RelaxedPermutation(_step_matrix_raw(arr, n, step, beta))


def _step_matrix_raw(values, n: int, step: int, beta: float):
    idx_i, idx_j, gather = _step_gather(n, step)
    if idx_i.size == 0:
        return np.eye(n, dtype=np.float64)
    stay = _stay_probs(values, idx_i, idx_j, beta)
    pool = dg.concat([stay, 1.0 - stay, np.array([0.0, 1.0])])
    return dg.index_select(pool, gather)


def diff_sort(values, beta: float):
    """Run the full relaxed network: n steps, each step's swaps applied to
    the running soft values.

    Returns `(sorted_soft, P)` with `sorted_soft = P @ values` and P the
    product of the step matrices (later steps multiplied on the left). With a
    plain array input P comes wrapped as a `RelaxedPermutation`; with a
    `diffgrad.Tensor` input both results are tensors on the input's tape.
    """
    beta = _check_beta(beta)
    if isinstance(values, Tensor):
        if values.ndim != 1 or values.size < 1:
            raise ValueError(f"expected a non-empty 1-D value list, got shape {values.shape}")
        return _diff_sort_core(values, values.size, beta)
    arr = _check_values(values)
    sorted_soft, p = _diff_sort_core(arr, arr.size, beta)
    return sorted_soft, RelaxedPermutation(p)


def _diff_sort_core(values, n: int, beta: float):
    p_total = None
    v = values
    for step in range(1, n + 1):
        if not _step_pairs(n, step):
            continue
        p_step = _step_matrix_raw(v, n, step, beta)
        p_total = p_step if p_total is None else dg.matmul(p_step, p_total)
        v = dg.matmul(p_step, v)
    if p_total is None:  # n == 1
        eye = np.eye(n, dtype=np.float64)
        p_total = values.tape.constant(eye) if isinstance(values, Tensor) else eye
    return v, p_total


def hard_sort(values) -> tuple[np.ndarray, HardPermutation]:
    """Discrete odd-even network: non-descending output, stable on ties
    (earlier input index wins)."""
    arr = _check_values(values)
    n = arr.size
    work = arr.copy()
    origin = list(range(n))
    for step in range(1, n + 1):
        for i, j in _step_pairs(n, step):
            if work[i] > work[j]:
                work[i], work[j] = work[j], work[i]
                origin[i], origin[j] = origin[j], origin[i]
    mapping = np.empty(n, dtype=np.intp)
    for pos, src in enumerate(origin):
        mapping[src] = pos
    return work, HardPermutation(mapping)
