"""Observable dictionaries and their finite-difference derivative stacks.

Dictionaries are ordered lists of scalar observables: tensor products of
per-coordinate probabilist Hermite polynomials, optionally augmented with
named unary functions (sin, cos, exp) of single coordinates. The module also
builds the stacked data matrices D(x_t) whose row blocks hold repeated
time derivatives of the dictionary along a trajectory, plus the forward
difference of the stack used by the least-squares fits.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .systems import Trajectory

AUGMENTATION_FNS = {
    "sin": (np.sin, np.cos, 1.0),
    "cos": (np.cos, lambda v: -np.sin(v), -1.0),
    "exp": (np.exp, np.exp, 1.0),
}


def hermite(order: int, x):
    """Probabilist Hermite polynomial H_n via H_{n+1} = x H_n - n H_{n-1}."""
    if order < 0:
        raise ValueError(f"order must be >= 0, got {order}")
    x = np.asarray(x, dtype=float)
    h_prev = np.ones_like(x)
    if order == 0:
        return h_prev if h_prev.ndim else float(h_prev)
    h = x.copy()
    for n in range(1, order):
        h, h_prev = x * h - n * h_prev, h
    return h if h.ndim else float(h)


def _hermite_table(max_order: int, values: np.ndarray) -> np.ndarray:
    """All H_0..H_max at ``values``; shape (max_order+1,) + values.shape."""
    table = np.empty((max_order + 1,) + values.shape)
    table[0] = 1.0
    if max_order >= 1:
        table[1] = values
    for n in range(1, max_order):
        table[n + 1] = values * table[n] - n * table[n - 1]
    return table


@dataclass(frozen=True)
class HermiteEntry:
    """Tensor-product entry: prod_i H_{orders[i]}(x_i)."""

    orders: Tuple[int, ...]

    def label(self) -> str:
        parts = [
            f"H{o}(x{i + 1})" for i, o in enumerate(self.orders) if o > 0
        ]
        return "*".join(parts) if parts else "1"


@dataclass(frozen=True)
class AugmentationEntry:
    """Named unary function of a single coordinate, e.g. sin(x2)."""

    fn: str
    coord: int  # zero-based

    def __post_init__(self):
        if self.fn not in AUGMENTATION_FNS:
            raise ValueError(f"unsupported augmentation {self.fn!r}")

    def label(self) -> str:
        return f"{self.fn}(x{self.coord + 1})"


Entry = Union[HermiteEntry, AugmentationEntry]


@dataclass(frozen=True)
class Dictionary:
    """Ordered basis of scalar observables on R^d."""

    input_dim: int
    entries: Tuple[Entry, ...]
    max_order: Optional[int] = None
    include_constant: bool = True
    total_degree: Optional[int] = None

    def __post_init__(self):
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("dictionary entries must be distinct")
        for e in self.entries:
            if isinstance(e, HermiteEntry) and len(e.orders) != self.input_dim:
                raise ValueError(f"entry {e} does not match dim {self.input_dim}")
            if isinstance(e, AugmentationEntry) and not 0 <= e.coord < self.input_dim:
                raise ValueError(f"augmentation coordinate out of range: {e}")

    @property
    def size(self) -> int:
        return len(self.entries)

    def labels(self):
        return [e.label() for e in self.entries]

    def index_of_constant(self) -> Optional[int]:
        for i, e in enumerate(self.entries):
            if isinstance(e, HermiteEntry) and all(o == 0 for o in e.orders):
                return i
        return None

    def first_order_indices(self):
        """Indices of entries of the form H_1(x_i)."""
        out = []
        for i, e in enumerate(self.entries):
            if isinstance(e, HermiteEntry) and sum(e.orders) == 1:
                out.append(i)
        return out

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return eval_dictionary(self, x)

    def to_descriptor(self) -> dict:
        """JSON-serializable descriptor; only tensor-built dictionaries qualify."""
        if self.max_order is None:
            raise ValueError("only tensor-built dictionaries have a descriptor")
        augs = [
            {"fn": e.fn, "coord": e.coord + 1}
            for e in self.entries
            if isinstance(e, AugmentationEntry)
        ]
        return {
            "dim": self.input_dim,
            "max_order": self.max_order,
            "include_constant": self.include_constant,
            "total_degree": self.total_degree,
            "augmentations": augs,
        }

    @staticmethod
    def from_descriptor(desc: dict) -> "Dictionary":
        augs = [
            (a["fn"], int(a["coord"]) - 1) for a in desc.get("augmentations", [])
        ]
        td = desc.get("total_degree")
        return build_tensor_dictionary(
            int(desc["dim"]),
            int(desc["max_order"]),
            augmentations=augs,
            include_constant=bool(desc.get("include_constant", True)),
            total_degree=None if td is None else int(td),
        )


def build_tensor_dictionary(
    d: int,
    p: int,
    augmentations: Sequence[Tuple[str, int]] = (),
    include_constant: bool = True,
    total_degree: Optional[int] = None,
) -> Dictionary:
    """Full tensor grid of Hermite products with per-coordinate order cap ``p``.

    Entries are ordered lexicographically over multi-indices (n_1..n_d), last
    coordinate varying fastest, so the constant comes first. Augmentations are
    (fn, zero-based coord) pairs appended in the given order. ``total_degree``
    optionally drops multi-indices whose orders sum beyond the cap, a leaner
    variant for high-dimensional control-transform dictionaries.
    """
    if p < 0:
        raise ValueError(f"max order must be >= 0, got {p}")
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    entries = []
    for orders in itertools.product(range(p + 1), repeat=d):
        if not include_constant and all(o == 0 for o in orders):
            continue
        if total_degree is not None and sum(orders) > total_degree:
            continue
        entries.append(HermiteEntry(orders))
    seen = set()
    for fn, coord in augmentations:
        aug = AugmentationEntry(fn, coord)
        if aug in seen:
            raise ValueError(f"duplicate augmentation {aug.label()}")
        seen.add(aug)
        entries.append(aug)
    return Dictionary(
        d, tuple(entries), max_order=p, include_constant=include_constant,
        total_degree=total_degree,
    )


def eval_dictionary(dictionary: Dictionary, x: np.ndarray) -> np.ndarray:
    """Evaluate every entry at a single point; returns a length-M vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (dictionary.input_dim,):
        raise ValueError(
            f"point has shape {x.shape}, expected ({dictionary.input_dim},)"
        )
    return eval_dictionary_matrix(dictionary, x[:, None])[:, 0]


def eval_dictionary_matrix(dictionary: Dictionary, points: np.ndarray) -> np.ndarray:
    """Evaluate the dictionary at many points; ``points`` is d x N, result M x N."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] != dictionary.input_dim:
        raise ValueError(
            f"points must be ({dictionary.input_dim}, N), got {points.shape}"
        )
    max_order = max(
        (max(e.orders) for e in dictionary.entries if isinstance(e, HermiteEntry)),
        default=0,
    )
    table = _hermite_table(max_order, points)  # (max_order+1, d, N)
    out = np.empty((dictionary.size, points.shape[1]))
    for row, entry in enumerate(dictionary.entries):
        if isinstance(entry, HermiteEntry):
            vals = np.ones(points.shape[1])
            for coord, order in enumerate(entry.orders):
                if order > 0:
                    vals = vals * table[order, coord]
            out[row] = vals
        else:
            fn = AUGMENTATION_FNS[entry.fn][0]
            out[row] = fn(points[entry.coord])
    return out


def eval_dictionary_gradient(dictionary: Dictionary, x: np.ndarray) -> np.ndarray:
    """Analytic gradient of every entry at ``x``; returns M x d.

    Uses H_n' = n H_{n-1} for Hermite factors.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (dictionary.input_dim,):
        raise ValueError(
            f"point has shape {x.shape}, expected ({dictionary.input_dim},)"
        )
    d = dictionary.input_dim
    max_order = max(
        (max(e.orders) for e in dictionary.entries if isinstance(e, HermiteEntry)),
        default=0,
    )
    table = _hermite_table(max_order, x)  # (max_order+1, d)
    grad = np.zeros((dictionary.size, d))
    for row, entry in enumerate(dictionary.entries):
        if isinstance(entry, HermiteEntry):
            for j, oj in enumerate(entry.orders):
                if oj == 0:
                    continue
                val = oj * table[oj - 1, j]
                for coord, order in enumerate(entry.orders):
                    if coord != j and order > 0:
                        val *= table[order, coord]
                grad[row, j] = val
        else:
            _, dfn, _ = AUGMENTATION_FNS[entry.fn]
            grad[row, entry.coord] = dfn(x[entry.coord])
    return grad


def finite_difference(series, tau: float, scheme: str = "forward"):
    """Differentiate a sampled series along axis 0.

    Returns (derivative, retained) where ``retained`` is the range of original
    indices the derivative is aligned to. Forward keeps 0..L-2, central keeps
    1..L-2.
    """
    series = np.asarray(series, dtype=float)
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    L = series.shape[0]
    if scheme == "forward":
        if L < 2:
            raise ValueError("forward differences need at least 2 samples")
        return (series[1:] - series[:-1]) / tau, range(0, L - 1)
    if scheme == "central":
        if L < 3:
            raise ValueError("central differences need at least 3 samples")
        return (series[2:] - series[:-2]) / (2.0 * tau), range(1, L - 1)
    raise ValueError(f"unknown scheme {scheme!r}")


def _compose_stencils(r: int, scheme: str) -> dict:
    """Composite stencil (offset -> coefficient, in units of 1/tau^r).

    The composite estimates the r-th time derivative: (r-1) applications of
    the inner scheme followed by one outer forward difference, matching how
    the stacked data and its time derivative are built.
    """
    if scheme == "central":
        inner = {-1: -0.5, 1: 0.5}
    elif scheme == "forward":
        inner = {0: -1.0, 1: 1.0}
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    outer = {0: -1.0, 1: 1.0}
    kernel = {0: 1.0}
    for _ in range(r - 1):
        kernel = _convolve(kernel, inner)
    return _convolve(kernel, outer)


def _convolve(a: dict, b: dict) -> dict:
    out = {}
    for i, ca in a.items():
        for j, cb in b.items():
            out[i + j] = out.get(i + j, 0.0) + ca * cb
    return {k: v for k, v in out.items() if v != 0.0}


def input_matching_weights(r: int, scheme: str = "central"):
    """Weights of the effective input seen by the stacked r-th derivative row.

    A finite-difference estimate of y^(r) mixes neighboring zero-order-hold
    intervals, so the input that actually multiplies eta in the estimate is a
    short moving average of the recorded inputs. The weights follow from the
    response of the composite stencil to an r-fold integrator: an input on
    interval [m, m+1) contributes (c^r - (c-1)^r)/r! at sample offset c = i - m.

    Returns (offsets, weights) with offsets relative to the aligned sample
    index; weights sum to 1.
    """
    kernel = _compose_stencils(r, scheme)
    fact = math.factorial(r)

    def q(c: int) -> float:
        if c < 1:
            return 0.0
        return (c**r - (c - 1) ** r) / fact

    offsets = sorted(kernel)
    lo, hi = offsets[0], offsets[-1] - 1
    ms, ws = [], []
    for m in range(lo, hi + 1):
        w = sum(coef * q(i - m) for i, coef in kernel.items())
        if abs(w) > 1e-12:
            ms.append(m)
            ws.append(w)
    return np.array(ms, dtype=int), np.array(ws)


@dataclass(frozen=True)
class StackedDictionaryData:
    """Per-sample stacks D(x_t) and their forward-difference time derivative.

    ``D[t]`` is r x M with row j holding the j-th finite-difference time
    derivative of the dictionary at retained sample t; ``dDdt`` is the outer
    forward difference (D(x_{t+1}) - D(x_t)) / tau. ``u`` is the recorded
    input aligned to the retained samples and ``u_matched`` the
    stencil-matched effective input (see :func:`input_matching_weights`).
    """

    dictionary: Dictionary
    r: int
    tau: float
    D: np.ndarray
    dDdt: np.ndarray
    u: np.ndarray
    u_matched: np.ndarray
    retained_range: range

    @property
    def num_samples(self) -> int:
        return self.D.shape[0]


def _derivative_ladder(values: np.ndarray, tau: float, r: int, scheme: str):
    """Repeated time differentiation of ``values`` (time on axis 0).

    Returns (blocks, retained) where blocks[j] is the j-th derivative aligned
    to the common retained index range.
    """
    L = values.shape[0]
    blocks = [values]
    starts = [0]
    for _ in range(r - 1):
        deriv, kept = finite_difference(blocks[-1], tau, scheme)
        starts.append(starts[-1] + kept.start)
        blocks.append(deriv)
    # Align every block to the intersection of their index ranges.
    lo = max(starts)
    hi = min(starts[j] + blocks[j].shape[0] for j in range(r))
    if hi <= lo:
        raise ValueError(
            f"series too short for {r - 1} differentiations ({L} samples)"
        )
    aligned = [
        blocks[j][lo - starts[j] : hi - starts[j]] for j in range(r)
    ]
    return aligned, range(lo, hi)


def build_stacked_data(
    dictionary: Dictionary,
    traj: Trajectory,
    r: int,
    scheme: str = "central",
) -> StackedDictionaryData:
    """Lift a trajectory and build the r-row derivative stacks and their rate.

    The derivative rows of D use ``scheme``; the outer time derivative of the
    stack is always a forward difference, which costs one more sample at the
    right edge. Inputs are aligned to the retained samples.
    """
    if r < 1:
        raise ValueError(f"stack depth must be >= 1, got {r}")
    phi = eval_dictionary_matrix(dictionary, traj.states).T  # (N+1, M)
    min_needed = (2 * (r - 1) + 2) if scheme == "central" else (r + 1)
    if phi.shape[0] < min_needed:
        raise ValueError(
            f"trajectory has {phi.shape[0]} samples; scheme {scheme!r} with "
            f"r={r} needs at least {min_needed}"
        )
    aligned, retained = _derivative_ladder(phi, traj.tau, r, scheme)
    stack = np.stack(aligned, axis=1)  # (T0, r, M)
    ddt = (stack[1:] - stack[:-1]) / traj.tau
    stack = stack[:-1]
    retained = range(retained.start, retained.stop - 1)
    u = traj.inputs[retained.start : retained.stop]
    offsets, weights = input_matching_weights(r, scheme)
    idx = np.arange(retained.start, retained.stop)
    u_matched = np.zeros(len(idx))
    for off, w in zip(offsets, weights):
        u_matched += w * traj.inputs[idx + off]
    return StackedDictionaryData(
        dictionary, r, traj.tau, stack, ddt, u, u_matched, retained
    )


def output_derivative_stack(y, tau: float, r: int, scheme: str = "central"):
    """Derivative stack of a scalar output series.

    Returns (Z, Zdot, retained) where Z is r x N' with rows y, ydot, ...,
    y^(r-1) on the retained samples and Zdot the outer forward difference of
    the stack.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise ValueError("output series must be 1-D")
    if r < 1:
        raise ValueError(f"stack depth must be >= 1, got {r}")
    min_needed = (2 * (r - 1) + 2) if scheme == "central" else (r + 1)
    if y.shape[0] < min_needed:
        raise ValueError(
            f"series has {y.shape[0]} samples; scheme {scheme!r} with r={r} "
            f"needs at least {min_needed}"
        )
    aligned, retained = _derivative_ladder(y, tau, r, scheme)
    Z_full = np.stack(aligned, axis=0)  # (r, T0)
    Zdot = (Z_full[:, 1:] - Z_full[:, :-1]) / tau
    Z = Z_full[:, :-1]
    retained = range(retained.start, retained.stop - 1)
    return Z, Zdot, retained
