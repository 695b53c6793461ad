"""Numeric differential-geometry checks: Jacobians, Lie brackets, distribution
rank, involutivity, relative degree, and closed-loop nilpotency.

Single-level derivatives use central differences with step scaled by
(1 + |x|). Nested brackets escalate the step by square roots per nesting
level to control noise amplification. Deep scalar Lie-derivative chains
(relative degree, nilpotency index) are instead computed as time derivatives
of the observable along numerically integrated flows, which stays accurate at
depths where nested point stencils drown in roundoff.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .errors import DomainError, NoiseAmplificationWarning
from .systems import ControlAffineSystem

EPS = np.finfo(float).eps
BASE_STEP = EPS ** (1.0 / 3.0)


def _level_step(level: int, h0: float = BASE_STEP) -> float:
    """Differencing step for nesting depth ``level`` (1 = analytic operand)."""
    return h0 ** (0.5 ** (level - 1))


def numeric_jacobian(field_fn, x: np.ndarray, h: Optional[float] = None) -> np.ndarray:
    """Central-difference Jacobian; column j uses step h * (1 + |x_j|)."""
    x = np.asarray(x, dtype=float)
    h0 = BASE_STEP if h is None else h
    if h0 <= 0:
        raise ValueError(f"step must be positive, got {h0}")
    f0 = np.atleast_1d(np.asarray(field_fn(x), dtype=float))
    jac = np.empty((f0.shape[0], x.shape[0]))
    for j in range(x.shape[0]):
        step = h0 * (1.0 + abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += step
        xm[j] -= step
        fp = np.atleast_1d(np.asarray(field_fn(xp), dtype=float))
        fm = np.atleast_1d(np.asarray(field_fn(xm), dtype=float))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise DomainError(f"field non-finite near x={x} (coordinate {j})")
        jac[:, j] = (fp - fm) / (2.0 * step)
    return jac


def numeric_gradient(phi, x: np.ndarray, h: Optional[float] = None) -> np.ndarray:
    """Central-difference gradient of a scalar map."""
    return numeric_jacobian(lambda y: np.array([phi(y)]), x, h)[0]


def lie_derivative(phi, field_fn, x: np.ndarray, h: Optional[float] = None) -> float:
    """L_field phi at x, i.e. the gradient of phi dotted with the field."""
    x = np.asarray(x, dtype=float)
    return float(numeric_gradient(phi, x, h) @ np.asarray(field_fn(x), dtype=float))


def lie_bracket(f_fn, g_fn, x: np.ndarray, h: Optional[float] = None) -> np.ndarray:
    """[f, g](x) = J_g(x) f(x) - J_f(x) g(x).

    The sign convention is fixed so that iterated brackets of a drift with a
    control field reproduce the columns of the controllability distribution;
    pass swapped arguments to obtain the opposite convention.
    """
    x = np.asarray(x, dtype=float)
    fx = np.asarray(f_fn(x), dtype=float)
    gx = np.asarray(g_fn(x), dtype=float)
    return numeric_jacobian(g_fn, x, h) @ fx - numeric_jacobian(f_fn, x, h) @ gx


def adjoint_chain(
    f_fn,
    g_fn,
    depth: int,
    x: np.ndarray,
    h: Optional[float] = None,
) -> list:
    """[g, ad_f g, ..., ad_f^depth g] at x via nested numeric brackets.

    Each nesting level differentiates the numeric field below it, so the
    differencing step is escalated by square roots per level. A
    NoiseAmplificationWarning is emitted when the propagated roundoff estimate
    exceeds 10% of the deepest vector's norm.
    """
    if depth < 0:
        raise ValueError(f"depth must be >= 0, got {depth}")
    x = np.asarray(x, dtype=float)
    h0 = BASE_STEP if h is None else h

    fields = [g_fn]
    for level in range(1, depth + 1):
        inner = fields[-1]
        step = _level_step(level, h0)

        def next_field(y, inner=inner, step=step):
            return lie_bracket(f_fn, inner, y, h=step)

        fields.append(next_field)

    chain = [np.asarray(fields[0](x), dtype=float)]
    for level in range(1, depth + 1):
        chain.append(np.asarray(fields[level](x), dtype=float))

    # Roundoff propagates roughly as err_k ~ err_{k-1} / h_k + h_k^2.
    err = EPS
    for level in range(1, depth + 1):
        step = _level_step(level, h0)
        err = err / step + step**2
    scale = max(float(np.linalg.norm(v)) for v in chain) + 1e-30
    if depth >= 1 and err > 0.1 * scale:
        warnings.warn(
            f"nested bracket depth {depth}: estimated roundoff {err:.2e} "
            f"exceeds 10% of result norm {scale:.2e}",
            NoiseAmplificationWarning,
        )
    return chain


def flow_scalar_derivatives(
    field_fn,
    phi,
    x: np.ndarray,
    max_order: int,
    dt: Optional[float] = None,
    rtol: float = 1e-12,
) -> np.ndarray:
    """Time derivatives d^k/dt^k phi(flow(x, t)) at t = 0 for k = 0..max_order.

    These equal the iterated Lie derivatives L_field^k phi at x. The flow is
    integrated to high accuracy on a symmetric node grid and the observable
    samples are least-squares fitted by a polynomial in t.
    """
    x = np.asarray(x, dtype=float)
    if max_order < 0:
        raise ValueError(f"max_order must be >= 0, got {max_order}")
    if max_order == 0:
        return np.array([float(phi(x))])

    speed = float(np.linalg.norm(np.asarray(field_fn(x), dtype=float)))
    if dt is None:
        dt = float(np.clip(0.25 / (1.0 + speed), 1e-3, 0.2))
    q = max_order + 1
    t_nodes = dt * np.arange(1, q + 1)

    def rhs(t, y):
        out = np.asarray(field_fn(y), dtype=float)
        if not np.all(np.isfinite(out)):
            raise DomainError(f"field non-finite along flow near {y}")
        return out

    def rhs_back(t, y):
        return -rhs(t, y)

    ys = np.empty(2 * q + 1)
    ys[q] = float(phi(x))
    for direction, seg in ((1, rhs), (-1, rhs_back)):
        sol = solve_ivp(
            seg, (0.0, t_nodes[-1]), x, t_eval=t_nodes, rtol=rtol, atol=rtol,
            method="DOP853",
        )
        if not sol.success:
            raise DomainError(f"flow integration failed near x={x}: {sol.message}")
        vals = np.array([float(phi(sol.y[:, i])) for i in range(sol.y.shape[1])])
        if direction == 1:
            ys[q + 1 :] = vals
        else:
            ys[:q] = vals[::-1]

    times = np.concatenate([-t_nodes[::-1], [0.0], t_nodes])
    if not np.all(np.isfinite(ys)):
        raise DomainError(f"observable non-finite along flow near x={x}")
    poly = np.polynomial.Polynomial.fit(times, ys, deg=max_order + 2)
    return np.array([poly.deriv(k)(0.0) for k in range(max_order + 1)])


def _lie_g_chain(
    sys: ControlAffineSystem,
    h_fn,
    x: np.ndarray,
    kmax: int,
    dstep: float = 3e-3,
) -> tuple:
    """Values L_g L_f^{k-1} h(x) for k = 1..kmax and L_f^k h(x) for k = 0..kmax.

    L_f^{k-1} h is obtained as a flow derivative at two points displaced along
    g, then differenced directionally.
    """
    x = np.asarray(x, dtype=float)
    gx = np.asarray(sys.g(x), dtype=float)
    gnorm = float(np.linalg.norm(gx))
    drift_derivs = flow_scalar_derivatives(sys.f, h_fn, x, kmax)
    if gnorm == 0.0:
        return np.zeros(kmax), drift_derivs
    ghat = gx / gnorm
    s = dstep * (1.0 + float(np.linalg.norm(x)))
    plus = flow_scalar_derivatives(sys.f, h_fn, x + s * ghat, kmax - 1)
    minus = flow_scalar_derivatives(sys.f, h_fn, x - s * ghat, kmax - 1)
    vals = gnorm * (plus - minus) / (2.0 * s)
    return vals[:kmax], drift_derivs


def relative_degree(
    sys: ControlAffineSystem,
    h_fn,
    x: np.ndarray,
    kmax: int,
    tol: float = 1e-2,
) -> Optional[int]:
    """Smallest r <= kmax with L_g L_f^{r-1} h(x) significantly nonzero.

    The detection threshold is tol * (1 + |L_f^k h(x)|), which keeps the
    answer invariant under positive rescaling of h. Returns None when no
    admissible r is found up to kmax.
    """
    if kmax < 1:
        raise ValueError(f"kmax must be >= 1, got {kmax}")
    vals, drift = _lie_g_chain(sys, h_fn, x, kmax)
    for k in range(1, kmax + 1):
        scale = 1.0 + abs(drift[k])
        if abs(vals[k - 1]) > tol * scale:
            return k
    return None


@dataclass
class PointRecord:
    """Per-point outcome of a geometric property check."""

    x: list
    values: dict
    passed: Optional[bool]
    excluded: bool = False
    note: Optional[str] = None

    def to_json_dict(self) -> dict:
        out = {"x": self.x, "values": self.values, "pass": self.passed}
        if self.excluded:
            out["excluded"] = True
        if self.note:
            out["note"] = self.note
        return out


@dataclass
class GeometryReport:
    """Aggregated verdict of a property over sampled points."""

    property_name: str
    tolerance: float
    points: list
    verdict: bool
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        out = {
            "property": self.property_name,
            "tolerance": self.tolerance,
            "points": [p.to_json_dict() for p in self.points],
            "verdict": "pass" if self.verdict else "fail",
        }
        out.update(self.extra)
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")


def distribution_rank(
    f_fn,
    g_fn,
    span_depth: int,
    points: Sequence[np.ndarray],
    tol: float = 1e-6,
    expected_rank: Optional[int] = None,
) -> GeometryReport:
    """Numerical rank of [g, ad_f g, ..., ad_f^{span_depth-1} g] at each point.

    Singular values below tol * sigma_max are treated as zero. The verdict is
    pass when every point matches ``expected_rank`` (or, if none is given,
    when the rank is constant across points).
    """
    if span_depth < 1:
        raise ValueError(f"span_depth must be >= 1, got {span_depth}")
    records = []
    ranks = []
    for x in points:
        x = np.asarray(x, dtype=float)
        try:
            chain = adjoint_chain(f_fn, g_fn, span_depth - 1, x)
        except DomainError as exc:
            records.append(
                PointRecord(x.tolist(), {}, None, excluded=True, note=str(exc))
            )
            continue
        mat = np.column_stack(chain)
        sigma = np.linalg.svd(mat, compute_uv=False)
        smax = sigma[0] if sigma.size else 0.0
        rank = int(np.sum(sigma > tol * smax)) if smax > 0 else 0
        ranks.append(rank)
        ok = (rank == expected_rank) if expected_rank is not None else None
        records.append(
            PointRecord(
                x.tolist(),
                {"rank": rank, "singular_values": sigma.tolist()},
                ok,
            )
        )
    if expected_rank is not None:
        verdict = bool(ranks) and all(r == expected_rank for r in ranks)
    else:
        verdict = bool(ranks) and len(set(ranks)) == 1
        for rec in records:
            if not rec.excluded:
                rec.passed = verdict
    return GeometryReport(
        "distribution_rank",
        tol,
        records,
        verdict,
        extra={"span_depth": span_depth, "expected_rank": expected_rank},
    )


def involutivity_check(
    f_fn,
    g_fn,
    span_depth: int,
    points: Sequence[np.ndarray],
    tol: float = 1e-4,
) -> GeometryReport:
    """Check closure of span{g, ad_f g, ...} under pairwise Lie brackets.

    At each point, every pairwise bracket of the spanning fields is projected
    onto the span; the relative projection residual must not exceed ``tol``.
    Points where the span itself is rank deficient are excluded with a note.
    """
    if span_depth < 1:
        raise ValueError(f"span_depth must be >= 1, got {span_depth}")

    spanning = [g_fn]
    for level in range(1, span_depth):
        inner = spanning[-1]
        step = _level_step(level)

        def next_field(y, inner=inner, step=step):
            return lie_bracket(f_fn, inner, y, h=step)

        spanning.append(next_field)

    records = []
    for x in points:
        x = np.asarray(x, dtype=float)
        try:
            delta = np.column_stack([np.asarray(F(x), dtype=float) for F in spanning])
            sigma = np.linalg.svd(delta, compute_uv=False)
            if sigma.size == 0 or sigma[0] == 0 or sigma[-1] < 1e-8 * sigma[0]:
                records.append(
                    PointRecord(
                        x.tolist(), {}, None, excluded=True,
                        note="rank-deficient span",
                    )
                )
                continue
            proj = delta @ np.linalg.pinv(delta)
            residuals = {}
            ok = True
            bracket_step = _level_step(span_depth)
            for i in range(span_depth):
                for j in range(i + 1, span_depth):
                    br = lie_bracket(spanning[i], spanning[j], x, h=bracket_step)
                    res = float(
                        np.linalg.norm(br - proj @ br)
                        / (np.linalg.norm(br) + 1e-12)
                    )
                    residuals[f"[F{i},F{j}]"] = res
                    ok = ok and res <= tol
        except DomainError as exc:
            records.append(
                PointRecord(x.tolist(), {}, None, excluded=True, note=str(exc))
            )
            continue
        records.append(PointRecord(x.tolist(), {"residuals": residuals}, ok))
    active = [r for r in records if not r.excluded]
    verdict = bool(active) and all(r.passed for r in active)
    return GeometryReport(
        "involutivity", tol, records, verdict, extra={"span_depth": span_depth}
    )


def check_nilpotency(
    sys: ControlAffineSystem,
    h_fn,
    alpha,
    r: int,
    points: Sequence[np.ndarray],
    tol: float = 1e-4,
) -> GeometryReport:
    """Verify the closed-loop generator annihilates h at order r and not before.

    The closed-loop field f + g * alpha is probed at each point; the r-th
    derivative of h along its flow must vanish within ``tol`` everywhere,
    while for each k < r the k-th derivative must be nonzero at some sampled
    point (the iterated derivative is a nonzero function even though it may
    vanish on thin sets). Points inside a declared singular margin or where
    alpha fails to evaluate are excluded with a note.
    """
    if r < 1:
        raise ValueError(f"nilpotency index must be >= 1, got {r}")

    def closed_loop(y):
        return np.asarray(sys.f(y), dtype=float) + np.asarray(
            sys.g(y), dtype=float
        ) * float(alpha(y))

    records = []
    lower_max = np.zeros(r)
    for x in points:
        x = np.asarray(x, dtype=float)
        if sys.in_singular_margin(x):
            records.append(
                PointRecord(
                    x.tolist(), {}, None, excluded=True,
                    note="inside declared singular margin",
                )
            )
            continue
        try:
            derivs = flow_scalar_derivatives(closed_loop, h_fn, x, r)
        except (DomainError, FloatingPointError, ZeroDivisionError) as exc:
            records.append(
                PointRecord(x.tolist(), {}, None, excluded=True, note=str(exc))
            )
            continue
        residual = abs(float(derivs[r]))
        ok = residual <= tol
        lower_max = np.maximum(lower_max, np.abs(derivs[:r]))
        records.append(
            PointRecord(
                x.tolist(),
                {"derivatives": derivs.tolist(), "residual": residual},
                ok,
            )
        )
    active = [rec for rec in records if not rec.excluded]
    residual_ok = bool(active) and all(rec.passed for rec in active)
    nonzero_ok = bool(active) and bool(np.all(lower_max > tol))
    verdict = residual_ok and nonzero_ok
    return GeometryReport(
        "nilpotency",
        tol,
        records,
        verdict,
        extra={
            "index": r,
            "lower_order_max": lower_max.tolist(),
            "unchecked": ["stable_subspace_gateaux_condition"],
        },
    )
