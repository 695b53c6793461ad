"""Control-affine systems, fixed-step integration, and excitation data collection.

Systems have single-input dynamics xdot = f(x) + g(x) * u. The module ships
the built-in testbeds (a Van der Pol oscillator with the input entering
nonlinearly, a 6-dimensional chain with nonlinear input gain, and a
3-dimensional input-output example), a classical RK4 integrator with
zero-order-hold inputs, and CSV persistence for trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DivergenceError, DomainError, TrajectoryParseError

DIVERGENCE_LIMIT = 1e9
EXCITATION_RETRY_CAP = 5

# Margin kept around declared singular coordinate levels when sampling
# verification points.
SINGULAR_MARGIN = 0.1


@dataclass(frozen=True)
class ControlAffineSystem:
    """Single-input control-affine system xdot = f(x) + g(x) * u.

    ``domain_box`` is an (n, 2) array of per-coordinate bounds on which f and
    g are assumed Lipschitz. ``singular_levels`` lists (coordinate, value)
    pairs where the input channel of the model-based control transform
    degenerates; verification utilities exclude points near these levels.
    """

    name: str
    n: int
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    domain_box: np.ndarray
    singular_levels: tuple = ()

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"state dimension must be >= 1, got {self.n}")
        box = np.asarray(self.domain_box, dtype=float)
        if box.shape != (self.n, 2):
            raise ValueError(f"domain_box must have shape ({self.n}, 2)")
        object.__setattr__(self, "domain_box", box)

    def in_singular_margin(self, x: np.ndarray, margin: float = SINGULAR_MARGIN) -> bool:
        """True when x lies within ``margin`` of a declared singular level."""
        return any(abs(x[i] - level) < margin for i, level in self.singular_levels)


@dataclass(frozen=True)
class Trajectory:
    """Sampled trajectory: states x_0..x_N, inputs u applied with zero-order hold.

    ``states`` is n x (N+1); ``inputs`` has length N, with inputs[t] held on
    the interval [t, t+1) * tau (it drives x_t to x_{t+1}). ``exact_derivs``
    optionally stores xdot = f(x_t) + g(x_t) * inputs[t] for t = 0..N-1,
    which known testbed models can record exactly.
    """

    tau: float
    states: np.ndarray
    inputs: np.ndarray
    exact_derivs: Optional[np.ndarray] = None
    seed: Optional[int] = None

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        inputs = np.asarray(self.inputs, dtype=float)
        if states.ndim != 2:
            raise ValueError("states must be a 2-D array (n rows, N+1 columns)")
        if states.shape[1] != inputs.shape[0] + 1:
            raise ValueError(
                f"states has {states.shape[1]} columns but inputs has length "
                f"{inputs.shape[0]}; expected columns = inputs + 1"
            )
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not np.all(np.isfinite(states)) or not np.all(np.isfinite(inputs)):
            raise ValueError("trajectory contains non-finite entries")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)
        if self.exact_derivs is not None:
            derivs = np.asarray(self.exact_derivs, dtype=float)
            if derivs.shape != (states.shape[0], inputs.shape[0]):
                raise ValueError(
                    f"exact_derivs shape {derivs.shape} does not match "
                    f"(n, N) = ({states.shape[0]}, {inputs.shape[0]})"
                )
            object.__setattr__(self, "exact_derivs", derivs)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def num_steps(self) -> int:
        return self.inputs.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.tau * np.arange(self.states.shape[1])


def eval_dynamics(sys: ControlAffineSystem, x: np.ndarray, u: float) -> np.ndarray:
    """Evaluate xdot = f(x) + g(x) * u with dimension and finiteness checks."""
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.n,):
        raise ValueError(f"state has shape {x.shape}, expected ({sys.n},)")
    if not np.all(np.isfinite(x)) or not np.isfinite(u):
        raise ValueError("non-finite state or input")
    out = sys.f(x) + sys.g(x) * u
    if not np.all(np.isfinite(out)):
        raise DomainError(f"dynamics of '{sys.name}' non-finite at x={x}, u={u}")
    return out


def vanderpol() -> ControlAffineSystem:
    """Van der Pol oscillator with the input entering through (1 - x2^2)."""

    def f(x):
        return np.array([x[1], -x[0] + 0.5 * (1.0 - x[0] ** 2) * x[1]])

    def g(x):
        return np.array([0.0, 1.0 - x[1] ** 2])

    box = np.array([[-5.0, 5.0], [-5.0, 5.0]])
    return ControlAffineSystem(
        "vanderpol", 2, f, g, box, singular_levels=((1, 1.0), (1, -1.0))
    )


def sixdim(coeffs: Optional[Sequence[float]] = None, seed: Optional[int] = None) -> ControlAffineSystem:
    """Six-dimensional chain with quadratic/sinusoidal drift and gain (1 - x1^2).

    Dynamics: xdot_i = a_i x_{i+1} for i = 1..5 and
    xdot_6 = a6 x1^2 - a7 sin(x2) + a8 x3^2 + a9 x4^2 + a10 (1 - x1^2) u.

    With ``seed``, the ten coefficients are drawn from a standard Gaussian and
    redrawn until the chain coefficients a1..a5 and the input coefficient a10
    have magnitude >= 0.1, which keeps the chain controllable and the control
    gain bounded. Explicit coefficients are validated instead: an exactly-zero
    chain or input coefficient is rejected.
    """
    if coeffs is not None:
        a = np.asarray(coeffs, dtype=float)
        if a.shape != (10,):
            raise ValueError(f"expected 10 coefficients, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("coefficients must be finite")
        critical = list(a[:5]) + [a[9]]
        if any(c == 0.0 for c in critical):
            raise ValueError(
                "chain coefficients a1..a5 and input coefficient a10 must be nonzero"
            )
    elif seed is not None:
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x6D)))
        for _ in range(1000):
            a = rng.standard_normal(10)
            if np.all(np.abs(np.concatenate([a[:5], a[9:10]])) >= 0.1):
                break
        else:  # pragma: no cover - vanishing probability
            raise RuntimeError("could not sample admissible coefficients")
    else:
        raise ValueError("provide either explicit coefficients or a seed")

    a = np.array(a, dtype=float)

    def f(x, a=a):
        out = np.empty(6)
        out[:5] = a[:5] * x[1:6]
        out[5] = (
            a[5] * x[0] ** 2
            - a[6] * math.sin(x[1])
            + a[7] * x[2] ** 2
            + a[8] * x[3] ** 2
        )
        return out

    def g(x, a=a):
        out = np.zeros(6)
        out[5] = a[9] * (1.0 - x[0] ** 2)
        return out

    box = np.repeat([[-5.0, 5.0]], 6, axis=0)
    system = ControlAffineSystem(
        "sixdim", 6, f, g, box, singular_levels=((0, 1.0), (0, -1.0))
    )
    object.__setattr__(system, "coeffs", a)
    return system


def example_io_system() -> ControlAffineSystem:
    """Three-state system that is input-output but not full-state linearizable."""

    def f(x):
        return np.array([2.0 * x[2] ** 2, -1.0, 0.0])

    def g(x):
        return np.array([-x[0], -2.0 * x[1], 0.5 * x[2]])

    box = np.repeat([[-5.0, 5.0]], 3, axis=0)
    return ControlAffineSystem("example_io", 3, f, g, box)


def rk4_step(sys: ControlAffineSystem, x: np.ndarray, u: float, tau: float) -> np.ndarray:
    """One classical 4th-order Runge-Kutta step with u held constant."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    x = np.asarray(x, dtype=float)
    k1 = eval_dynamics(sys, x, u)
    stages = [("k1", k1)]
    k2 = eval_dynamics(sys, x + 0.5 * tau * k1, u)
    stages.append(("k2", k2))
    k3 = eval_dynamics(sys, x + 0.5 * tau * k2, u)
    stages.append(("k3", k3))
    k4 = eval_dynamics(sys, x + tau * k3, u)
    stages.append(("k4", k4))
    for name, k in stages:
        if not np.all(np.isfinite(k)):
            raise DivergenceError(f"non-finite RK4 stage {name} at x={x}")
    out = x + (tau / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"non-finite RK4 result at x={x}")
    return out


def simulate(
    sys: ControlAffineSystem,
    x0: np.ndarray,
    policy: Callable[[int, np.ndarray], float],
    tau: float,
    steps: int,
    seed: Optional[int] = None,
) -> Trajectory:
    """Integrate under a state-feedback policy; record exact derivatives.

    ``policy(t_index, x)`` returns the input held over [t, t+1) * tau. Raises
    DivergenceError carrying the partial trajectory when any state coordinate
    exceeds 1e9 in magnitude.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (sys.n,):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({sys.n},)")

    states = np.empty((sys.n, steps + 1))
    inputs = np.empty(steps)
    derivs = np.empty((sys.n, steps))
    states[:, 0] = x0
    for t in range(steps):
        x = states[:, t]
        u = float(policy(t, x))
        inputs[t] = u
        derivs[:, t] = eval_dynamics(sys, x, u)
        try:
            x_next = rk4_step(sys, x, u, tau)
        except DivergenceError as exc:
            partial = Trajectory(
                tau, states[:, : t + 1], inputs[:t], derivs[:, :t], seed
            )
            raise DivergenceError(str(exc), partial=partial) from None
        if np.any(np.abs(x_next) > DIVERGENCE_LIMIT):
            partial = Trajectory(
                tau, states[:, : t + 1], inputs[:t], derivs[:, :t], seed
            )
            raise DivergenceError(
                f"state exceeded {DIVERGENCE_LIMIT:g} at step {t + 1}", partial=partial
            )
        states[:, t + 1] = x_next
    return Trajectory(tau, states, inputs, derivs, seed)


def collect_excitation(
    sys: ControlAffineSystem,
    x0: np.ndarray,
    N: int,
    tau: float,
    sigma: float,
    seed: int,
    retry_cap: int = EXCITATION_RETRY_CAP,
) -> Trajectory:
    """Collect N samples under i.i.d. zero-mean Gaussian inputs of std ``sigma``.

    Deterministic given ``seed``. If the trajectory diverges the inputs are
    redrawn from a derived seed, up to ``retry_cap`` retries.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    last_exc = None
    for attempt in range(retry_cap + 1):
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), attempt)))
        inputs = sigma * rng.standard_normal(N)
        try:
            return simulate(
                sys, x0, lambda t, x: inputs[t], tau, N, seed=int(seed)
            )
        except DivergenceError as exc:
            last_exc = exc
    raise DivergenceError(
        f"excitation diverged on all {retry_cap + 1} attempts (seed {seed})",
        partial=getattr(last_exc, "partial", None),
    )


def save_trajectory(traj: Trajectory, path) -> None:
    """Write a trajectory as CSV: header t,x1..xn,u[,dx1..dxn]; final row has empty u."""
    n = traj.n
    cols = ["t"] + [f"x{i + 1}" for i in range(n)] + ["u"]
    has_derivs = traj.exact_derivs is not None
    if has_derivs:
        cols += [f"dx{i + 1}" for i in range(n)]
    lines = [",".join(cols)]
    for t in range(traj.states.shape[1]):
        row = [f"{t * traj.tau:.17g}"]
        row += [f"{v:.17g}" for v in traj.states[:, t]]
        if t < traj.num_steps:
            row.append(f"{traj.inputs[t]:.17g}")
            if has_derivs:
                row += [f"{v:.17g}" for v in traj.exact_derivs[:, t]]
        else:
            row.append("")
            if has_derivs:
                row += [""] * n
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_trajectory(path) -> Trajectory:
    """Read a trajectory CSV produced by :func:`save_trajectory`."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    lines = [ln for ln in lines if ln.strip() != ""]
    if not lines:
        raise TrajectoryParseError("empty trajectory file", line=1)
    header = lines[0].split(",")
    if header[0] != "t":
        raise TrajectoryParseError(f"expected 't' as first column, got {header[0]!r}", line=1)
    state_cols = [c for c in header if c.startswith("x")]
    deriv_cols = [c for c in header if c.startswith("dx")]
    n = len(state_cols)
    if n == 0:
        raise TrajectoryParseError("no state columns in header", line=1)
    expected = ["t"] + [f"x{i + 1}" for i in range(n)] + ["u"]
    if deriv_cols:
        expected += [f"dx{i + 1}" for i in range(n)]
    if header != expected:
        raise TrajectoryParseError(
            f"malformed header {header!r}, expected {expected!r}", line=1
        )

    rows = []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != len(header):
            raise TrajectoryParseError(
                f"row has {len(parts)} fields, expected {len(header)}", line=lineno
            )
        try:
            time = float(parts[0])
            x = [float(v) for v in parts[1 : 1 + n]]
            u = None if parts[1 + n] == "" else float(parts[1 + n])
            if deriv_cols:
                raw = parts[2 + n : 2 + 2 * n]
                dx = None if all(v == "" for v in raw) else [float(v) for v in raw]
            else:
                dx = None
        except ValueError as exc:
            raise TrajectoryParseError(str(exc), line=lineno) from None
        rows.append((time, x, u, dx))

    if len(rows) < 2:
        raise TrajectoryParseError("trajectory needs at least two samples", line=len(lines))
    times = np.array([r[0] for r in rows])
    tau = times[1] - times[0]
    if tau <= 0 or not np.allclose(np.diff(times), tau, rtol=1e-9, atol=1e-12):
        raise TrajectoryParseError("time column is not uniformly spaced", line=2)
    states = np.array([r[1] for r in rows]).T
    if rows[-1][2] is not None:
        raise TrajectoryParseError("final row must have empty input", line=len(lines))
    inputs = np.array([r[2] for r in rows[:-1]], dtype=float)
    if any(r[2] is None for r in rows[:-1]):
        bad = next(i for i, r in enumerate(rows[:-1]) if r[2] is None)
        raise TrajectoryParseError("missing input value", line=bad + 2)
    derivs = None
    if deriv_cols:
        body = [r[3] for r in rows[:-1]]
        if any(d is None for d in body):
            bad = next(i for i, d in enumerate(body) if d is None)
            raise TrajectoryParseError("missing derivative values", line=bad + 2)
        derivs = np.array(body, dtype=float).T
    return Trajectory(tau, states, inputs, derivs)
