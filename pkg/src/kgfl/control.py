"""Closed-loop application of linearizing transformations.

Pole placement for the integrator-chain pair, inversion of the control
transform u = (v - zeta) / eta, closed-loop simulation with runtime
estimation of the transformed state from output history, analytic
model-based transforms for the built-in testbeds, and the trajectory
deviation loss used by the sweep experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from .dictionary import Dictionary, eval_dictionary, eval_dictionary_gradient
from .errors import DivergenceError, SingularControlError
from .solvers import TransformParams, brunovsky
from .systems import ControlAffineSystem, Trajectory, eval_dynamics, rk4_step

ETA_MIN = 1e-6
# Closed-loop runs substitute u = 0 while the control map is near singular;
# they abort only when the singularity persists this many consecutive steps.
SINGULAR_STEP_CAP = 50


@dataclass(frozen=True)
class FeedbackGain:
    """Row gain F with v = F z placing the chain poles at ``poles``."""

    F: np.ndarray
    poles: tuple

    @property
    def r(self) -> int:
        return self.F.shape[0]


def pole_place(r: int, poles: Sequence[complex]) -> FeedbackGain:
    """Companion-form pole placement for the integrator-chain pair.

    For target polynomial s^r + a_{r-1} s^{r-1} + ... + a_0 the gain is
    F = -(a_0, a_1, ..., a_{r-1}). The pole set must be closed under
    conjugation.
    """
    poles = [complex(p) for p in poles]
    if len(poles) != r:
        raise ValueError(f"expected {r} poles, got {len(poles)}")
    key = lambda z: (round(z.real, 9), round(z.imag, 9))
    if sorted(map(key, poles)) != sorted(key(z.conjugate()) for z in poles):
        raise ValueError("pole set must be closed under conjugation")
    coeffs = np.poly(poles)  # descending powers, monic
    if np.max(np.abs(coeffs.imag)) > 1e-9 * max(1.0, np.max(np.abs(coeffs))):
        raise ValueError("pole set must be closed under conjugation")
    coeffs = coeffs.real
    F = -coeffs[1:][::-1]
    pair = brunovsky(r)
    closed = pair.A + np.outer(pair.B, F)
    achieved = np.poly(closed).real
    if not np.allclose(achieved, coeffs, atol=1e-10 * max(1.0, np.max(np.abs(coeffs)))):
        raise ValueError("companion-form placement failed verification")
    return FeedbackGain(F, tuple(poles))


@dataclass(frozen=True)
class ModelTransform:
    """Analytic linearizing transform of a known model.

    ``chain`` holds the observable and its drift derivatives, so the
    transformed state is exact; ``zeta_fn`` and ``eta_fn`` give the inverse
    control transform v = zeta(x) + eta(x) u.
    """

    name: str
    r: int
    chain: tuple
    zeta_fn: Callable[[np.ndarray], float]
    eta_fn: Callable[[np.ndarray], float]

    def state_transform(self, x: np.ndarray) -> np.ndarray:
        return np.array([fn(x) for fn in self.chain])

    def hhat(self, x: np.ndarray) -> float:
        return float(self.chain[0](x))

    def zeta(self, x: np.ndarray) -> float:
        return float(self.zeta_fn(x))

    def eta(self, x: np.ndarray) -> float:
        return float(self.eta_fn(x))

    def alpha(self, x: np.ndarray) -> float:
        """Model feedback -zeta / eta; singular where eta vanishes."""
        eta = self.eta(x)
        if eta == 0.0:
            raise SingularControlError("eta vanishes", x=np.asarray(x))
        return -self.zeta(x) / eta

    def beta(self, x: np.ndarray) -> float:
        eta = self.eta(x)
        if eta == 0.0:
            raise SingularControlError("eta vanishes", x=np.asarray(x))
        return 1.0 / eta


def vdp_model_oracle() -> ModelTransform:
    """Exact linearizing transform of the Van der Pol testbed.

    With h = x1 the chain is (x1, x2) and the inverse control transform is
    zeta = -x1 + 0.5 (1 - x1^2) x2 (the second drift component) and
    eta = 1 - x2^2 (the input gain), so that v = zeta + eta u renders
    zdot = A z + B v exactly away from x2 = +-1.
    """
    zeta = lambda x: -x[0] + 0.5 * (1.0 - x[0] ** 2) * x[1]
    eta = lambda x: 1.0 - x[1] ** 2
    return ModelTransform(
        "vanderpol_oracle",
        2,
        (lambda x: x[0], lambda x: x[1]),
        zeta,
        eta,
    )


def sixdim_model_oracle(coeffs: np.ndarray) -> ModelTransform:
    """Exact linearizing transform of the 6-dimensional chain testbed."""
    a = np.asarray(coeffs, dtype=float)
    scale = np.concatenate([[1.0], np.cumprod(a[:5])])  # z_k = scale[k-1] x_k
    chain = tuple(
        (lambda x, k=k: scale[k] * x[k]) for k in range(6)
    )
    c6 = scale[5]

    def zeta(x, a=a, c6=c6):
        drift = (
            a[5] * x[0] ** 2
            - a[6] * np.sin(x[1])
            + a[7] * x[2] ** 2
            + a[8] * x[3] ** 2
        )
        return c6 * drift

    def eta(x, a=a, c6=c6):
        return c6 * a[9] * (1.0 - x[0] ** 2)

    return ModelTransform("sixdim_oracle", 6, chain, zeta, eta)


def model_oracle_for(sys: ControlAffineSystem) -> Optional[ModelTransform]:
    """Analytic transform of a built-in testbed, when one exists."""
    if sys.name == "vanderpol":
        return vdp_model_oracle()
    if sys.name == "sixdim" and hasattr(sys, "coeffs"):
        return sixdim_model_oracle(sys.coeffs)
    return None


def control_from_v(transform, point: np.ndarray, v: float, eta_min: float = ETA_MIN) -> float:
    """Invert the control transform: u = (v - zeta) / eta.

    ``point`` is the state for full-state transforms and the stacked output
    for input-output transforms. Raises SingularControlError when
    |eta| < eta_min.
    """
    zeta = transform.zeta(point)
    eta = transform.eta(point)
    if abs(eta) < eta_min:
        raise SingularControlError(
            f"|eta| = {abs(eta):.3e} below {eta_min:.1e}", x=np.asarray(point)
        )
    return (v - zeta) / eta


def onesided_stencil(width: int, tau: float, max_order: int) -> np.ndarray:
    """Derivative weights at the newest of ``width`` trailing samples.

    Row m gives the m-th derivative estimate as weights over the window
    (oldest first). Orders beyond width - 1 cannot be estimated and get zero
    rows.
    """
    offsets = np.arange(width) - (width - 1)
    V = np.vander(offsets.astype(float), width, increasing=True).T  # V[k,i] = s_i^k
    weights = np.zeros((max_order + 1, width))
    for m in range(min(max_order, width - 1) + 1):
        rhs = np.zeros(width)
        rhs[m] = math.factorial(m)
        a = np.linalg.solve(V, rhs)
        weights[m] = a / tau**m
    return weights


class DerivativeWindow:
    """Backward-looking derivative stack of a scalar signal.

    Push one sample per control period; ``stack()`` then returns the signal
    and its first r-1 time derivatives at the current sample, estimated from
    the trailing window with one-sided stencils. Early in a run, before the
    window fills, higher derivatives degrade to shorter stencils (zero when
    fewer than m+1 samples exist).
    """

    def __init__(self, r: int, tau: float, width: Optional[int] = None):
        if r < 1:
            raise ValueError(f"r must be >= 1, got {r}")
        self.r = r
        self.tau = tau
        self.width = width if width is not None else r + 2
        if self.width < r:
            raise ValueError("window must hold at least r samples")
        self._buffer: list = []
        self._weights = {
            w: onesided_stencil(w, tau, r - 1) for w in range(1, self.width + 1)
        }

    def push(self, value: float) -> None:
        self._buffer.append(float(value))
        if len(self._buffer) > self.width:
            self._buffer.pop(0)

    def stack(self) -> np.ndarray:
        if not self._buffer:
            raise ValueError("no samples pushed yet")
        w = len(self._buffer)
        return self._weights[w] @ np.asarray(self._buffer)


class ChainObserver:
    """Luenberger observer on the integrator-chain pair driven by v.

    Reconstructs the transformed state from the measured scalar observable.
    Repeated backward differentiation of the observable is hopeless beyond
    two or three derivative orders, while the chain structure makes the pair
    observable from its first coordinate, so a standard output-injection
    observer recovers the stack robustly. Observer poles default to 4x the
    magnitude of the slowest intended control pole.
    """

    def __init__(self, r: int, tau: float, poles: Optional[Sequence[complex]] = None,
                 substeps: int = 10):
        if r < 1:
            raise ValueError(f"r must be >= 1, got {r}")
        self.r = r
        self.tau = tau
        if poles is None:
            # Modest poles: companion observer gains grow like the pole
            # product, and aggressive choices peak badly at high order.
            poles = [-2.5 - 0.25 * k for k in range(r)]
        coeffs = np.poly([complex(p) for p in poles]).real  # monic, descending
        # Companion observer gain for output = first chain coordinate.
        self.L = coeffs[1:].copy()
        pair = brunovsky(r)
        self.A = pair.A
        self.B = pair.B
        self.substeps = max(1, substeps)
        self.zhat = np.zeros(r)
        self._started = False

    def update(self, y: float, v_prev: float) -> np.ndarray:
        """Advance one sampling period with held v, then correct with y."""
        if not self._started:
            self.zhat[0] = y
            self._started = True
            return self.zhat.copy()
        h = self.tau / self.substeps
        z = self.zhat
        for _ in range(self.substeps):
            z = z + h * (self.A @ z + self.B * v_prev + self.L * (y - z[0]))
        self.zhat = z
        return self.zhat.copy()


@dataclass
class ClosedLoopResult:
    """Closed-loop run artifacts: trajectory plus transformed coordinates."""

    trajectory: Trajectory
    Z: np.ndarray  # (r, samples)
    V: np.ndarray  # (steps,)
    completed: bool
    singular_steps: list = field(default_factory=list)
    note: Optional[str] = None


def state_transform(
    transform,
    x: Optional[np.ndarray] = None,
    xdot: Optional[np.ndarray] = None,
    history: Optional[Sequence[float]] = None,
    tau: Optional[float] = None,
) -> np.ndarray:
    """Transformed state z for a single query.

    Analytic transforms evaluate their chain at ``x``. Learned full-state
    transforms use the exact derivative channel when ``xdot`` is supplied
    (r = 2) and otherwise need a trailing ``history`` of observable values
    with sampling interval ``tau``; learned IO transforms need the output
    history.
    """
    if isinstance(transform, ModelTransform):
        if x is None:
            raise ValueError("analytic transforms need the state x")
        return transform.state_transform(x)
    params: TransformParams = transform
    if params.mode == "fullstate" and xdot is not None:
        if params.r != 2:
            raise ValueError("exact-derivative transform only supports r = 2")
        x = np.asarray(x, dtype=float)
        phi = eval_dictionary(params.phi_dict, x)
        grad = eval_dictionary_gradient(params.phi_dict, x)
        return np.array([params.K @ phi, params.K @ (grad @ np.asarray(xdot))])
    if history is None or tau is None:
        raise ValueError("learned transforms need an observable history and tau")
    window = DerivativeWindow(params.r, tau)
    for value in history:
        window.push(value)
    return window.stack()


def closed_loop_simulate(
    sys: ControlAffineSystem,
    transform,
    gain: FeedbackGain,
    x0: np.ndarray,
    tau: float,
    t_end: float,
    output_fn: Optional[Callable[[np.ndarray], float]] = None,
    eta_min: float = 1e-3,
    u_max: Optional[float] = None,
    window: Optional[int] = None,
    estimator: str = "auto",
    observer_poles: Optional[Sequence[complex]] = None,
    warmup: float = 0.0,
    singular_cap: int = SINGULAR_STEP_CAP,
) -> ClosedLoopResult:
    """Run the loop z -> v = F z -> u = (v - zeta) / eta -> integrate.

    Learned transforms estimate z from the measured stream of the learned
    observable (full-state) or of the output (IO mode, which needs
    ``output_fn``): a trailing derivative window for shallow stacks, a chain
    observer for deep ones (``estimator`` one of auto, window, observer).
    While the control map is near singular the input is set to zero for that
    step and the step index recorded; the run aborts early only if the
    singularity persists for ``singular_cap`` consecutive steps or the state
    diverges. ``u_max`` optionally saturates the input (learned control maps
    can have spurious small-eta regions); saturated steps are recorded in
    ``singular_steps`` as well. ``warmup`` holds u = 0 for the given initial
    time span so an observer can lock before the loop closes; the observer is
    always driven with the v consistent with the input actually applied
    (anti-windup), not the raw feedback request.
    """
    if gain.r != transform.r:
        raise ValueError(f"gain dimension {gain.r} != transform dimension {transform.r}")
    steps = int(round(t_end / tau))
    if steps < 1:
        raise ValueError("t_end must cover at least one step")
    x0 = np.asarray(x0, dtype=float)

    analytic = isinstance(transform, ModelTransform)
    io_mode = (not analytic) and transform.mode == "io"
    if io_mode and output_fn is None:
        raise ValueError("IO transforms need output_fn to measure y")
    has_chain = (not analytic) and getattr(transform, "chain_coeffs", None) is not None
    if estimator == "auto":
        if (not analytic) and not io_mode and has_chain:
            estimator = "chain"
        else:
            estimator = "observer" if transform.r >= 3 else "window"
    win = None
    if not analytic and estimator != "chain":
        if estimator == "window":
            win = DerivativeWindow(transform.r, tau, window)
        elif estimator == "observer":
            win = ChainObserver(transform.r, tau, poles=observer_poles)
        else:
            raise ValueError(f"unknown estimator {estimator!r}")
    elif estimator == "chain" and not has_chain:
        raise ValueError("transform carries no chain coefficients")

    n = sys.n
    states = np.empty((n, steps + 1))
    inputs = np.empty(steps)
    derivs = np.empty((n, steps))
    Z = np.empty((transform.r, steps + 1))
    V = np.empty(steps)
    states[:, 0] = x0

    singular_steps = []
    consecutive = 0
    completed = True
    note = None
    v_prev = 0.0
    t = 0

    def estimate_z(x):
        if analytic:
            return transform.state_transform(x)
        if estimator == "chain":
            return transform.state_chain(x)
        value = output_fn(x) if io_mode else transform.hhat(x)
        if isinstance(win, ChainObserver):
            return win.update(value, v_prev)
        win.push(value)
        return win.stack()

    warmup_steps = int(round(warmup / tau))
    for t in range(steps):
        x = states[:, t]
        z = estimate_z(x)
        Z[:, t] = z
        v = float(gain.F @ z)
        V[t] = v
        point = z if io_mode else x
        saturated = False
        try:
            if t < warmup_steps:
                u = 0.0
                saturated = True
            else:
                u = control_from_v(transform, point, v, eta_min=eta_min)
                if u_max is not None and abs(u) > u_max:
                    u = math.copysign(u_max, u)
                    singular_steps.append(t)
                    saturated = True
            consecutive = 0
        except SingularControlError:
            u = 0.0
            saturated = True
            singular_steps.append(t)
            consecutive += 1
            if consecutive > singular_cap:
                completed = False
                note = f"singular control persisted {consecutive} steps at t={t}"
                break
        if saturated:
            # Drive the observer with the v the plant actually received.
            try:
                v_prev = transform.zeta(point) + transform.eta(point) * u
            except Exception:
                v_prev = 0.0
        else:
            v_prev = v
        inputs[t] = u
        derivs[:, t] = eval_dynamics(sys, x, u)
        try:
            x_next = rk4_step(sys, x, u, tau)
        except DivergenceError:
            completed = False
            note = f"integration diverged at step {t}"
            break
        if np.any(np.abs(x_next) > 1e9):
            completed = False
            note = f"state exceeded 1e9 at step {t}"
            break
        states[:, t + 1] = x_next

    last = t + 1 if completed else t
    if completed:
        Z[:, steps] = estimate_z(states[:, steps])
        traj = Trajectory(tau, states, inputs, derivs)
        return ClosedLoopResult(traj, Z, V, True, singular_steps, note)
    traj = Trajectory(tau, states[:, : last + 1], inputs[:last], derivs[:, :last])
    return ClosedLoopResult(traj, Z[:, : last + 1], V[:last], False, singular_steps, note)


def loss_QT(traj_model: Trajectory, traj_dd: Trajectory, T: float) -> float:
    """Cumulative squared state deviation over the horizon [0, T].

    Both trajectories must share the sampling interval and the initial state
    and must cover the horizon.
    """
    if not np.isclose(traj_model.tau, traj_dd.tau, rtol=1e-9):
        raise ValueError(
            f"sampling intervals differ: {traj_model.tau} vs {traj_dd.tau}"
        )
    if not np.allclose(traj_model.states[:, 0], traj_dd.states[:, 0], atol=1e-9):
        raise ValueError("trajectories start from different states")
    samples = int(np.floor(T / traj_model.tau + 1e-9)) + 1
    if traj_model.states.shape[1] < samples or traj_dd.states.shape[1] < samples:
        raise ValueError(f"trajectories do not cover horizon T={T}")
    diff = traj_model.states[:, :samples] - traj_dd.states[:, :samples]
    return float(np.sum(diff**2))


def baseline_feedback(
    A_lift: np.ndarray,
    B_lift: np.ndarray,
    dictionary: Dictionary,
    n_states: int,
) -> np.ndarray:
    """LQR gain on the lifted linear predictor, weighting the state entries.

    Returns K_lift with u = -K_lift phi(x). The quadratic state weight
    selects the dictionary entries that equal the coordinates, which the
    tensor dictionaries always contain for max_order >= 1.
    """
    M = dictionary.size
    C = np.zeros((n_states, M))
    for idx in dictionary.first_order_indices():
        entry = dictionary.entries[idx]
        coord = next(i for i, o in enumerate(entry.orders) if o == 1)
        C[coord, idx] = 1.0
    Q = C.T @ C + 1e-9 * np.eye(M)
    R = np.array([[1.0]])
    P = scipy.linalg.solve_continuous_are(A_lift, B_lift[:, None], Q, R)
    K = (B_lift @ P)[None, :] / R[0, 0]
    return K[0]


def baseline_closed_loop(
    sys: ControlAffineSystem,
    A_lift: np.ndarray,
    B_lift: np.ndarray,
    dictionary: Dictionary,
    x0: np.ndarray,
    tau: float,
    t_end: float,
) -> tuple:
    """Closed-loop run of the no-transform lifted predictor; returns
    (Trajectory, completed, note)."""
    try:
        K = baseline_feedback(A_lift, B_lift, dictionary, sys.n)
    except Exception as exc:  # ARE can fail on unstabilizable lifts
        K = None
        note = f"baseline gain synthesis failed: {exc}"
    steps = int(round(t_end / tau))
    states = np.empty((sys.n, steps + 1))
    inputs = np.empty(steps)
    derivs = np.empty((sys.n, steps))
    states[:, 0] = np.asarray(x0, dtype=float)
    completed = True
    if K is None:
        return None, False, note
    note = None
    t = 0
    for t in range(steps):
        x = states[:, t]
        u = float(-K @ eval_dictionary(dictionary, x))
        inputs[t] = u
        derivs[:, t] = eval_dynamics(sys, x, u)
        try:
            x_next = rk4_step(sys, x, u, tau)
        except DivergenceError:
            completed = False
            note = f"baseline loop diverged at step {t}"
            break
        if np.any(np.abs(x_next) > 1e9):
            completed = False
            note = f"baseline state exceeded 1e9 at step {t}"
            break
        states[:, t + 1] = x_next
    if completed:
        return Trajectory(tau, states, inputs, derivs), True, note
    return (
        Trajectory(tau, states[:, : t + 1], inputs[:t], derivs[:, :t]),
        False,
        note,
    )
