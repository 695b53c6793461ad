"""Least-squares identification of linearizing state/control transformations.

The fits estimate coefficient vectors K, G, J so that the lifted state
z = D(x) K follows the integrator-chain pair (A, B) under the inverse control
transform v = G' theta + J' gamma * u. Three routes are provided: an
iterative gradient method with sequential K, G, J updates, an alternating
exact least-squares variant, and closed-form single-step pseudoinverse
solutions for both the full-state and the input-output problem. A lifted
linear predictor with no control transformation is included as a baseline.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import scipy.linalg
from scipy.optimize import brentq

from .dictionary import (
    Dictionary,
    StackedDictionaryData,
    build_stacked_data,
    eval_dictionary,
    eval_dictionary_gradient,
    eval_dictionary_matrix,
    finite_difference,
    input_matching_weights,
    output_derivative_stack,
)
from .errors import FitDivergenceError, RankDeficiencyWarning
from .systems import Trajectory


@dataclass(frozen=True)
class BrunovskyPair:
    """Integrator-chain target pair: A is the r x r upper shift, B = e_r."""

    r: int
    A: np.ndarray
    B: np.ndarray


def brunovsky(r: int) -> BrunovskyPair:
    """Build the r-dimensional integrator-chain pair."""
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    A = np.eye(r, k=1)
    B = np.zeros(r)
    B[-1] = 1.0
    return BrunovskyPair(r, A, B)


def pseudoinverse(mat: np.ndarray, rtol: Optional[float] = None) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD with relative singular-value cutoff."""
    mat = np.asarray(mat, dtype=float)
    if not np.all(np.isfinite(mat)):
        raise ValueError("matrix contains non-finite entries")
    if rtol is None:
        rtol = max(mat.shape) * np.finfo(float).eps
    return np.linalg.pinv(mat, rcond=rtol)


def _warn_if_rank_deficient(mat: np.ndarray, label: str) -> int:
    rank = np.linalg.matrix_rank(mat)
    if rank < min(mat.shape):
        warnings.warn(
            f"{label} regressor rank {rank} < {min(mat.shape)}; "
            "minimum-norm solution returned",
            RankDeficiencyWarning,
        )
    return rank


def khatri_rao_row(Gamma: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Column-wise scaling of Gamma by the inputs: column t becomes gamma_t * u_t."""
    Gamma = np.asarray(Gamma, dtype=float)
    U = np.asarray(U, dtype=float)
    if Gamma.ndim != 2 or U.ndim != 1 or Gamma.shape[1] != U.shape[0]:
        raise ValueError(
            f"shape mismatch: Gamma {Gamma.shape}, U {U.shape}"
        )
    return Gamma * U[None, :]


# ---------------------------------------------------------------------------
# Fit data


@dataclass
class FitDataset:
    """Aligned per-sample arrays feeding the transformation fits.

    Full-state mode carries the dictionary stacks D, Ddot (T x r x M);
    input-output mode carries the output-derivative stacks Z, Zdot (r x T).
    Theta and Gamma hold the control-transform dictionaries evaluated at the
    aligned points (states in full-state mode, stacked outputs in IO mode).
    ``u`` is the input entering v_t; for finite-difference builds it is the
    stencil-matched effective input by default, with the recorded input kept
    in ``u_raw``.
    """

    mode: str
    r: int
    tau: float
    Theta: np.ndarray
    Gamma: np.ndarray
    u: np.ndarray
    u_raw: np.ndarray
    D: Optional[np.ndarray] = None
    Ddot: Optional[np.ndarray] = None
    Z: Optional[np.ndarray] = None
    Zdot: Optional[np.ndarray] = None
    phi_dict: Optional[Dictionary] = None
    theta_dict: Optional[Dictionary] = None
    gamma_dict: Optional[Dictionary] = None
    retained_range: Optional[range] = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        T = self.u.shape[0]
        arrays = [self.Theta, self.Gamma, self.u, self.u_raw]
        if self.mode == "fullstate":
            if self.D is None or self.Ddot is None:
                raise ValueError("full-state dataset needs D and Ddot stacks")
            arrays += [self.D, self.Ddot]
            if self.D.shape[0] != T or self.Ddot.shape != self.D.shape:
                raise ValueError("stack shapes do not match the sample count")
        elif self.mode == "io":
            if self.Z is None or self.Zdot is None:
                raise ValueError("IO dataset needs Z and Zdot stacks")
            arrays += [self.Z, self.Zdot]
            if self.Z.shape[1] != T or self.Zdot.shape != self.Z.shape:
                raise ValueError("stack shapes do not match the sample count")
        else:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.Theta.shape[1] != T or self.Gamma.shape[1] != T:
            raise ValueError("dictionary matrices do not match the sample count")
        for arr in arrays:
            if not np.all(np.isfinite(arr)):
                raise ValueError("dataset contains non-finite entries")

    @property
    def num_samples(self) -> int:
        return self.u.shape[0]

    @property
    def M(self) -> Optional[int]:
        return None if self.D is None else self.D.shape[2]

    def v_of(self, G: np.ndarray, J: np.ndarray) -> np.ndarray:
        """Transformed input v_t = G' theta_t + J' gamma_t u_t."""
        return self.Theta.T @ G + self.u * (self.Gamma.T @ J)

    # Residual decomposition: with M_t = Ddot_t - A D_t, the rows above the
    # last are independent of v, so the cost splits into a quadratic form in K
    # plus a scalar regression on the last row. ``upper_gram`` caches the Gram
    # matrix of the upper rows and ``last_row`` the last-row regressors.
    def _shifted(self, stack: np.ndarray) -> np.ndarray:
        out = np.zeros_like(stack)
        out[:, :-1, :] = stack[:, 1:, :]
        return out

    def residual_ops(self):
        """(upper_gram, last_row) for full-state or (upper_const, w_last) for IO."""
        if "ops" in self._cache:
            return self._cache["ops"]
        if self.mode == "fullstate":
            Mfull = self.Ddot - self._shifted(self.D)
            upper = Mfull[:, :-1, :].reshape(-1, Mfull.shape[2])
            gram = upper.T @ upper
            last = Mfull[:, -1, :]
            self._cache["ops"] = (gram, last)
        else:
            Wfull = self.Zdot.copy()
            Wfull[:-1, :] -= self.Z[1:, :]
            upper_const = float(np.sum(Wfull[:-1, :] ** 2))
            self._cache["ops"] = (upper_const, Wfull[-1, :])
        return self._cache["ops"]


def fullstate_dataset(
    traj: Trajectory,
    phi_dict: Dictionary,
    theta_dict: Dictionary,
    gamma_dict: Dictionary,
    r: int,
    scheme: str = "central",
    input_matching: bool = True,
) -> FitDataset:
    """Build the full-state fit data from a trajectory.

    theta and gamma are evaluated at the retained states. With
    ``input_matching`` the input column is the stencil-matched moving average
    of the recorded inputs, which removes the attenuation bias that raw
    pairing suffers under zero-order-hold excitation.
    """
    stacked = build_stacked_data(phi_dict, traj, r, scheme)
    idx = stacked.retained_range
    states = traj.states[:, idx.start : idx.stop]
    Theta = eval_dictionary_matrix(theta_dict, states)
    Gamma = eval_dictionary_matrix(gamma_dict, states)
    u = stacked.u_matched if input_matching else stacked.u
    return FitDataset(
        mode="fullstate",
        r=r,
        tau=traj.tau,
        Theta=Theta,
        Gamma=Gamma,
        u=u,
        u_raw=stacked.u,
        D=stacked.D,
        Ddot=stacked.dDdt,
        phi_dict=phi_dict,
        theta_dict=theta_dict,
        gamma_dict=gamma_dict,
        retained_range=idx,
    )


def concat_datasets(datasets) -> FitDataset:
    """Concatenate aligned fit datasets from several trajectories.

    Restarted short excitation bursts are the practical way to cover the
    operating region of unstable testbeds; each burst is lifted separately so
    no finite difference straddles a restart.
    """
    if not datasets:
        raise ValueError("need at least one dataset")
    first = datasets[0]
    for d in datasets[1:]:
        if d.mode != first.mode or d.r != first.r:
            raise ValueError("datasets disagree on mode or stack depth")
        if not np.isclose(d.tau, first.tau, rtol=1e-12):
            raise ValueError("datasets disagree on sampling interval")
    cat = lambda key, axis: np.concatenate([getattr(d, key) for d in datasets], axis=axis)
    common = dict(
        mode=first.mode,
        r=first.r,
        tau=first.tau,
        Theta=cat("Theta", 1),
        Gamma=cat("Gamma", 1),
        u=cat("u", 0),
        u_raw=cat("u_raw", 0),
        phi_dict=first.phi_dict,
        theta_dict=first.theta_dict,
        gamma_dict=first.gamma_dict,
        retained_range=None,
    )
    if first.mode == "fullstate":
        return FitDataset(D=cat("D", 0), Ddot=cat("Ddot", 0), **common)
    return FitDataset(Z=cat("Z", 1), Zdot=cat("Zdot", 1), **common)


def io_dataset_from_series(
    y: np.ndarray,
    inputs: np.ndarray,
    tau: float,
    r: int,
    theta_dict: Dictionary,
    gamma_dict: Dictionary,
    scheme: str = "central",
    input_matching: bool = True,
) -> FitDataset:
    """Build IO fit data from an output series via finite differences."""
    Z, Zdot, retained = output_derivative_stack(y, tau, r, scheme)
    u_raw = np.asarray(inputs, dtype=float)[retained.start : retained.stop]
    if input_matching:
        offsets, weights = input_matching_weights(r, scheme)
        idx = np.arange(retained.start, retained.stop)
        u = np.zeros(len(idx))
        for off, w in zip(offsets, weights):
            u += w * np.asarray(inputs, dtype=float)[idx + off]
    else:
        u = u_raw
    return _io_dataset(Z, Zdot, u, u_raw, tau, r, theta_dict, gamma_dict, retained)


def io_dataset_from_stacks(
    Z: np.ndarray,
    Zdot: np.ndarray,
    u: np.ndarray,
    tau: float,
    theta_dict: Dictionary,
    gamma_dict: Dictionary,
) -> FitDataset:
    """Build IO fit data from externally assembled (e.g. exact) stacks."""
    Z = np.asarray(Z, dtype=float)
    Zdot = np.asarray(Zdot, dtype=float)
    u = np.asarray(u, dtype=float)
    return _io_dataset(Z, Zdot, u, u, tau, Z.shape[0], theta_dict, gamma_dict, None)


def _io_dataset(Z, Zdot, u, u_raw, tau, r, theta_dict, gamma_dict, retained):
    Theta = eval_dictionary_matrix(theta_dict, Z)
    Gamma = eval_dictionary_matrix(gamma_dict, Z)
    return FitDataset(
        mode="io",
        r=r,
        tau=tau,
        Theta=Theta,
        Gamma=Gamma,
        u=u,
        u_raw=u_raw,
        Z=Z,
        Zdot=Zdot,
        theta_dict=theta_dict,
        gamma_dict=gamma_dict,
        retained_range=retained,
    )


# ---------------------------------------------------------------------------
# Cost, gradients, iterative fits


def kgfl_cost(
    K: Optional[np.ndarray],
    G: np.ndarray,
    J: np.ndarray,
    data: FitDataset,
    pair: Optional[BrunovskyPair] = None,
) -> float:
    """Sum over retained samples of || (Ddot_t - A D_t) K - B v_t ||^2.

    In IO mode the state-transform term is replaced by the fixed stacks and K
    is ignored.
    """
    v = data.v_of(G, J)
    if data.mode == "fullstate":
        gram, last = data.residual_ops()
        lastK = last @ K
        return float(K @ gram @ K + np.sum((lastK - v) ** 2))
    upper_const, wlast = data.residual_ops()
    return float(upper_const + np.sum((wlast - v) ** 2))


def kgfl_gradients(
    K: Optional[np.ndarray],
    G: np.ndarray,
    J: np.ndarray,
    data: FitDataset,
    pair: Optional[BrunovskyPair] = None,
):
    """Exact gradients of :func:`kgfl_cost` with respect to K, G, J.

    With M_t = Ddot_t - A D_t and residual E_t = M_t K - B v_t:
    grad_K = 2 sum M_t' E_t, grad_G = -2 sum theta_t (B' E_t),
    grad_J = -2 sum u_t gamma_t (B' E_t). Returns (None, grad_G, grad_J) in
    IO mode.
    """
    v = data.v_of(G, J)
    if data.mode == "fullstate":
        gram, last = data.residual_ops()
        e = last @ K - v
        gK = 2.0 * (gram @ K + last.T @ e)
    else:
        _, wlast = data.residual_ops()
        e = wlast - v
        gK = None
    gG = -2.0 * (data.Theta @ e)
    gJ = -2.0 * (data.Gamma @ (data.u * e))
    return gK, gG, gJ


@dataclass
class TransformParams:
    """Learned transformation coefficients plus fit diagnostics.

    ``K`` weights the state-transform dictionary (None in IO mode), ``G`` and
    ``J`` weight the control-transform dictionaries. The derived maps are
    zeta = G' theta, eta = J' gamma, alpha = -zeta / eta, beta = 1 / eta.
    ``chain_coeffs`` (r x M), when present, expresses every row of the
    transformed state as dictionary coefficients (row 0 equals K), so z can
    be evaluated pointwise from the measured state without runtime
    differentiation; full-state fits populate it by projecting the derivative
    rows of the stacked data back onto the dictionary span.
    """

    mode: str
    r: int
    K: Optional[np.ndarray]
    G: np.ndarray
    J: np.ndarray
    phi_dict: Optional[Dictionary]
    theta_dict: Dictionary
    gamma_dict: Dictionary
    chain_coeffs: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.linalg.norm(self.J) == 0.0:
            raise ValueError(
                "J must not be identically zero (control map would be non-invertible)"
            )
        if self.mode == "fullstate":
            if self.K is None or np.linalg.norm(self.K) == 0.0:
                raise ValueError("full-state transforms need a nonzero K")

    def hhat(self, x: np.ndarray) -> float:
        """Learned observable K' phi(x)."""
        return float(self.K @ eval_dictionary(self.phi_dict, x))

    def zeta(self, point: np.ndarray) -> float:
        return float(self.G @ eval_dictionary(self.theta_dict, point))

    def eta(self, point: np.ndarray) -> float:
        return float(self.J @ eval_dictionary(self.gamma_dict, point))

    def state_chain(self, x: np.ndarray) -> np.ndarray:
        """Transformed state z evaluated pointwise via the learned chain."""
        if self.chain_coeffs is None:
            raise ValueError("transform carries no pointwise chain coefficients")
        return self.chain_coeffs @ eval_dictionary(self.phi_dict, x)

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "r": self.r,
            "K": None if self.K is None else self.K.tolist(),
            "G": self.G.tolist(),
            "J": self.J.tolist(),
            "chain_coeffs": None if self.chain_coeffs is None else self.chain_coeffs.tolist(),
            "dicts": {
                "phi": self.phi_dict.to_descriptor() if self.phi_dict else None,
                "theta": self.theta_dict.to_descriptor(),
                "gamma": self.gamma_dict.to_descriptor(),
            },
            "diagnostics": {
                k: v for k, v in self.diagnostics.items() if _json_safe(v)
            },
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")

    @staticmethod
    def load(path) -> "TransformParams":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        dicts = raw["dicts"]
        chain = raw.get("chain_coeffs")
        return TransformParams(
            mode=raw["mode"],
            r=int(raw["r"]),
            K=None if raw["K"] is None else np.asarray(raw["K"], dtype=float),
            G=np.asarray(raw["G"], dtype=float),
            J=np.asarray(raw["J"], dtype=float),
            phi_dict=Dictionary.from_descriptor(dicts["phi"]) if dicts["phi"] else None,
            theta_dict=Dictionary.from_descriptor(dicts["theta"]),
            gamma_dict=Dictionary.from_descriptor(dicts["gamma"]),
            chain_coeffs=None if chain is None else np.asarray(chain, dtype=float),
            diagnostics=raw.get("diagnostics", {}),
        )


def _json_safe(v) -> bool:
    return isinstance(v, (int, float, str, bool, list, dict, type(None)))


def fit_chain_coeffs(data: FitDataset, K: np.ndarray) -> np.ndarray:
    """Express the derivative rows of the learned observable as dictionary
    coefficients.

    Row k of the stacked data times K samples the k-th time derivative of the
    learned observable along the trajectory; projecting those samples onto
    the lifted states yields z_k as a state function, so the transformed
    state can be evaluated pointwise in closed loop.
    """
    if data.mode != "fullstate":
        raise ValueError("chain coefficients only exist in full-state mode")
    phi_rows = data.D[:, 0, :]  # phi(x_t), since row 0 is the 0th derivative
    rows = [np.asarray(K, dtype=float)]
    for k in range(1, data.r):
        target = data.D[:, k, :] @ K
        w, *_ = np.linalg.lstsq(phi_rows, target, rcond=None)
        rows.append(w)
    return np.vstack(rows)


def default_init(data: FitDataset, seed: Optional[int] = None):
    """Seeded initialization: K picks a random first-order state-transform
    entry, G starts at zero, and J picks the constant control-gain entry so
    the initial eta is 1."""
    rng = np.random.default_rng(seed)
    K = None
    if data.mode == "fullstate":
        K = np.zeros(data.M)
        first = data.phi_dict.first_order_indices() if data.phi_dict else []
        idx = rng.choice(first) if first else 0
        K[idx] = 1.0
    G = np.zeros(data.Theta.shape[0])
    J = np.zeros(data.Gamma.shape[0])
    const = data.gamma_dict.index_of_constant() if data.gamma_dict else None
    J[const if const is not None else 0] = 1.0
    return K, G, J


def _anchor_project(
    K: np.ndarray,
    anchor_vec: Optional[np.ndarray],
    metric: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Project K onto the hyperplane anchor_vec' K = 0.

    With ``metric`` (per-coordinate curvature weights) the correction is
    applied along the least-cost-increase direction, which keeps the
    projection from injecting weight into badly scaled coordinates.
    """
    if anchor_vec is None:
        return K
    direction = anchor_vec if metric is None else anchor_vec / metric
    denom = float(anchor_vec @ direction)
    if denom == 0.0:
        return K
    return K - (float(anchor_vec @ K) / denom) * direction


def screen_init(data: FitDataset):
    """Initialization that screens the first-order entries by chain residual.

    With G = 0 and J = 0 the cost of an indicator K measures how well the
    corresponding coordinate observable follows the integrator chain in the
    data; the best candidate starts the iterative fits. Useful on systems
    where only some coordinates have full relative degree, where a randomly
    picked entry would stall the fit.
    """
    if data.mode != "fullstate":
        return default_init(data)
    zero_G = np.zeros(data.Theta.shape[0])
    zero_J = np.zeros(data.Gamma.shape[0])
    candidates = data.phi_dict.first_order_indices() if data.phi_dict else [0]
    best = None
    for idx in candidates:
        K = np.zeros(data.M)
        K[idx] = 1.0
        c = kgfl_cost(K, zero_G, zero_J, data)
        if best is None or c < best[1]:
            best = (idx, c)
    K = np.zeros(data.M)
    K[best[0]] = 1.0
    G = zero_G.copy()
    J = np.zeros(data.Gamma.shape[0])
    const = data.gamma_dict.index_of_constant() if data.gamma_dict else None
    J[const if const is not None else 0] = 1.0
    return K, G, J


def _jacobi_scales(data: FitDataset):
    """Per-coordinate curvature scales of the cost blocks.

    Finite-difference derivative stacks have column magnitudes spanning many
    orders (entries involving weakly smoothed coordinates blow up under
    repeated differencing), so gradient sweeps are run in column-normalized
    coordinates. Returns (s_K, s_G, s_J) with zeros replaced by one.
    """
    T = max(1, data.num_samples)
    if data.mode == "fullstate":
        gram, last = data.residual_ops()
        colsq = np.sqrt(np.maximum(np.diag(gram) + np.sum(last**2, axis=0), 0.0))
        s_K = colsq / np.sqrt(T)
        s_K[s_K == 0.0] = 1.0
    else:
        s_K = None
    s_G = np.linalg.norm(data.Theta, axis=1) / np.sqrt(T)
    s_G[s_G == 0.0] = 1.0
    s_J = np.linalg.norm(data.Gamma * data.u[None, :], axis=1) / np.sqrt(T)
    s_J[s_J == 0.0] = 1.0
    return s_K, s_G, s_J


def kgfl_fit(
    data: FitDataset,
    epsilon: float = 1e-3,
    sweeps: int = 5000,
    seed: Optional[int] = None,
    init: Optional[tuple] = None,
    normalize: bool = True,
    anchor_point: Optional[np.ndarray] = None,
    precondition: bool = True,
    max_halvings: int = 30,
) -> TransformParams:
    """Iterative gradient fit with sequential K, G, J updates.

    Each sweep updates K first (renormalized to unit norm), then G using the
    fresh K, then J using the fresh K and G. The step applied is
    epsilon / num_samples so the default learning rate is insensitive to the
    data size; with ``precondition`` the sweeps run in column-normalized
    coordinates (a diagonal rescaling, equivalent to running the same updates
    on a rescaled dictionary), without which the derivative stacks of
    higher-order fits are too badly scaled for any single learning rate.
    When the cost exceeds ten times the best seen, the step is halved and the
    best parameters restored; after ``max_halvings`` reductions the fit
    aborts with the cost trace attached.

    ``anchor_point`` constrains the learned observable to vanish at a given
    state (the stabilization target), which pins the closed-loop equilibrium;
    the fit then searches the unit sphere intersected with that hyperplane.
    In IO mode the state transform is fixed apriori and only G, J move.
    """
    if epsilon < 0:
        raise ValueError(f"learning rate must be >= 0, got {epsilon}")
    if sweeps < 1:
        raise ValueError(f"sweeps must be >= 1, got {sweeps}")
    K, G, J = init if init is not None else default_init(data, seed)
    anchor_vec = None
    if data.mode == "fullstate" and anchor_point is not None:
        anchor_vec = eval_dictionary(data.phi_dict, np.asarray(anchor_point, dtype=float))
    if precondition:
        s_K, s_G, s_J = _jacobi_scales(data)
    else:
        s_K = np.ones(data.M) if data.mode == "fullstate" else None
        s_G = np.ones(data.Theta.shape[0])
        s_J = np.ones(data.Gamma.shape[0])

    if K is not None:
        K = _anchor_project(np.asarray(K, dtype=float).copy(), anchor_vec, metric=s_K**2)
        if normalize and np.linalg.norm(K) > 0:
            K = K / np.linalg.norm(K)
    G = np.asarray(G, dtype=float).copy()
    J = np.asarray(J, dtype=float).copy()

    trace = []
    best = (kgfl_cost(K, G, J, data), K.copy() if K is not None else None, G.copy(), J.copy())
    halvings = 0
    step = epsilon / data.num_samples
    cooldown = 0
    for i in range(sweeps):
        if data.mode == "fullstate":
            gK, _, _ = kgfl_gradients(K, G, J, data)
            K = _anchor_project(K - step * gK / s_K**2, anchor_vec, metric=s_K**2)
            if normalize:
                norm = np.linalg.norm(K)
                if norm == 0.0:
                    K = best[1].copy()
                else:
                    K = K / norm
        _, gG, _ = kgfl_gradients(K, G, J, data)
        G = G - step * gG / s_G**2
        _, _, gJ = kgfl_gradients(K, G, J, data)
        J = J - step * gJ / s_J**2
        cost = kgfl_cost(K, G, J, data)
        trace.append(cost)
        if cost < best[0]:
            best = (cost, K.copy() if K is not None else None, G.copy(), J.copy())
        cooldown = max(0, cooldown - 1)
        if not np.isfinite(cost) or (cooldown == 0 and cost > 10.0 * best[0]):
            halvings += 1
            if halvings > max_halvings:
                raise FitDivergenceError(
                    f"cost diverged after {halvings} step reductions", trace=trace
                )
            step *= 0.5
            cooldown = 10
            _, K, G, J = (
                best[0],
                best[1].copy() if best[1] is not None else None,
                best[2].copy(),
                best[3].copy(),
            )
    cost, K, G, J = best
    if np.linalg.norm(J) == 0.0:
        J = default_init(data, seed)[2]
    chain = fit_chain_coeffs(data, K) if data.mode == "fullstate" else None
    return TransformParams(
        mode=data.mode,
        r=data.r,
        K=K,
        G=G,
        J=J,
        phi_dict=data.phi_dict,
        theta_dict=data.theta_dict,
        gamma_dict=data.gamma_dict,
        chain_coeffs=chain,
        diagnostics={
            "method": "kgfl",
            "final_cost": float(cost),
            "sweeps": len(trace),
            "epsilon_final": step,
            "step_halvings": halvings,
            "cost_trace": trace,
        },
    )


def unit_norm_lstsq(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Global minimizer of ||A k - b|| subject to ||k|| = 1.

    Solved through the SVD of A and the secular equation for the Lagrange
    multiplier; when b has no component on the smallest singular direction
    (the hard case) the norm deficit is absorbed by that direction. With
    b = 0 this reduces to the right singular vector of the smallest singular
    value.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    wide = A.shape[0] < A.shape[1]
    U, s, Vt = np.linalg.svd(A, full_matrices=wide)
    Mdim = A.shape[1]
    sig = np.zeros(Mdim)
    sig[: s.shape[0]] = s
    c = np.zeros(Mdim)
    proj = U.T @ b
    c[: proj.shape[0]] = proj
    cutoff = max(A.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    pos = sig > cutoff

    def norm2(lam: float) -> float:
        y = sig[pos] * c[pos] / (sig[pos] ** 2 + lam)
        return float(y @ y)

    sig_min2 = float(np.min(sig[pos] ** 2)) if np.any(pos) else 0.0
    has_null = bool(np.any(~pos))
    lam_lo = 0.0 if has_null else -sig_min2

    y = np.zeros(Mdim)
    if not np.any(pos):
        y[-1] = 1.0
        return Vt.T @ y

    eps_edge = 1e-12 * (sig[pos].max() ** 2 + 1.0)
    phi_edge = norm2(lam_lo + eps_edge)
    if phi_edge >= 1.0:
        hi = max(1.0, sig[pos].max() ** 2)
        while norm2(hi) >= 1.0:
            hi *= 10.0
        lam = brentq(lambda l: norm2(l) - 1.0, lam_lo + eps_edge, hi, xtol=1e-15)
        y[pos] = sig[pos] * c[pos] / (sig[pos] ** 2 + lam)
    else:
        # Hard case: boundary multiplier, norm deficit absorbed by the
        # smallest singular direction (where b has no component).
        y[pos] = sig[pos] * c[pos] / (sig[pos] ** 2 + lam_lo + eps_edge)
        deficit = max(0.0, 1.0 - float(y @ y))
        if has_null:
            null_idx = int(np.where(~pos)[0][0])
            y[null_idx] += np.sqrt(deficit)
        else:
            imin = int(np.argmin(np.where(pos, sig, np.inf)))
            y[imin] += np.sqrt(deficit)
    k = Vt.T @ y
    norm = np.linalg.norm(k)
    return k / norm if norm > 0 else k


def als_fit(
    data: FitDataset,
    sweeps: int = 25,
    seed: Optional[int] = None,
    init: Optional[tuple] = None,
    anchor_point: Optional[np.ndarray] = None,
    rel_tol: float = 1e-14,
) -> TransformParams:
    """Alternating exact least squares: per sweep, the unit-norm K subproblem
    is solved globally, then (G, J) by the closed-form pseudoinverse formula.

    The cost sequence is non-increasing by construction. ``anchor_point``
    restricts the observable to vanish at the stabilization target, as in
    :func:`kgfl_fit`. In IO mode the single (G, J) solve is already exact, so
    one sweep suffices.
    """
    K, G, J = init if init is not None else default_init(data, seed)
    anchor_vec = None
    if data.mode == "fullstate" and anchor_point is not None:
        anchor_vec = eval_dictionary(data.phi_dict, np.asarray(anchor_point, dtype=float))
        if np.linalg.norm(anchor_vec) == 0.0:
            anchor_vec = None
    if K is not None:
        K = _anchor_project(np.asarray(K, dtype=float).copy(), anchor_vec)
        norm = np.linalg.norm(K)
        K = K / norm if norm > 0 else K
    G = np.asarray(G, dtype=float).copy()
    J = np.asarray(J, dtype=float).copy()
    kth = data.Theta.shape[0]

    trace = [kgfl_cost(K, G, J, data)]
    if data.mode == "io":
        _, wlast = data.residual_ops()
        W = np.vstack([data.Theta, khatri_rao_row(data.Gamma, data.u)])
        sol = wlast @ pseudoinverse(W)
        G, J = sol[:kth], sol[kth:]
        trace.append(kgfl_cost(None, G, J, data))
    else:
        _, last = data.residual_ops()
        # Stack the u-free rows and the last row into one operator for the
        # constrained K step; with an anchor the step runs in the hyperplane.
        Mfull = data.Ddot - data._shifted(data.D)
        upper = Mfull[:, :-1, :].reshape(-1, Mfull.shape[2])
        if anchor_vec is not None:
            basis = scipy.linalg.null_space(anchor_vec[None, :])
        else:
            basis = np.eye(data.M)
        stacked_ops = np.vstack([upper, last]) @ basis
        W = np.vstack([data.Theta, khatri_rao_row(data.Gamma, data.u)])
        for _ in range(sweeps):
            v = data.v_of(G, J)
            bstack = np.concatenate([np.zeros(upper.shape[0]), v])
            K_new = basis @ unit_norm_lstsq(stacked_ops, bstack)
            # Safeguard: keep the previous K if the subproblem solver landed
            # on a worse point (possible in near-hard cases at scale).
            if kgfl_cost(K_new, G, J, data) <= kgfl_cost(K, G, J, data):
                K = K_new
            sol, *_ = np.linalg.lstsq(W.T, last @ K, rcond=None)
            G, J = sol[:kth], sol[kth:]
            cost = kgfl_cost(K, G, J, data)
            trace.append(cost)
            if abs(trace[-2] - cost) <= rel_tol * max(1.0, trace[-2]):
                break
    if np.linalg.norm(J) == 0.0:
        J = default_init(data, seed)[2]
    chain = fit_chain_coeffs(data, K) if data.mode == "fullstate" else None
    return TransformParams(
        mode=data.mode,
        r=data.r,
        K=K,
        G=G,
        J=J,
        phi_dict=data.phi_dict,
        theta_dict=data.theta_dict,
        gamma_dict=data.gamma_dict,
        chain_coeffs=chain,
        diagnostics={
            "method": "als",
            "final_cost": float(trace[-1]),
            "sweeps": len(trace) - 1,
            "cost_trace": trace,
        },
    )


# ---------------------------------------------------------------------------
# Single-step closed forms


def single_step_io(
    Z: np.ndarray,
    Zdot: np.ndarray,
    Theta: np.ndarray,
    GammaU: np.ndarray,
    r: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form IO solution [G' J'] = B'(Zdot - A Z) [Theta; GammaU]^+."""
    pair = brunovsky(r)
    Z = np.asarray(Z, dtype=float)
    Zdot = np.asarray(Zdot, dtype=float)
    if Z.shape[0] != r or Zdot.shape != Z.shape:
        raise ValueError(f"stack shapes {Z.shape}, {Zdot.shape} do not match r={r}")
    row = pair.B @ (Zdot - pair.A @ Z)
    W = np.vstack([Theta, GammaU])
    _warn_if_rank_deficient(W, "input-output")
    sol = row @ pseudoinverse(W)
    kth = Theta.shape[0]
    return sol[:kth], sol[kth:]


def single_step_fullstate(
    stacked: StackedDictionaryData,
    K: np.ndarray,
    Theta: np.ndarray,
    GammaU: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form full-state solution for fixed nonzero K."""
    K = np.asarray(K, dtype=float)
    if np.linalg.norm(K) == 0.0:
        raise ValueError("K must be nonzero")
    pair = brunovsky(stacked.r)
    shifted = np.zeros_like(stacked.D)
    shifted[:, :-1, :] = stacked.D[:, 1:, :]
    Mfull = stacked.dDdt - shifted
    row = Mfull[:, -1, :] @ K
    W = np.vstack([Theta, GammaU])
    _warn_if_rank_deficient(W, "full-state")
    sol = row @ pseudoinverse(W)
    kth = Theta.shape[0]
    return sol[:kth], sol[kth:]


def single_step_fit(data: FitDataset, K: Optional[np.ndarray] = None) -> TransformParams:
    """Single-step fit on a dataset; full-state mode needs K (defaults to the
    indicator of the first first-order state-transform entry)."""
    GammaU = khatri_rao_row(data.Gamma, data.u)
    if data.mode == "io":
        G, J = single_step_io(data.Z, data.Zdot, data.Theta, GammaU, data.r)
        Kout = None
    else:
        if K is None:
            K = np.zeros(data.M)
            first = data.phi_dict.first_order_indices() if data.phi_dict else [0]
            K[first[0] if first else 0] = 1.0
        stacked = StackedDictionaryData(
            data.phi_dict, data.r, data.tau, data.D, data.Ddot,
            data.u_raw, data.u, data.retained_range or range(0, data.num_samples),
        )
        G, J = single_step_fullstate(stacked, K, data.Theta, GammaU)
        Kout = np.asarray(K, dtype=float)
    if np.linalg.norm(J) == 0.0:
        J = default_init(data)[2]
        warnings.warn(
            "single-step J came back zero; control map non-invertible",
            RankDeficiencyWarning,
        )
    cost = kgfl_cost(Kout, G, J, data)
    chain = fit_chain_coeffs(data, Kout) if data.mode == "fullstate" else None
    return TransformParams(
        mode=data.mode,
        r=data.r,
        K=Kout,
        G=G,
        J=J,
        phi_dict=data.phi_dict,
        theta_dict=data.theta_dict,
        gamma_dict=data.gamma_dict,
        chain_coeffs=chain,
        diagnostics={"method": "single-step", "final_cost": float(cost), "sweeps": 1,
                     "cost_trace": [float(cost)]},
    )


def linear_predictor_baseline(
    traj: Trajectory,
    dictionary: Dictionary,
) -> Tuple[np.ndarray, np.ndarray]:
    """Lifted linear predictor with no control transform: phidot ~ A phi + B u.

    Uses the recorded exact-derivative channel when available (chain rule on
    the dictionary gradient), otherwise forward differences of the lift.
    """
    phi = eval_dictionary_matrix(dictionary, traj.states)
    if traj.exact_derivs is not None:
        N = traj.num_steps
        phidot = np.empty((dictionary.size, N))
        for t in range(N):
            grad = eval_dictionary_gradient(dictionary, traj.states[:, t])
            phidot[:, t] = grad @ traj.exact_derivs[:, t]
        phi_ret = phi[:, :N]
        u = traj.inputs
    else:
        d, kept = finite_difference(phi.T, traj.tau, "forward")
        phidot = d.T
        phi_ret = phi[:, kept.start : kept.stop]
        u = traj.inputs[kept.start : kept.stop]
    W = np.vstack([phi_ret, u])
    _warn_if_rank_deficient(W, "linear-predictor")
    sol = phidot @ pseudoinverse(W)
    return sol[:, : dictionary.size], sol[:, dictionary.size]
