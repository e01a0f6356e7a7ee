"""Grey-box identification of follower dynamics from recorded sessions.

Structured fits estimate per-axis (m, b, k) in log-space, which bakes in
the non-negativity constraint while keeping the problem smooth for
finite differences. Unstructured fits free every matrix element and add
a soft eigenvalue penalty so the optimizer stays inside the stable set.
Both run Gauss-Newton with adaptive Levenberg-style damping: damping
grows until a step decreases the cost, so accepted steps are monotone.

Only the ratios k/m and b/m are observable from motion data (the
input-output map is invariant to a common scaling of m, b, k), so the
mass is pinned to 1 by default and fitted parameters are reported as
ratios.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from ._validation import ValidationError, as_float_array
from .model import (
    FollowerParams,
    StateSpaceModel,
    _lsim_msd,
    block_diagonal,
    build_state_space,
    lsim_states,
)
from .session import SessionRecord

#: Shortest record (s) considered identifiable.
MIN_FIT_DURATION = 10.0

#: Generic human-scale starting point for the ratios k/m and b/m.
DEFAULT_INIT = FollowerParams(m_f=1.0, b_f=20.0, k_f=270.0)


@dataclass(frozen=True)
class FitOptions:
    """Tuning knobs for the Gauss-Newton search."""

    max_iterations: int = 200
    gradient_tolerance: float = 1e-10
    step_tolerance: float = 1e-12
    cost_tolerance: float = 1e-14
    # Kept small: the fit must not be biased toward the guess, only kept
    # from wandering when a direction carries no information.
    regularization_weight: float = 1e-8

    stability_penalty_weight: float = 100.0
    stability_margin: float = 1e-3
    fd_relative_step: float = 1e-6
    damping_init: float = 1e-4
    damping_cap: float = 1e12

    def __post_init__(self):
        for name in ("regularization_weight", "stability_penalty_weight"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        for name in ("gradient_tolerance", "step_tolerance", "cost_tolerance",
                     "stability_margin", "fd_relative_step"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be > 0")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")


@dataclass
class FitResult:
    """Outcome of one identification run."""

    params: Optional[FollowerParams]  # structured fits
    matrices: Optional[dict]          # unstructured fits: {"A", "B", "C"}
    rms_percent_error: np.ndarray     # per output axis
    iterations: int
    converged: bool
    final_cost: float
    residuals: np.ndarray             # output residual series
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(self.rms_percent_error < 0):
            raise ValidationError("rms_percent_error must be >= 0")


@dataclass(frozen=True)
class CouplingReport:
    """Magnitude statistics of fitted entries, split by the structure mask."""

    per_matrix: dict  # name -> {nonzero_mean, nonzero_std, zero_mean, zero_std, ratio}

    def ratio(self, name: str) -> float:
        return self.per_matrix[name]["ratio"]


@dataclass
class SegmentReport:
    """Per-segment fits plus drift statistics across segments."""

    fits: list                          # [segment][axis] -> FitResult
    param_deltas_percent: np.ndarray    # (n_segments-1, n_axes, 2): d(b), d(k)
    cross_rms_percent: np.ndarray       # (n_segments, n_axes): first model on each segment
    rms_delta_percent: np.ndarray       # cross minus own-fit rms, same shape
    k_over_m: np.ndarray                # (n_segments, n_axes) fitted stiffness ratios
    b_over_m: np.ndarray                # (n_segments, n_axes) fitted damping ratios


def rms_percent_error(measured, predicted) -> np.ndarray:
    """100 * RMS(measured - predicted) / RMS(measured - mean(measured)).

    Returns one value per axis (columns). Raises on a constant measured
    signal, whose normalization would divide by zero.
    """
    measured = np.asarray(measured, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if measured.shape != predicted.shape:
        raise ValidationError(f"shape mismatch: {measured.shape} vs {predicted.shape}")
    squeeze = measured.ndim == 1
    if squeeze:
        measured = measured[:, None]
        predicted = predicted[:, None]
    denom = np.sqrt(np.mean((measured - measured.mean(axis=0)) ** 2, axis=0))
    if np.any(denom == 0):
        axis = int(np.argmax(denom == 0))
        raise ValidationError(f"measured signal on axis {axis} is constant")
    num = np.sqrt(np.mean((measured - predicted) ** 2, axis=0))
    return 100.0 * num / denom


def _fd_jacobian(resfn, theta, r0, rel_step):
    """Central finite-difference Jacobian of the residual vector."""
    J = np.empty((len(r0), len(theta)))
    for i in range(len(theta)):
        h = rel_step * max(abs(theta[i]), 1.0)
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        J[:, i] = (resfn(tp) - resfn(tm)) / (2 * h)
    return J


def _gauss_newton(resfn, theta0, opts: FitOptions):
    """Damped Gauss-Newton loop; returns (theta, info).

    Trial steps solve (J'J + mu diag(J'J)) d = -J'r; mu is raised until
    the cost decreases and relaxed after each accepted step. Exceeding
    the damping cap reports a non-converged result instead of raising.
    """
    theta = np.array(theta0, dtype=float)
    r = resfn(theta)
    cost = float(r @ r)
    history = [cost]
    mu = opts.damping_init
    converged = False
    iterations = 0
    reason = "max_iterations"

    for iterations in range(1, opts.max_iterations + 1):
        J = _fd_jacobian(resfn, theta, r, opts.fd_relative_step)
        g = J.T @ r
        if np.max(np.abs(g)) <= opts.gradient_tolerance * max(1.0, cost):
            converged, reason = True, "gradient"
            iterations -= 1
            break
        H = J.T @ J
        diag = np.clip(np.diag(H), 1e-14, None)
        accepted = False
        while mu <= opts.damping_cap:
            try:
                delta = np.linalg.solve(H + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            r_new = resfn(theta + delta)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                accepted = True
                break
            mu *= 4
        if not accepted:
            reason = "damping_cap"
            break
        drop = cost - cost_new
        theta += delta
        r, cost = r_new, cost_new
        history.append(cost)
        mu = max(mu / 3, 1e-14)
        if np.max(np.abs(delta) / np.maximum(np.abs(theta), 1.0)) <= opts.step_tolerance:
            converged, reason = True, "step"
            break
        if drop <= opts.cost_tolerance * max(cost, 1e-300):
            converged, reason = True, "cost"
            break

    info = {"cost_history": history, "stop_reason": reason, "damping": mu}
    return theta, cost, iterations, converged, info


def _estimate_initial_state(y, dt, fit_len=25):
    """Initial [position, velocity] per axis from the measured output.

    Position from the median of the first few samples, velocity from a
    least-squares slope, both robust to output noise.
    """
    y = np.atleast_2d(y.T).T
    n = min(max(fit_len, 2), y.shape[0])
    t = np.arange(n) * dt
    x0 = np.empty(2 * y.shape[1])
    for a in range(y.shape[1]):
        head = y[:n, a]
        x0[2 * a] = np.median(y[:min(5, n), a])
        x0[2 * a + 1] = np.polyfit(t, head, 1)[0]
    return x0


def _check_record_for_fit(record: SessionRecord, axes: Sequence[int]):
    if record.duration < MIN_FIT_DURATION:
        raise ValidationError(
            f"record covers {record.duration:.1f} s; need >= {MIN_FIT_DURATION} s"
        )
    u = record.u.channels()
    for a in axes:
        if np.std(u[:, a]) < 1e-12:
            raise ValidationError(
                f"input on axis {a} is constant; problem is rank deficient"
            )


def _fit_structured_arrays(u2, y, dt, init: FollowerParams, opts: FitOptions,
                           fit_mass: bool, x0=None) -> FitResult:
    """Core structured fit on raw arrays: u2 (n, 2) input, y (n,) output.

    The follower's initial state is unknown in general (segments start
    mid-motion), so it is appended to the parameter vector in raw space
    and estimated jointly; a wrong fixed initial state would bias the
    physical parameters through the transient. Regularization pulls the
    log-parameters only.
    """
    n_phys = 3 if fit_mass else 2
    if fit_mass:
        theta_phys = np.log([init.m_f, init.b_f, init.k_f])
    else:
        theta_phys = np.log([init.b_over_m, init.k_over_m])
    if x0 is None:
        x0 = _estimate_initial_state(y, dt)
    theta0 = np.concatenate([theta_phys, np.asarray(x0, dtype=float)])
    sqrt_reg = math.sqrt(opts.regularization_weight)

    def simulate_theta(theta):
        if fit_mass:
            m, b, k = np.exp(theta[:3])
        else:
            m, (b, k) = 1.0, np.exp(theta[:2])
        return _lsim_msd(k / m, b / m, u2, dt, theta[n_phys:])[:, 0]

    def resfn(theta):
        out = simulate_theta(theta) - y
        return np.concatenate([out, sqrt_reg * (theta[:n_phys] - theta0[:n_phys])])

    theta, cost, iters, converged, info = _gauss_newton(resfn, theta0, opts)
    if fit_mass:
        m, b, k = np.exp(theta[:3])
    else:
        m, (b, k) = 1.0, np.exp(theta[:2])
    params = FollowerParams(m_f=float(m), b_f=float(b), k_f=float(k))
    y_fit = simulate_theta(theta)
    info["x0"] = theta[n_phys:]
    info["fit_mass"] = fit_mass
    return FitResult(
        params=params,
        matrices=None,
        rms_percent_error=rms_percent_error(y, y_fit),
        iterations=iters,
        converged=converged,
        final_cost=cost,
        residuals=y - y_fit,
        info=info,
    )


def fit_structured(record: SessionRecord, axis: int = 0,
                   init: Optional[FollowerParams] = None,
                   opts: Optional[FitOptions] = None,
                   fit_mass: bool = False, x0=None) -> FitResult:
    """Fit the per-axis mass-spring-damper model to one axis of a session.

    Minimizes the squared position-tracking residual plus an L2 pull of
    the log-parameters toward the initial guess. The initial state is
    co-estimated, seeded from the data unless ``x0`` is given.
    Divergence is reported through ``converged=False``, never an
    exception.
    """
    if not 0 <= axis < record.n_axes:
        raise ValidationError(f"axis {axis} out of range for {record.n_axes} axes")
    _check_record_for_fit(record, [axis])
    opts = opts or FitOptions()
    init = init or DEFAULT_INIT
    u2 = record.input_matrix()[:, 2 * axis:2 * axis + 2]
    y = np.asarray(record.y_pos[:, axis])
    result = _fit_structured_arrays(u2, y, record.dt, init, opts, fit_mass, x0=x0)
    result.info["axis"] = axis
    return result


def _sorted_eig_real(A):
    eig = np.linalg.eigvals(A)
    order = np.lexsort((eig.imag, eig.real))
    return eig.real[order]


def fit_unstructured(record: SessionRecord, init: StateSpaceModel,
                     opts: Optional[FitOptions] = None, x0=None) -> FitResult:
    """Fit all entries of A, B, C jointly with no structural constraint.

    The cost adds a soft hinge on eigenvalue real parts (weights
    ``stability_penalty_weight``, margin ``stability_margin``) and raw
    L2 regularization toward the initial matrices. Outputs are the
    position channels; the initial state is co-estimated.
    """
    opts = opts or FitOptions()
    axes = list(range(record.n_axes))
    _check_record_for_fit(record, axes)
    k = record.n_axes
    n_states = 2 * k
    if init.A.shape != (n_states, n_states) or init.B.shape != (n_states, n_states):
        raise ValidationError(
            f"init dimensions {init.A.shape} do not match record with {k} axes"
        )
    if init.C.shape != (k, n_states):
        raise ValidationError(
            "init must output positions only: C expected "
            f"({k}, {n_states}), got {init.C.shape}"
        )

    u = record.input_matrix()
    y = np.asarray(record.y_pos)
    dt = record.dt
    nA = n_states * n_states
    nB = n_states * n_states
    n_mat = nA + nB + k * n_states
    if x0 is None:
        x0 = _estimate_initial_state(y, dt)
    theta0 = np.concatenate([
        init.A.ravel(), init.B.ravel(), init.C.ravel(),
        np.asarray(x0, dtype=float),
    ])
    sqrt_reg = math.sqrt(opts.regularization_weight)
    sqrt_stab = math.sqrt(opts.stability_penalty_weight)

    def unpack(theta):
        A = theta[:nA].reshape(n_states, n_states)
        B = theta[nA:nA + nB].reshape(n_states, n_states)
        C = theta[nA + nB:n_mat].reshape(k, n_states)
        return A, B, C, theta[n_mat:]

    def resfn(theta):
        A, B, C, x0 = unpack(theta)
        x = lsim_states(A, B, u, dt, x0)
        out = (x @ C.T - y).ravel()
        hinge = np.maximum(0.0, _sorted_eig_real(A) + opts.stability_margin)
        return np.concatenate([
            out,
            sqrt_reg * (theta[:n_mat] - theta0[:n_mat]),
            sqrt_stab * hinge,
        ])

    theta, cost, iters, converged, info = _gauss_newton(resfn, theta0, opts)
    A, B, C, x0_hat = unpack(theta)
    stable = bool(np.all(np.linalg.eigvals(A).real < 0))
    if not stable:
        converged = False
        info["unstable_result"] = True
    x = lsim_states(A, B, u, dt, x0_hat)
    y_fit = x @ C.T
    info["structure_mask"] = init.structure_mask
    info["x0"] = x0_hat
    return FitResult(
        params=None,
        matrices={"A": A, "B": B, "C": C},
        rms_percent_error=rms_percent_error(y, y_fit),
        iterations=iters,
        converged=converged,
        final_cost=cost,
        residuals=y - y_fit,
        info=info,
    )


def init_from_axis_fits(fits: Sequence[FitResult]) -> StateSpaceModel:
    """Block-diagonal unstructured starting point from per-axis fits."""
    models = [build_state_space(f.params, outputs="pos") for f in fits]
    return block_diagonal(models) if len(models) > 1 else models[0]


def coupling_report(fit: FitResult, mask: Optional[dict] = None) -> CouplingReport:
    """Aggregate |entries| of an unstructured fit by the structure mask.

    For each of A, B, C: mean and std of the expected-nonzero and the
    expected-zero magnitudes, plus their zero/nonzero mean ratio.
    """
    if fit.matrices is None:
        raise ValidationError("coupling_report requires an unstructured fit")
    mask = mask or fit.info.get("structure_mask")
    if not mask:
        raise ValidationError("no structure mask available")
    per_matrix = {}
    for name in ("A", "B", "C"):
        M = np.abs(fit.matrices[name])
        zero_mask = np.asarray(mask[name], dtype=bool)
        if zero_mask.shape != M.shape:
            raise ValidationError(f"mask for {name} has shape {zero_mask.shape}, matrix {M.shape}")
        zeros = M[zero_mask]
        nonzeros = M[~zero_mask]
        nz_mean = float(nonzeros.mean()) if nonzeros.size else 0.0
        z_mean = float(zeros.mean()) if zeros.size else 0.0
        per_matrix[name] = {
            "nonzero_mean": nz_mean,
            "nonzero_std": float(nonzeros.std()) if nonzeros.size else 0.0,
            "zero_mean": z_mean,
            "zero_std": float(zeros.std()) if zeros.size else 0.0,
            "ratio": z_mean / nz_mean if nz_mean > 0 else math.inf,
        }
    return CouplingReport(per_matrix=per_matrix)


def predict_position(params: FollowerParams, u2: np.ndarray, dt: float,
                     x0=None) -> np.ndarray:
    """Simulated position track of a fitted single-axis model."""
    if x0 is None:
        x0 = np.array([u2[0, 0], 0.0])
    return _lsim_msd(params.k_over_m, params.b_over_m, u2, dt,
                     np.asarray(x0, dtype=float))[:, 0]


def evaluate_position(params: FollowerParams, u2: np.ndarray, y: np.ndarray,
                      dt: float) -> np.ndarray:
    """Predict a measured segment with the optimal initial state.

    The output is linear in the initial state, so the best-matching x0
    for a fixed model is an exact 2-parameter least-squares solve: one
    forced simulation plus the two unit free responses span the space.
    """
    km, bm = params.k_over_m, params.b_over_m
    forced = _lsim_msd(km, bm, u2, dt, np.zeros(2))[:, 0]
    zero_u = np.zeros_like(u2)
    basis = np.column_stack([
        _lsim_msd(km, bm, zero_u, dt, np.array([1.0, 0.0]))[:, 0],
        _lsim_msd(km, bm, zero_u, dt, np.array([0.0, 1.0]))[:, 0],
    ])
    x0, *_ = np.linalg.lstsq(basis, y - forced, rcond=None)
    return forced + basis @ x0


def segment_analysis(record: SessionRecord, n_segments: int = 3,
                     opts: Optional[FitOptions] = None,
                     init: Optional[FollowerParams] = None) -> SegmentReport:
    """Fit each equal time segment independently and report drift.

    Parameter deltas are percent changes between consecutive segments;
    cross RMS evaluates the first segment's model on every segment (the
    time-invariance check).
    """
    if n_segments < 1:
        raise ValidationError("n_segments must be >= 1")
    seg_len = record.n_samples // n_segments
    if seg_len * record.dt < MIN_FIT_DURATION:
        raise ValidationError(
            f"{n_segments} segments of {seg_len * record.dt:.1f} s are too short "
            f"(need >= {MIN_FIT_DURATION} s each)"
        )
    opts = opts or FitOptions()
    k = record.n_axes
    segments = [record.slice(s * seg_len, (s + 1) * seg_len) for s in range(n_segments)]

    fits = [[fit_structured(seg, axis=a, init=init, opts=opts) for a in range(k)]
            for seg in segments]

    k_ratio = np.array([[f.params.k_over_m for f in seg] for seg in fits])
    b_ratio = np.array([[f.params.b_over_m for f in seg] for seg in fits])
    deltas = np.empty((max(n_segments - 1, 0), k, 2))
    for s in range(n_segments - 1):
        deltas[s, :, 0] = 100 * np.abs(b_ratio[s + 1] - b_ratio[s]) / b_ratio[s]
        deltas[s, :, 1] = 100 * np.abs(k_ratio[s + 1] - k_ratio[s]) / k_ratio[s]

    cross = np.empty((n_segments, k))
    own = np.empty((n_segments, k))
    for s, seg in enumerate(segments):
        u = seg.input_matrix()
        for a in range(k):
            first = fits[0][a]
            y_hat = evaluate_position(first.params, u[:, 2 * a:2 * a + 2],
                                      seg.y_pos[:, a], seg.dt)
            cross[s, a] = rms_percent_error(seg.y_pos[:, a], y_hat)[0]
            own[s, a] = fits[s][a].rms_percent_error[0]

    return SegmentReport(
        fits=fits,
        param_deltas_percent=deltas,
        cross_rms_percent=cross,
        rms_delta_percent=cross - own,
        k_over_m=k_ratio,
        b_over_m=b_ratio,
    )


class StructuredFollowerEstimator(BaseEstimator, RegressorMixin):
    """Grey-box mass-spring-damper estimator with a scikit-learn surface.

    ``X`` holds interleaved (position, velocity) input columns per axis,
    shape (n, 2k); ``y`` holds the measured output positions, shape
    (n, k) or (n,). Each axis is fitted independently.

    Attributes after ``fit``: ``params_`` (list of FollowerParams),
    ``results_`` (list of FitResult), ``n_iter_``, ``converged_``.
    """

    def __init__(self, dt: float = 0.01, init_b: float = 20.0, init_k: float = 270.0,
                 fit_mass: bool = False, max_iterations: int = 200,
                 regularization_weight: float = 1e-8, fd_relative_step: float = 1e-6):
        self.dt = dt
        self.init_b = init_b
        self.init_k = init_k
        self.fit_mass = fit_mass
        self.max_iterations = max_iterations
        self.regularization_weight = regularization_weight
        self.fd_relative_step = fd_relative_step

    def _options(self) -> FitOptions:
        return FitOptions(
            max_iterations=self.max_iterations,
            regularization_weight=self.regularization_weight,
            fd_relative_step=self.fd_relative_step,
        )

    def _check_X(self, X):
        X = as_float_array(X, "X", ndim=2)
        if X.shape[1] % 2:
            raise ValidationError("X must interleave (position, velocity) per axis")
        return X

    def fit(self, X, y):
        X = self._check_X(X)
        y = as_float_array(y, "y")
        if y.ndim == 1:
            y = y[:, None]
        if y.shape[0] != X.shape[0]:
            raise ValidationError("X and y disagree on sample count")
        if 2 * y.shape[1] != X.shape[1]:
            raise ValidationError("y must have one column per input axis pair")
        init = FollowerParams(1.0, self.init_b, self.init_k)
        opts = self._options()
        self.results_ = [
            _fit_structured_arrays(X[:, 2 * a:2 * a + 2], y[:, a], self.dt,
                                   init, opts, self.fit_mass)
            for a in range(y.shape[1])
        ]
        self.params_ = [r.params for r in self.results_]
        self.n_iter_ = int(sum(r.iterations for r in self.results_))
        self.converged_ = bool(all(r.converged for r in self.results_))
        return self

    def predict(self, X):
        if not hasattr(self, "params_"):
            raise ValidationError("estimator is not fitted")
        X = self._check_X(X)
        if X.shape[1] != 2 * len(self.params_):
            raise ValidationError("X axis count differs from the fitted axes")
        cols = [
            predict_position(p, X[:, 2 * a:2 * a + 2], self.dt)
            for a, p in enumerate(self.params_)
        ]
        out = np.column_stack(cols)
        return out[:, 0] if out.shape[1] == 1 else out


class UnstructuredFollowerEstimator(BaseEstimator, RegressorMixin):
    """Free-matrix state-space estimator with a scikit-learn surface.

    Fits every entry of A, B, C from interleaved input ``X`` (n, 2k) and
    measured positions ``y`` (n, k). The starting point comes from
    independent per-axis structured fits unless ``init_model`` is given.

    Attributes after ``fit``: ``matrices_``, ``result_``, ``coupling_``.
    """

    def __init__(self, dt: float = 0.01, init_model: Optional[StateSpaceModel] = None,
                 max_iterations: int = 200, regularization_weight: float = 1e-8,
                 stability_penalty_weight: float = 100.0, fd_relative_step: float = 1e-6):
        self.dt = dt
        self.init_model = init_model
        self.max_iterations = max_iterations
        self.regularization_weight = regularization_weight
        self.stability_penalty_weight = stability_penalty_weight
        self.fd_relative_step = fd_relative_step

    def fit(self, X, y):
        from .trajectory import Trajectory

        X = as_float_array(X, "X", ndim=2)
        y = as_float_array(y, "y")
        if y.ndim == 1:
            y = y[:, None]
        k = y.shape[1]
        if X.shape[1] != 2 * k:
            raise ValidationError("X must carry (position, velocity) pairs per output axis")
        opts = FitOptions(
            max_iterations=self.max_iterations,
            regularization_weight=self.regularization_weight,
            stability_penalty_weight=self.stability_penalty_weight,
            fd_relative_step=self.fd_relative_step,
        )
        traj = Trajectory(rate=1.0 / self.dt, pos=X[:, 0::2], vel=X[:, 1::2])
        record = SessionRecord(
            session_id="estimator", rate_hz=traj.rate, u=traj,
            y_pos=y, y_vel=np.gradient(y, self.dt, axis=0), f=np.zeros_like(y),
        )
        init = self.init_model
        if init is None:
            axis_fits = [fit_structured(record, axis=a, opts=opts) for a in range(k)]
            init = init_from_axis_fits(axis_fits)
        self.result_ = fit_unstructured(record, init, opts)
        self.matrices_ = self.result_.matrices
        self.coupling_ = coupling_report(self.result_)
        return self

    def predict(self, X):
        if not hasattr(self, "matrices_"):
            raise ValidationError("estimator is not fitted")
        X = as_float_array(X, "X", ndim=2)
        A, B, C = (self.matrices_[n] for n in ("A", "B", "C"))
        x0 = np.zeros(A.shape[0])
        x0[0::2] = X[0, 0::2]
        x = lsim_states(A, B, X, self.dt, x0)
        return x @ C.T
