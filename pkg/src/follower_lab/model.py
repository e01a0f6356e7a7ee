"""Mass-spring-damper follower model: construction and simulation.

The follower tracking a virtual tool is modeled per axis as a unit
second-order system driven by the tool's position and velocity:

    xdot = [[0, 1], [-k/m, -b/m]] x + [[0, 0], [k/m, b/m]] u
    y    = [position; contact force]

Multi-axis followers are block-diagonal compositions of the 1-DOF model.
Simulation uses exact zero-order-hold discretization, so integrator
error never contaminates identification experiments. A stochastic
variant adds Gaussian noise to the position output and, during contact,
to the force output; the noise never feeds back into the state.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.signal

from ._validation import (
    ValidationError,
    as_float_array,
    check_nonnegative,
    check_positive,
    readonly,
)
from .trajectory import Trajectory, rng_from_seed

#: Default sample interval (s); matches the ~100 Hz capture rate.
DEFAULT_DT = 0.01

#: Default output-position noise std (m).
DEFAULT_SIGMA_POS = 0.007


@dataclass(frozen=True)
class FollowerParams:
    """Per-axis mass/damping/stiffness triple.

    For orientation axes the same structure applies with mass read as a
    moment of inertia (kg m^2) and rotational spring/damper units; the
    model is valid for small rotations (below roughly 60 degrees).
    """

    m_f: float  # kg
    b_f: float  # N s/m
    k_f: float  # N/m

    def __post_init__(self):
        check_positive(self.m_f, "m_f")
        check_positive(self.b_f, "b_f")
        check_positive(self.k_f, "k_f")
        # Positive coefficients force a Hurwitz A; assert it anyway.
        eig = np.roots([self.m_f, self.b_f, self.k_f])
        if not np.all(eig.real < 0):
            raise ValidationError(f"parameters {self} yield a non-Hurwitz system")

    @property
    def k_over_m(self) -> float:
        return self.k_f / self.m_f

    @property
    def b_over_m(self) -> float:
        return self.b_f / self.m_f


@dataclass(frozen=True)
class EnvParams:
    """Spring-damper virtual surface; flat and horizontal.

    ``linear_force`` selects the raw output-row form ``k_p x + b_p xdot``
    with no free-space zero and no floor, for algebraic reproduction of
    the linear model. The default is unilateral contact: zero force in
    free space and no adhesion.
    """

    k_p: float = 0.0            # N/m
    b_p: float = 0.0            # N s/m
    surface_height: float = 0.0  # m
    enabled: bool = False
    linear_force: bool = False

    def __post_init__(self):
        check_nonnegative(self.k_p, "k_p")
        check_nonnegative(self.b_p, "b_p")


@dataclass(frozen=True)
class NoiseModel:
    """Additive output noise: N(0, sigma_pos) on position channels.

    During contact the force channel receives N(0, sigma_pos * k_p);
    otherwise it is untouched. Output only, never the internal state.
    """

    sigma_pos: float = DEFAULT_SIGMA_POS  # m
    seed: int = 0
    force_noise_enabled: bool = True

    def __post_init__(self):
        check_nonnegative(self.sigma_pos, "sigma_pos")


@dataclass(frozen=True)
class FollowerState:
    """Per-axis position and velocity of the follower tool."""

    x_f: np.ndarray
    xdot_f: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x_f", readonly(np.atleast_1d(self.x_f)))
        object.__setattr__(self, "xdot_f", readonly(np.atleast_1d(self.xdot_f)))

    def as_vector(self) -> np.ndarray:
        out = np.empty(2 * len(self.x_f))
        out[0::2] = self.x_f
        out[1::2] = self.xdot_f
        return out


@dataclass(frozen=True)
class StateSpaceModel:
    """A/B/C/D matrices with block-structure metadata.

    ``structure_mask`` maps matrix name to a boolean array that is True
    wherever the block-diagonal follower structure expects a zero entry.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    dof: int
    structure_mask: dict = field(default_factory=dict)
    env: Optional[EnvParams] = None
    params: Optional[tuple] = None  # per-axis FollowerParams, when known

    def __post_init__(self):
        A = as_float_array(self.A, "A", ndim=2)
        B = as_float_array(self.B, "B", ndim=2)
        C = as_float_array(self.C, "C", ndim=2)
        D = as_float_array(self.D, "D", ndim=2, allow_empty=True)
        n = A.shape[0]
        if A.shape[1] != n:
            raise ValidationError("A must be square")
        if n != 2 * self.dof:
            raise ValidationError(f"A is {n}x{n} but dof={self.dof} needs {2 * self.dof}")
        if B.shape[0] != n:
            raise ValidationError("B row count must match A")
        if C.shape[1] != n:
            raise ValidationError("C column count must match A")
        if D.shape != (C.shape[0], B.shape[1]):
            raise ValidationError("D must be (outputs x inputs)")
        for name, m in (("A", A), ("B", B), ("C", C)):
            mask = self.structure_mask.get(name)
            if mask is not None and np.asarray(mask).shape != m.shape:
                raise ValidationError(f"structure_mask[{name}] shape mismatch")
        object.__setattr__(self, "A", readonly(A))
        object.__setattr__(self, "B", readonly(B))
        object.__setattr__(self, "C", readonly(C))
        object.__setattr__(self, "D", readonly(D))

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.C.shape[0]

    def is_stable(self, margin: float = 0.0) -> bool:
        return bool(np.all(np.linalg.eigvals(self.A).real < -margin))


def _single_axis_masks(outputs: str) -> dict:
    mask_A = np.array([[True, False], [False, False]])
    mask_B = np.array([[True, True], [False, False]])
    if outputs == "pos":
        mask_C = np.array([[False, True]])
    else:
        mask_C = np.array([[False, True], [False, False]])
    return {"A": mask_A, "B": mask_B, "C": mask_C}


def build_state_space(params: FollowerParams, env: Optional[EnvParams] = None,
                      outputs: str = "pos+force") -> StateSpaceModel:
    """Build the 1-DOF follower model.

    Parameters
    ----------
    params : FollowerParams
        Physical parameters; must be strictly positive.
    env : EnvParams, optional
        Virtual surface; its stiffness/damping populate the force output
        row. Defaults to no environment (force row all zero).
    outputs : {"pos+force", "pos"}
        Output rows of C. The identification routines use the
        position-only form.
    """
    env = env or EnvParams()
    km = params.k_over_m
    bm = params.b_over_m
    A = np.array([[0.0, 1.0], [-km, -bm]])
    B = np.array([[0.0, 0.0], [km, bm]])
    if outputs == "pos":
        C = np.array([[1.0, 0.0]])
    elif outputs == "pos+force":
        C = np.array([[1.0, 0.0], [env.k_p, env.b_p]])
    else:
        raise ValidationError(f"unknown outputs mode {outputs!r}")
    D = np.zeros((C.shape[0], 2))
    return StateSpaceModel(A=A, B=B, C=C, D=D, dof=1,
                           structure_mask=_single_axis_masks(outputs),
                           env=env, params=(params,))


def block_diagonal(models: Sequence[StateSpaceModel]) -> StateSpaceModel:
    """Compose 1-DOF models into a k-DOF block-diagonal model.

    Off-block entries are zero and marked expected-zero in the structure
    mask, together with the in-block structural zeros of each model.
    """
    if len(models) == 0:
        raise ValidationError("block_diagonal: need at least one model")
    for m in models:
        if m.dof != 1:
            raise ValidationError("block_diagonal expects 1-DOF models")
    if len(models) == 1:
        return models[0]
    A = scipy.linalg.block_diag(*[m.A for m in models])
    B = scipy.linalg.block_diag(*[m.B for m in models])
    C = scipy.linalg.block_diag(*[m.C for m in models])
    D = scipy.linalg.block_diag(*[m.D for m in models])
    mask = {}
    for name, out in (("A", A), ("B", B), ("C", C)):
        # Everything off the blocks is expected zero.
        m_full = np.ones(out.shape, dtype=bool)
        r = c = 0
        for m in models:
            sub = m.structure_mask[name]
            m_full[r:r + sub.shape[0], c:c + sub.shape[1]] = sub
            r += sub.shape[0]
            c += sub.shape[1]
        mask[name] = m_full
    envs = {m.env for m in models}
    env = envs.pop() if len(envs) == 1 else None
    params = tuple(m.params[0] for m in models) if all(m.params for m in models) else None
    return StateSpaceModel(A=A, B=B, C=C, D=D, dof=len(models),
                           structure_mask=mask, env=env, params=params)


def discretize(A: np.ndarray, B: np.ndarray, dt: float):
    """Exact zero-order-hold discrete matrices via the augmented exponential.

    expm(dt * [[A, B], [0, 0]]) packs Ad in the top-left block and Bd in
    the top-right block.
    """
    if dt <= 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    n = A.shape[0]
    m = B.shape[1]
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = A
    aug[:n, n:] = B
    phi = scipy.linalg.expm(aug * dt)
    return phi[:n, :n], phi[:n, n:]


def _lsim_loop(Ad, Bd, u, x0):
    n = u.shape[0]
    x = np.empty((n, Ad.shape[0]))
    x[0] = x0
    for j in range(n - 1):
        x[j + 1] = Ad @ x[j] + Bd @ u[j]
    return x


def _lsim_msd(km: float, bm: float, u: np.ndarray, dt: float, x0) -> np.ndarray:
    """Closed-form simulation of one mass-spring-damper axis.

    Specialization of the modal simulator for A = [[0,1],[-km,-bm]],
    B = [[0,0],[km,bm]] with analytic eigenvalues, avoiding the matrix
    exponential entirely. Underdamped systems need a single complex
    first-order filter thanks to conjugate symmetry. Falls back to the
    generic path within rounding distance of critical damping, where the
    eigenbasis degenerates.
    """
    disc = bm * bm - 4.0 * km
    if abs(disc) <= 1e-9 * max(bm * bm, 4.0 * abs(km)):
        A = np.array([[0.0, 1.0], [-km, -bm]])
        B = np.array([[0.0, 0.0], [km, bm]])
        Ad, Bd = discretize(A, B, dt)
        return _lsim_loop(Ad, Bd, u, x0)
    sq = np.sqrt(complex(disc))
    lam_p = (-bm + sq) / 2.0
    lam_m = (-bm - sq) / 2.0
    dl = lam_m - lam_p
    n = u.shape[0]
    ad_p = np.exp(lam_p * dt)
    row_p = np.array([-km, -bm]) * ((ad_p - 1.0) / lam_p / dl)
    f = np.empty(n, dtype=complex)
    f[0] = (lam_m * x0[0] - x0[1]) / dl
    f[1:] = u[:-1] @ row_p
    z_p = scipy.signal.lfilter([1.0], [1.0, -ad_p], f)
    out = np.empty((n, 2))
    if disc < 0:
        # conjugate pair: x = 2 Re(z v), v = [1, lam]
        out[:, 0] = 2.0 * z_p.real
        out[:, 1] = 2.0 * (lam_p * z_p).real
        return out
    ad_m = np.exp(lam_m * dt)
    row_m = np.array([-km, -bm]) * ((ad_m - 1.0) / lam_m / -dl)
    f[0] = -(lam_p * x0[0] - x0[1]) / dl
    f[1:] = u[:-1] @ row_m
    z_m = scipy.signal.lfilter([1.0], [1.0, -ad_m], f)
    out[:, 0] = (z_p + z_m).real
    out[:, 1] = (lam_p * z_p + lam_m * z_m).real
    return out


def _lsim_modal(Ad, Bd, u, x0):
    """Diagonalize the recurrence and run each mode as a first-order IIR.

    Seeding the filter input with the modal initial state makes one
    lfilter pass per mode produce free and forced response together:
    z[0] = z0 and z[j] = lam z[j-1] + w[j-1]. Complex matmuls are split
    into real parts, which is measurably faster than dtype promotion.
    """
    lam, V = np.linalg.eig(Ad)
    if np.linalg.cond(V) > 1e8:
        return _lsim_loop(Ad, Bd, u, x0)
    n = u.shape[0]
    MT = np.linalg.solve(V, Bd).T               # (m, ns) modal input map
    z0 = np.linalg.solve(V, x0.astype(complex))
    forcing = np.empty((n, len(lam)), dtype=complex)
    forcing[0] = z0
    forcing[1:] = u[:-1] @ MT.real + 1j * (u[:-1] @ MT.imag)
    z = np.empty_like(forcing)
    with np.errstate(over="ignore", invalid="ignore"):
        for m_i, lam_i in enumerate(lam):
            z[:, m_i] = scipy.signal.lfilter([1.0], [1.0, -lam_i], forcing[:, m_i])
        VT = V.T
        x = z.real @ VT.real - z.imag @ VT.imag
    return x


def _axis_blocks_decoupled(A, B, dof):
    """True when A and B are exactly block diagonal in 2x2 axis blocks."""
    for i in range(dof):
        sl = slice(2 * i, 2 * i + 2)
        for M in (A, B):
            off = M[sl].copy()
            off[:, sl] = 0.0
            if np.any(off != 0.0):
                return False
            off = M[:, sl].copy()
            off[sl, :] = 0.0
            if np.any(off != 0.0):
                return False
    return True


def lsim_states(A: np.ndarray, B: np.ndarray, u: np.ndarray, dt: float,
                x0: np.ndarray) -> np.ndarray:
    """State trajectory of xdot = Ax + Bu under zero-order hold.

    Exactly decoupled axis blocks are simulated independently so a
    block-diagonal model reproduces its per-axis simulations bit for bit.
    """
    dof = A.shape[0] // 2
    if dof > 1 and A.shape[0] == 2 * dof and B.shape[1] == 2 * dof \
            and _axis_blocks_decoupled(A, B, dof):
        x = np.empty((u.shape[0], A.shape[0]))
        for i in range(dof):
            sl = slice(2 * i, 2 * i + 2)
            x[:, sl] = lsim_states(A[sl, sl], B[sl, sl], u[:, sl], dt, x0[sl])
        return x
    Ad, Bd = discretize(A, B, dt)
    return _lsim_modal(Ad, Bd, u, x0)


def contact_force(env: EnvParams, x, xdot):
    """Spring-damper contact force of the virtual surface, in Newtons.

    Free space (tool above the surface) gives exactly zero. During
    penetration the force is ``k_p * depth + b_p * penetration_rate``,
    floored at zero because the probe cannot pull. Accepts scalars or
    arrays.
    """
    x = np.asarray(x, dtype=float)
    xdot = np.asarray(xdot, dtype=float)
    if env.linear_force:
        out = env.k_p * x + env.b_p * xdot
        return out if out.shape else float(out)
    depth = env.surface_height - x
    raw = env.k_p * depth + env.b_p * (-xdot)
    out = np.where(depth > 0, np.maximum(raw, 0.0), 0.0)
    return out if out.shape else float(out)


def stochastic_output(y_det, noise: NoiseModel, in_contact, k_p: float,
                      rng: Optional[np.random.Generator] = None):
    """Add output noise to a deterministic [positions, forces] sample.

    The last axis holds position channels in its first half and force
    channels in its second half. Position channels always receive
    N(0, sigma_pos); force channels receive N(0, sigma_pos * k_p) where
    ``in_contact`` is True and stay exactly unchanged elsewhere.
    """
    y = np.array(y_det, dtype=float)
    if y.shape[-1] % 2:
        raise ValidationError("output sample must hold equal position and force counts")
    k = y.shape[-1] // 2
    if noise.sigma_pos == 0:
        return y
    if rng is None:
        rng = rng_from_seed(noise.seed)
    pos = y[..., :k]
    y[..., :k] = pos + rng.normal(0.0, noise.sigma_pos, pos.shape)
    if noise.force_noise_enabled and k_p > 0:
        mask = np.broadcast_to(np.asarray(in_contact, dtype=bool), y[..., k:].shape)
        draw = rng.normal(0.0, noise.sigma_pos * k_p, y[..., k:].shape)
        y[..., k:] = y[..., k:] + np.where(mask, draw, 0.0)
    return y


def default_initial_state(model: StateSpaceModel, u: np.ndarray) -> np.ndarray:
    """Follower starts aligned with the first input sample, at rest."""
    x0 = np.zeros(model.n_states)
    x0[0::2] = u[0, 0::2]
    return x0


def simulate(model: StateSpaceModel, inp: Trajectory, dt: Optional[float] = None,
             noise: Optional[NoiseModel] = None, x0=None,
             session_id: Optional[str] = None):
    """Simulate the follower tracking an input trajectory.

    Integrates the state exactly under zero-order hold at the input's
    sample interval, then derives position/velocity outputs from the
    state and contact force from the model's environment. With a
    ``NoiseModel``, position and in-contact force outputs get additive
    Gaussian noise; the result is deterministic given the seed.

    Returns a ``SessionRecord`` pairing input and output.
    """
    from .session import SessionRecord  # deferred: session depends on model types

    if dt is None:
        dt = inp.dt
    elif abs(dt - inp.dt) > 1e-9 * inp.dt:
        raise ValidationError(f"dt {dt} does not match trajectory interval {inp.dt}")
    if dt <= 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    if inp.n_axes != model.dof:
        raise ValidationError(f"trajectory has {inp.n_axes} axes, model expects {model.dof}")
    if not model.is_stable():
        raise ValidationError("model is unstable; refusing to simulate")

    u = inp.input_matrix()
    if x0 is None:
        x0 = default_initial_state(model, u)
    elif isinstance(x0, FollowerState):
        x0 = x0.as_vector()
    x0 = as_float_array(x0, "x0", ndim=1)
    if len(x0) != model.n_states:
        raise ValidationError(f"x0 has {len(x0)} entries, model has {model.n_states} states")

    x = lsim_states(model.A, model.B, u, dt, x0)
    y_pos = x[:, 0::2].copy()
    y_vel = x[:, 1::2].copy()

    env = model.env or EnvParams()
    if env.enabled:
        force = contact_force(env, x[:, 0::2], x[:, 1::2])
        in_contact = x[:, 0::2] < env.surface_height
    else:
        force = np.zeros_like(y_pos)
        in_contact = np.zeros(y_pos.shape, dtype=bool)

    noise_meta = None
    if noise is not None and noise.sigma_pos > 0:
        rng = rng_from_seed(noise.seed)
        stacked = np.concatenate([y_pos, force], axis=-1)
        stacked = stochastic_output(stacked, noise, in_contact, env.k_p, rng)
        y_pos = stacked[:, :model.dof]
        force = stacked[:, model.dof:]
        noise_meta = {"sigma_pos": noise.sigma_pos, "seed": noise.seed,
                      "force_noise_enabled": noise.force_noise_enabled}

    prov = {
        "input": dict(inp.provenance),
        "model": {
            "dof": model.dof,
            "params": [
                {"m_f": p.m_f, "b_f": p.b_f, "k_f": p.k_f} for p in model.params
            ] if model.params else None,
        },
        "noise": noise_meta,
        "x0": list(map(float, x0)),
    }
    n_pos = inp.n_position_axes
    axes = {
        "positions": [f"pos{i}" for i in range(n_pos)],
        "rotations": [f"rot{i}" for i in range(inp.n_rotation_axes)],
    }
    return SessionRecord(
        session_id=session_id or "synthetic",
        rate_hz=inp.rate,
        u=inp,
        y_pos=y_pos,
        y_vel=y_vel,
        f=force,
        env=env,
        source="synthetic",
        axes=axes,
        provenance=prov,
    )
