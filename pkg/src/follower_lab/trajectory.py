"""Input trajectory generators: Fourier series and band-limited noise.

Both generator families produce uniformly sampled position/velocity
signals with reproducible seeds. Orientation variants emit rotation
channels instead of position channels.
"""

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ._validation import (
    ValidationError,
    as_float_array,
    check_positive,
    readonly,
)

MAX_ROTATION_RAD = np.deg2rad(50.0)

#: Default band-limit for the noise generator (Hz).
DEFAULT_CUTOFF_HZ = 0.63

#: Width of the raised-cosine transition band of the noise filter (Hz).
TRANSITION_BAND_HZ = 0.05


def rng_from_seed(seed: int) -> np.random.Generator:
    """Counter-based generator keyed by seed, reproducible across platforms."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled multi-axis position/velocity signal.

    Timestamps are implicit: sample ``i`` is at ``t0 + i / rate``, which
    makes the uniform-sampling invariant hold by construction. Rotation
    channels are optional and carried separately from positions.
    """

    rate: float
    pos: np.ndarray      # (n, k_pos) m
    vel: np.ndarray      # (n, k_pos) m/s
    rot: Optional[np.ndarray] = None     # (n, k_rot) rad
    rotvel: Optional[np.ndarray] = None  # (n, k_rot) rad/s
    t0: float = 0.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        check_positive(self.rate, "rate")
        pos = as_float_array(self.pos, "pos", allow_empty=True)
        vel = as_float_array(self.vel, "vel", allow_empty=True)
        if pos.ndim == 1:
            pos = pos[:, None]
        if vel.ndim == 1:
            vel = vel[:, None]
        if pos.shape != vel.shape:
            raise ValidationError(f"pos/vel shape mismatch: {pos.shape} vs {vel.shape}")
        object.__setattr__(self, "pos", readonly(pos))
        object.__setattr__(self, "vel", readonly(vel))
        if (self.rot is None) != (self.rotvel is None):
            raise ValidationError("rot and rotvel must be given together")
        if self.rot is not None:
            rot = as_float_array(self.rot, "rot")
            rotvel = as_float_array(self.rotvel, "rotvel")
            if rot.ndim == 1:
                rot = rot[:, None]
            if rotvel.ndim == 1:
                rotvel = rotvel[:, None]
            if rot.shape != rotvel.shape:
                raise ValidationError("rot/rotvel shape mismatch")
            if pos.shape[1] and rot.shape[0] != pos.shape[0]:
                raise ValidationError("rot and pos must have the same sample count")
            object.__setattr__(self, "rot", readonly(rot))
            object.__setattr__(self, "rotvel", readonly(rotvel))
        if self.n_samples < 2:
            raise ValidationError("trajectory needs at least 2 samples")

    @property
    def n_samples(self) -> int:
        return self.pos.shape[0] if self.pos.shape[1] else self.rot.shape[0]

    @property
    def dt(self) -> float:
        return 1.0 / self.rate

    @property
    def duration(self) -> float:
        return (self.n_samples - 1) / self.rate

    @property
    def t(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_samples) / self.rate

    @property
    def n_position_axes(self) -> int:
        return self.pos.shape[1]

    @property
    def n_rotation_axes(self) -> int:
        return 0 if self.rot is None else self.rot.shape[1]

    @property
    def n_axes(self) -> int:
        return self.n_position_axes + self.n_rotation_axes

    def channels(self) -> np.ndarray:
        """All generalized-position channels: positions then rotations, (n, k)."""
        if self.rot is None:
            return self.pos
        if self.pos.shape[1] == 0:
            return self.rot
        return np.hstack([self.pos, self.rot])

    def channel_velocities(self) -> np.ndarray:
        if self.rotvel is None:
            return self.vel
        if self.vel.shape[1] == 0:
            return self.rotvel
        return np.hstack([self.vel, self.rotvel])

    def input_matrix(self) -> np.ndarray:
        """Interleaved (position, velocity) columns per axis, shape (n, 2k)."""
        p = self.channels()
        v = self.channel_velocities()
        u = np.empty((p.shape[0], 2 * p.shape[1]))
        u[:, 0::2] = p
        u[:, 1::2] = v
        return u


@dataclass(frozen=True)
class FourierComponent:
    amplitude: float   # m or rad
    frequency: float   # Hz
    phase: float = 0.0  # rad

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValidationError(f"amplitude must be >= 0, got {self.amplitude}")
        check_positive(self.frequency, "frequency")


@dataclass(frozen=True)
class FourierSpec:
    """Sum-of-sinusoids trajectory, one component list per axis."""

    components: Sequence[Sequence[FourierComponent]]
    duration: float = 120.0
    rate: float = 100.0
    seed: int = 0

    def __post_init__(self):
        check_positive(self.duration, "duration")
        check_positive(self.rate, "rate")
        for axis in self.components:
            for c in axis:
                if c.frequency >= self.rate / 2:
                    raise ValidationError(
                        f"component at {c.frequency} Hz aliases at rate {self.rate} Hz"
                    )

    @property
    def max_frequency(self) -> float:
        freqs = [c.frequency for axis in self.components for c in axis]
        return max(freqs, default=0.0)


@dataclass(frozen=True)
class NoiseTrajSpec:
    """Low-pass filtered uniform white noise trajectory."""

    seed: int
    duration: float = 240.0
    rate: float = 100.0
    cutoff: float = DEFAULT_CUTOFF_HZ
    amp_range: Sequence = (-0.15, 0.15)  # one (low, high) or one per axis
    axes: int = 1

    def __post_init__(self):
        check_positive(self.duration, "duration")
        check_positive(self.rate, "rate")
        if not 0 < self.cutoff < self.rate / 2:
            raise ValidationError(
                f"cutoff must lie in (0, rate/2), got {self.cutoff} at rate {self.rate}"
            )
        if self.duration * self.cutoff < 4:
            raise ValidationError(
                "duration too short: need at least 4 periods of the cutoff frequency"
            )
        for low, high in self.axis_ranges():
            # Zero width is allowed: it degenerates to a constant signal.
            if low > high:
                raise ValidationError(f"amplitude range must satisfy low <= high, got ({low}, {high})")

    def axis_ranges(self):
        rng = self.amp_range
        if len(rng) == 2 and np.isscalar(rng[0]):
            return [(float(rng[0]), float(rng[1]))] * self.axes
        if len(rng) != self.axes:
            raise ValidationError(f"need one amplitude range per axis ({self.axes}), got {len(rng)}")
        return [(float(lo), float(hi)) for lo, hi in rng]


def gen_fourier(spec: FourierSpec) -> Trajectory:
    """Generate a Fourier-series trajectory with analytic velocities.

    Each axis is ``sum_i A_i sin(2 pi f_i t + phi_i)``; the velocity
    channel is the exact derivative, not a finite difference.
    """
    n = int(round(spec.duration * spec.rate))
    t = np.arange(n) / spec.rate
    k = len(spec.components)
    pos = np.zeros((n, k))
    vel = np.zeros((n, k))
    for a, comps in enumerate(spec.components):
        for c in comps:
            w = 2 * np.pi * c.frequency
            pos[:, a] += c.amplitude * np.sin(w * t + c.phase)
            vel[:, a] += c.amplitude * w * np.cos(w * t + c.phase)
    prov = {
        "generator": "fourier",
        "seed": spec.seed,
        "rate_hz": spec.rate,
        "duration_s": spec.duration,
        "components": [
            [{"amplitude": c.amplitude, "frequency": c.frequency, "phase": c.phase} for c in comps]
            for comps in spec.components
        ],
    }
    return Trajectory(rate=spec.rate, pos=pos, vel=vel, provenance=prov)


def _brickwall_lowpass(x: np.ndarray, rate: float, cutoff: float) -> np.ndarray:
    """Zero-phase frequency-domain low-pass with a raised-cosine taper.

    The taper spans ``TRANSITION_BAND_HZ`` above the cutoff; zero phase
    keeps input/output correlation analyses free of filter-induced lag.
    """
    n = x.shape[0]
    spectrum = np.fft.rfft(x, axis=0)
    f = np.fft.rfftfreq(n, 1.0 / rate)
    gain = np.zeros_like(f)
    gain[f <= cutoff] = 1.0
    taper = (f > cutoff) & (f < cutoff + TRANSITION_BAND_HZ)
    gain[taper] = 0.5 * (1 + np.cos(np.pi * (f[taper] - cutoff) / TRANSITION_BAND_HZ))
    return np.fft.irfft(spectrum * gain[:, None], n=n, axis=0)


def _central_diff(x: np.ndarray, dt: float) -> np.ndarray:
    v = np.empty_like(x)
    v[1:-1] = (x[2:] - x[:-2]) / (2 * dt)
    v[0] = (x[1] - x[0]) / dt
    v[-1] = (x[-1] - x[-2]) / dt
    return v


def _filtered_noise_channels(spec: NoiseTrajSpec):
    n = int(round(spec.duration * spec.rate))
    rng = rng_from_seed(spec.seed)
    ranges = spec.axis_ranges()
    white = np.empty((n, spec.axes))
    for a, (low, high) in enumerate(ranges):
        white[:, a] = rng.uniform(low, high, n)
    x = _brickwall_lowpass(white, spec.rate, spec.cutoff)
    v = _central_diff(x, 1.0 / spec.rate)
    return x, v


def gen_filtered_noise(spec: NoiseTrajSpec) -> Trajectory:
    """Generate band-limited noise positions, deterministic given the seed.

    Per-sample i.i.d. uniform draws over the amplitude range are passed
    through the zero-phase brick-wall filter at ``spec.cutoff``; velocity
    comes from central differences.
    """
    x, v = _filtered_noise_channels(spec)
    prov = {
        "generator": "noise",
        "seed": spec.seed,
        "rate_hz": spec.rate,
        "duration_s": spec.duration,
        "cutoff_hz": spec.cutoff,
        "amp_range": [list(r) for r in spec.axis_ranges()],
    }
    return Trajectory(rate=spec.rate, pos=x, vel=v, provenance=prov)


def gen_orientation_noise(spec: NoiseTrajSpec) -> Trajectory:
    """Band-limited noise on rotation channels, limited to +/-50 degrees."""
    for low, high in spec.axis_ranges():
        if low < -MAX_ROTATION_RAD - 1e-12 or high > MAX_ROTATION_RAD + 1e-12:
            raise ValidationError(
                f"rotation range ({low}, {high}) rad exceeds +/-50 degrees"
            )
    x, v = _filtered_noise_channels(spec)
    n = x.shape[0]
    prov = {
        "generator": "orientation-noise",
        "seed": spec.seed,
        "rate_hz": spec.rate,
        "duration_s": spec.duration,
        "cutoff_hz": spec.cutoff,
        "amp_range": [list(r) for r in spec.axis_ranges()],
    }
    return Trajectory(
        rate=spec.rate,
        pos=np.zeros((n, 0)),
        vel=np.zeros((n, 0)),
        rot=x,
        rotvel=v,
        provenance=prov,
    )


def single_axis_mask(traj: Trajectory, axis: int) -> Trajectory:
    """Hold every axis but one at its initial value with zero velocity.

    Axis indices run over positions first, then rotations.
    """
    if not 0 <= axis < traj.n_axes:
        raise ValidationError(f"axis {axis} out of range for {traj.n_axes} axes")
    pos = np.array(traj.pos)
    vel = np.array(traj.vel)
    rot = None if traj.rot is None else np.array(traj.rot)
    rotvel = None if traj.rotvel is None else np.array(traj.rotvel)
    k_pos = traj.n_position_axes
    for a in range(traj.n_axes):
        if a == axis:
            continue
        if a < k_pos:
            pos[:, a] = pos[0, a]
            vel[:, a] = 0.0
        else:
            rot[:, a - k_pos] = rot[0, a - k_pos]
            rotvel[:, a - k_pos] = 0.0
    prov = dict(traj.provenance)
    prov["masked_to_axis"] = axis
    return replace(traj, pos=pos, vel=vel, rot=rot, rotvel=rotvel, provenance=prov)


def default_fourier_spec(axes: int = 1, seed: int = 0, duration: float = 120.0,
                         rate: float = 100.0, peak: float = 0.03) -> FourierSpec:
    """Reference Fourier spec: 4 components per axis, random phases.

    Amplitudes are scaled so the worst-case peak stays within ``peak``,
    using incommensurate-ish frequencies below the comfortable band
    edge. The default peak is sized so the standard two-minute run
    covers a probe-realistic cumulative distance (a few meters), not the
    full reachable workspace.
    """
    freqs = [0.08, 0.17, 0.31, 0.55]
    weights = np.array([1.0, 0.8, 0.5, 0.3])
    amps = peak * weights / weights.sum()
    rng = rng_from_seed(seed)
    comps = []
    for _ in range(axes):
        phases = rng.uniform(0, 2 * np.pi, len(freqs))
        comps.append(tuple(
            FourierComponent(amplitude=float(a), frequency=f, phase=float(p))
            for a, f, p in zip(amps, freqs, phases)
        ))
    return FourierSpec(components=tuple(comps), duration=duration, rate=rate, seed=seed)


def default_noise_spec(axes: int = 1, seed: int = 0, duration: float = 240.0,
                       rate: float = 100.0, cutoff: float = DEFAULT_CUTOFF_HZ,
                       amp: float = 0.08) -> NoiseTrajSpec:
    """Reference noise spec mirroring the default experiment settings.

    The band-limiting filter keeps only a percent or so of the white
    draw variance, so the generated signal is centimeter scale and the
    four-minute cumulative path lands near the reference ultrasound
    scans.
    """
    return NoiseTrajSpec(seed=seed, duration=duration, rate=rate, cutoff=cutoff,
                         amp_range=(-amp, amp), axes=axes)
