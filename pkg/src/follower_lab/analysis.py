"""Signal-level analyses: linearity, passivity, and residual statistics.

Everything here is a pure function of its inputs. Frequency-domain
estimates use Welch averaging with Hann windows; the energy series is
the plain left-rectangle discrete sum so a naive loop reproduces it
exactly.
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.signal
import scipy.special

from ._validation import ValidationError, as_float_array, check_same_length
from .model import FollowerParams
from .session import SessionRecord
from .trajectory import Trajectory

#: Welch defaults: ~20+ averages on a 4 minute record at 100 Hz.
DEFAULT_COHERENCE_WINDOW = 1024
DEFAULT_COHERENCE_OVERLAP = 0.5

#: Residual histogram defaults: 100 bins spanning +/- 5 sigma.
DEFAULT_HIST_BINS = 100
HIST_SIGMA_SPAN = 5.0


@dataclass(frozen=True)
class Spectrum:
    """One-sided amplitude spectrum of a single signal."""

    freq: np.ndarray
    amplitude: np.ndarray


@dataclass(frozen=True)
class SpectrumResult:
    """Input/output amplitude spectra and their correlation at zero lag."""

    freq: np.ndarray
    amplitude_u: np.ndarray
    amplitude_y: np.ndarray
    xcorr: float

    def __post_init__(self):
        if not -1.0 - 1e-12 <= self.xcorr <= 1.0 + 1e-12:
            raise ValidationError(f"spectral cross-correlation {self.xcorr} outside [-1, 1]")


@dataclass(frozen=True)
class CoherenceResult:
    """Welch magnitude-squared coherence on a frequency grid."""

    freq: np.ndarray
    coherence: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coherence)
        if c.size and (c.min() < -1e-12 or c.max() > 1 + 1e-9):
            raise ValidationError("coherence values must lie in [0, 1]")

    def in_band(self, f_lo: float, f_hi: float) -> np.ndarray:
        sel = (self.freq >= f_lo) & (self.freq <= f_hi)
        return self.coherence[sel]


@dataclass(frozen=True)
class EnergySeries:
    """Cumulative generalized energy E[k] = dT * sum_j u[j].y[j]."""

    t: np.ndarray
    energy: np.ndarray
    variant: str  # "velocity" | "force"

    @property
    def min(self) -> float:
        return float(np.min(self.energy))

    @property
    def final(self) -> float:
        return float(self.energy[-1])


@dataclass(frozen=True)
class ResidualStats:
    """Residual histogram versus its fitted Gaussian."""

    residuals: np.ndarray
    mu: float
    sigma: float
    bhattacharyya: float
    bin_edges: np.ndarray
    hist: np.ndarray          # normalized bin probabilities
    gaussian: np.ndarray      # bin-integrated Gaussian probabilities


def _window(name: Optional[str], n: int) -> np.ndarray:
    if name is None or name == "rect":
        return np.ones(n)
    if name == "hann":
        return np.hanning(n)
    raise ValidationError(f"unknown window {name!r}")


def amplitude_spectrum(signal, rate: float, window: str = "hann") -> Spectrum:
    """One-sided DFT amplitude spectrum, mean removed, windowed.

    Raises for signals shorter than 16 samples.
    """
    x = as_float_array(signal, "signal", ndim=1)
    if len(x) < 16:
        raise ValidationError(f"signal too short for a spectrum: {len(x)} < 16")
    w = _window(window, len(x))
    xw = (x - x.mean()) * w
    amp = np.abs(np.fft.rfft(xw)) * 2.0 / w.sum()
    amp[0] /= 2.0
    if len(x) % 2 == 0:
        amp[-1] /= 2.0
    freq = np.fft.rfftfreq(len(x), 1.0 / rate)
    return Spectrum(freq=freq, amplitude=amp)


def spectral_xcorr(u, y, rate: float) -> float:
    """Zero-lag Pearson correlation between the two amplitude spectra.

    Spectra are computed without a taper so the magnitude is exactly
    invariant to circular delays of either signal.
    """
    u = as_float_array(u, "u", ndim=1)
    y = as_float_array(y, "y", ndim=1)
    check_same_length(u, y, names=["u", "y"])
    su = amplitude_spectrum(u, rate, window=None).amplitude
    sy = amplitude_spectrum(y, rate, window=None).amplitude
    if su.std() == 0 or sy.std() == 0:
        raise ValidationError("degenerate zero spectrum")
    c = float(np.corrcoef(su, sy)[0, 1])
    return c


def spectrum_pair(u, y, rate: float, window: str = "hann") -> SpectrumResult:
    """Amplitude spectra of input and output plus their correlation."""
    su = amplitude_spectrum(u, rate, window=window)
    sy = amplitude_spectrum(y, rate, window=window)
    return SpectrumResult(freq=su.freq, amplitude_u=su.amplitude,
                          amplitude_y=sy.amplitude,
                          xcorr=spectral_xcorr(u, y, rate))


def coherence(u, y, rate: float, window_len: int = DEFAULT_COHERENCE_WINDOW,
              overlap: float = DEFAULT_COHERENCE_OVERLAP) -> CoherenceResult:
    """Welch-averaged magnitude-squared coherence |P_uy|^2 / (P_uu P_yy)."""
    u = as_float_array(u, "u", ndim=1)
    y = as_float_array(y, "y", ndim=1)
    check_same_length(u, y, names=["u", "y"])
    step = int(window_len * (1 - overlap))
    min_len = window_len + 3 * step  # at least 4 averaged segments
    if len(u) < min_len:
        raise ValidationError(
            f"signals too short for coherence: {len(u)} < {min_len} "
            f"(4 windows of {window_len} at {overlap:.0%} overlap)"
        )
    freq, coh = scipy.signal.coherence(
        u, y, fs=rate, window="hann", nperseg=window_len,
        noverlap=window_len - step,
    )
    return CoherenceResult(freq=freq, coherence=np.clip(coh, 0.0, 1.0))


def time_xcorr(u, y) -> float:
    """Zero-lag Pearson correlation of the mean-removed time signals."""
    u = as_float_array(u, "u", ndim=1)
    y = as_float_array(y, "y", ndim=1)
    check_same_length(u, y, names=["u", "y"])
    if u.std() == 0 or y.std() == 0:
        raise ValidationError("constant signal has no correlation")
    return float(np.corrcoef(u, y)[0, 1])


def tracking_transfer(params: FollowerParams, s: np.ndarray) -> np.ndarray:
    """Tool-to-follower position transfer (b s + k) / (m s^2 + b s + k)."""
    return ((params.b_f * s + params.k_f)
            / (params.m_f * s ** 2 + params.b_f * s + params.k_f))


def nyquist_curve(params: FollowerParams, freq_hz) -> np.ndarray:
    """Frequency response G(j 2 pi f) of the position transfer function."""
    f = as_float_array(freq_hz, "freq_hz", ndim=1)
    return tracking_transfer(params, 1j * 2 * np.pi * f)


def passivity_crossing(params: FollowerParams) -> Optional[float]:
    """Lowest frequency (Hz) where the Nyquist curve leaves Re >= 0.

    Re G(j w) first reaches zero at w = k / sqrt(k m - b^2); when
    b^2 >= k m the curve never enters the left half plane and None is
    returned.
    """
    m, b, k = params.m_f, params.b_f, params.k_f
    disc = k * m - b ** 2
    if disc <= 0:
        return None
    w = k / np.sqrt(disc)
    return float(w / (2 * np.pi))


def energy_series(u, y, dt: float, variant: str = "velocity") -> EnergySeries:
    """Cumulative energy of paired signals: E[k] = dT * sum_{j<=k} u[j].y[j].

    Left-rectangle accumulation of the instantaneous generalized power,
    matching the discrete sum definition exactly (no trapezoid).
    """
    u = as_float_array(u, "u")
    y = as_float_array(y, "y")
    if u.ndim == 1:
        u = u[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if u.shape != y.shape:
        raise ValidationError(f"misaligned energy inputs: {u.shape} vs {y.shape}")
    if dt <= 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    # strictly left-to-right accumulation over channels and over time:
    # bit-for-bit the definitional double sum (vectorized reductions
    # reassociate terms and would not match a naive recomputation)
    power = np.zeros(u.shape[0])
    for c in range(u.shape[1]):
        power += u[:, c] * y[:, c]
    energy = np.empty(len(power))
    acc = 0.0
    for j, p in enumerate(power):
        acc += p
        energy[j] = dt * acc
    t = np.arange(len(energy)) * dt
    return EnergySeries(t=t, energy=energy, variant=variant)


def record_energy(record: SessionRecord, variant: str = "velocity") -> EnergySeries:
    """Energy series of a session.

    The velocity variant pairs the input [position; velocity] with the
    output [position; velocity]; the force variant pairs it with
    [position; force].
    """
    u = record.input_matrix()
    k = record.n_axes
    y = np.empty_like(u)
    y[:, 0::2] = record.y_pos
    if variant == "velocity":
        y[:, 1::2] = record.y_vel
    elif variant == "force":
        y[:, 1::2] = record.f
    else:
        raise ValidationError(f"unknown energy variant {variant!r}")
    series = energy_series(u, y, record.dt, variant=variant)
    return EnergySeries(t=series.t + record.u.t0, energy=series.energy, variant=variant)


def bhattacharyya_distance(p, q) -> float:
    """-ln sum(sqrt(p q)) between two discrete distributions.

    Zero exactly when the distributions agree bin for bin.
    """
    p = as_float_array(p, "p", ndim=1)
    q = as_float_array(q, "q", ndim=1)
    check_same_length(p, q, names=["p", "q"])
    if np.any(p < 0) or np.any(q < 0):
        raise ValidationError("distributions must be nonnegative")
    bc = float(np.sum(np.sqrt(p * q)))
    return float(-np.log(min(bc, 1.0)))


def _gaussian_cdf(x):
    return 0.5 * (1 + scipy.special.erf(x / np.sqrt(2)))


def residual_stats(measured, predicted, bins: int = DEFAULT_HIST_BINS) -> ResidualStats:
    """Pool model residuals and compare their histogram to a fitted Gaussian.

    The Gaussian is fitted by sample mean/std; both the histogram and the
    Gaussian are binned over mu +/- 5 sigma and renormalized over that
    support before the Bhattacharyya distance is taken.
    """
    measured = as_float_array(measured, "measured")
    predicted = as_float_array(predicted, "predicted")
    if measured.shape != predicted.shape:
        raise ValidationError(f"shape mismatch: {measured.shape} vs {predicted.shape}")
    r = (measured - predicted).ravel()
    if r.size == 0:
        raise ValidationError("empty residuals")
    mu = float(np.mean(r))
    sigma = float(np.std(r))
    if sigma == 0:
        raise ValidationError("residuals are constant; no distribution to fit")
    lo, hi = mu - HIST_SIGMA_SPAN * sigma, mu + HIST_SIGMA_SPAN * sigma
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(r, bins=edges)
    total = counts.sum()
    if total == 0:
        raise ValidationError("all residuals fall outside the histogram span")
    p = counts / total
    z = (edges - mu) / sigma
    cdf = _gaussian_cdf(z)
    q = np.diff(cdf) / (cdf[-1] - cdf[0])
    return ResidualStats(
        residuals=r,
        mu=mu,
        sigma=sigma,
        bhattacharyya=bhattacharyya_distance(p, q),
        bin_edges=edges,
        hist=p,
        gaussian=q,
    )


def path_length(traj: Union[Trajectory, np.ndarray]) -> float:
    """Cumulative Euclidean distance along the position channels."""
    pts = traj.pos if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] < 2:
        raise ValidationError("need at least 2 samples for a path length")
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return float(np.sum(steps))
