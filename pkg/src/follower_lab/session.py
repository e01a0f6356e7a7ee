"""Canonical session data model and on-disk formats.

A session pairs an input trajectory with the recorded output of a
follower (synthetic or human). The persistence format is line-delimited
JSON: one header object, one object per sample, and a terminal footer
marking completion, so files are diff-able and stream-appendable during
capture. Numeric payloads round-trip losslessly (floats are written with
full shortest-repr precision).
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ._validation import (
    ValidationError,
    as_float_array,
    check_same_length,
    readonly,
)
from .model import EnvParams
from .trajectory import Trajectory

SCHEMA_VERSION = 1

#: Hard-error threshold for dropouts, in nominal sample periods.
MAX_GAP_PERIODS = 5

CSV_COLUMNS_DOC = "t, u_pos_*, u_vel_*, y_pos_*, y_vel_*, f_*"


@dataclass(frozen=True)
class SessionRecord:
    """Paired input/output record; the unit of persistence and analysis.

    Output arrays are (n, k) over the generalized axes (positions first,
    rotations after), sampled on the same uniform grid as the input.
    """

    session_id: str
    rate_hz: float
    u: Trajectory
    y_pos: np.ndarray
    y_vel: np.ndarray
    f: np.ndarray
    env: EnvParams = field(default_factory=EnvParams)
    source: str = "synthetic"
    axes: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    notes: str = ""
    schema_version: int = SCHEMA_VERSION
    complete: bool = True
    aborted: bool = False

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValidationError(
                f"unsupported schema_version {self.schema_version}; this reader supports {SCHEMA_VERSION}"
            )
        if abs(self.rate_hz - self.u.rate) > 1e-9 * self.u.rate:
            raise ValidationError("rate_hz does not match input trajectory rate")
        y_pos = as_float_array(self.y_pos, "y_pos")
        y_vel = as_float_array(self.y_vel, "y_vel")
        f = as_float_array(self.f, "f")
        if y_pos.ndim == 1:
            y_pos, y_vel, f = y_pos[:, None], y_vel[:, None], f[:, None]
        k = self.u.n_axes
        for name, arr in (("y_pos", y_pos), ("y_vel", y_vel), ("f", f)):
            if arr.shape != (self.u.n_samples, k):
                raise ValidationError(
                    f"{name} shape {arr.shape} does not match input ({self.u.n_samples}, {k})"
                )
        object.__setattr__(self, "y_pos", readonly(y_pos))
        object.__setattr__(self, "y_vel", readonly(y_vel))
        object.__setattr__(self, "f", readonly(f))

    @property
    def t(self) -> np.ndarray:
        return self.u.t

    @property
    def dt(self) -> float:
        return self.u.dt

    @property
    def n_samples(self) -> int:
        return self.u.n_samples

    @property
    def n_axes(self) -> int:
        return self.u.n_axes

    @property
    def duration(self) -> float:
        return self.u.duration

    def input_matrix(self) -> np.ndarray:
        return self.u.input_matrix()

    def slice(self, start: int, stop: int) -> "SessionRecord":
        """Sub-record over sample indices [start, stop)."""
        if not 0 <= start < stop <= self.n_samples:
            raise ValidationError(f"bad slice [{start}, {stop}) for {self.n_samples} samples")
        u = self.u
        k_pos = u.n_position_axes
        sub_u = Trajectory(
            rate=u.rate,
            pos=u.pos[start:stop],
            vel=u.vel[start:stop],
            rot=None if u.rot is None else u.rot[start:stop],
            rotvel=None if u.rotvel is None else u.rotvel[start:stop],
            t0=u.t0 + start / u.rate,
            provenance=dict(u.provenance, sliced=[start, stop]),
        )
        return SessionRecord(
            session_id=f"{self.session_id}",
            rate_hz=self.rate_hz,
            u=sub_u,
            y_pos=self.y_pos[start:stop],
            y_vel=self.y_vel[start:stop],
            f=self.f[start:stop],
            env=self.env,
            source=self.source,
            axes=self.axes,
            provenance=self.provenance,
            notes=self.notes,
            complete=self.complete,
            aborted=self.aborted,
        )


def _env_to_dict(env: EnvParams) -> dict:
    return {
        "k_p": env.k_p,
        "b_p": env.b_p,
        "surface_height": env.surface_height,
        "enabled": env.enabled,
        "linear_force": env.linear_force,
    }


def _env_from_dict(d: dict) -> EnvParams:
    return EnvParams(
        k_p=d.get("k_p", 0.0),
        b_p=d.get("b_p", 0.0),
        surface_height=d.get("surface_height", 0.0),
        enabled=d.get("enabled", False),
        linear_force=d.get("linear_force", False),
    )


def session_header(record_meta: dict) -> str:
    return json.dumps({"kind": "header", **record_meta}, allow_nan=False)


def sample_line(t: float, u_pos, u_vel, y_pos, y_vel, f) -> str:
    return json.dumps(
        {
            "t": t,
            "u_pos": list(u_pos),
            "u_vel": list(u_vel),
            "y_pos": list(y_pos),
            "y_vel": list(y_vel),
            "f": list(f),
        },
        allow_nan=False,
    )


def save_session(record: SessionRecord, path) -> Path:
    """Write a session to ``path`` in the ndjson container format."""
    path = Path(path)
    n_pos = record.u.n_position_axes
    meta = {
        "schema_version": record.schema_version,
        "session_id": record.session_id,
        "rate_hz": record.rate_hz,
        "t0": record.u.t0,
        "axes": record.axes or {
            "positions": [f"pos{i}" for i in range(n_pos)],
            "rotations": [f"rot{i}" for i in range(record.u.n_rotation_axes)],
        },
        "env": _env_to_dict(record.env),
        "source": record.source,
        "provenance": record.provenance,
        "notes": record.notes,
    }
    u_pos = record.u.channels()
    u_vel = record.u.channel_velocities()
    t = record.t
    with path.open("w") as fh:
        fh.write(session_header(meta) + "\n")
        for i in range(record.n_samples):
            fh.write(
                sample_line(t[i], u_pos[i], u_vel[i], record.y_pos[i],
                            record.y_vel[i], record.f[i]) + "\n"
            )
        footer = {
            "kind": "footer",
            "complete": record.complete,
            "aborted": record.aborted,
            "n_samples": record.n_samples,
        }
        fh.write(json.dumps(footer) + "\n")
    return path


def _check_row_finite(row: dict, index: int):
    for key, value in row.items():
        if key == "t":
            if not math.isfinite(value):
                raise ValidationError(f"row {index}: field t is non-finite")
            continue
        if isinstance(value, list):
            for j, v in enumerate(value):
                if not math.isfinite(v):
                    raise ValidationError(f"row {index}: field {key}[{j}] is non-finite")


def load_session(path) -> SessionRecord:
    """Load and validate a session file; inverse of ``save_session``."""
    path = Path(path)
    with path.open() as fh:
        lines = [ln for ln in (raw.strip() for raw in fh) if ln]
    if not lines:
        raise ValidationError(f"{path}: empty session file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: corrupted header: {exc}") from exc
    if header.get("kind") != "header":
        raise ValidationError(f"{path}: first line is not a session header")
    version = header.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError(
            f"{path}: unsupported schema_version {version}; this reader supports {SCHEMA_VERSION}"
        )

    footer = None
    rows = []
    for i, line in enumerate(lines[1:], start=1):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: corrupted payload at line {i + 1}: {exc}") from exc
        if obj.get("kind") == "footer":
            footer = obj
            continue
        _check_row_finite(obj, len(rows))
        rows.append(obj)
    if not rows:
        raise ValidationError(f"{path}: session contains no samples")

    axes = header.get("axes", {})
    n_pos = len(axes.get("positions", []))
    n_rot = len(axes.get("rotations", []))
    t = np.array([r["t"] for r in rows])
    u_all = np.array([r["u_pos"] for r in rows])
    uv_all = np.array([r["u_vel"] for r in rows])
    y_pos = np.array([r["y_pos"] for r in rows])
    y_vel = np.array([r["y_vel"] for r in rows])
    f = np.array([r["f"] for r in rows])
    if u_all.shape[1] != n_pos + n_rot:
        raise ValidationError(
            f"{path}: header axes declare {n_pos + n_rot} channels, rows carry {u_all.shape[1]}"
        )

    rate = header["rate_hz"]
    u = Trajectory(
        rate=rate,
        pos=u_all[:, :n_pos],
        vel=uv_all[:, :n_pos],
        rot=u_all[:, n_pos:] if n_rot else None,
        rotvel=uv_all[:, n_pos:] if n_rot else None,
        t0=header.get("t0", float(t[0])),
        provenance=header.get("provenance", {}).get("input", {}),
    )
    expected_t = u.t
    if np.max(np.abs(t - expected_t)) > 1e-6 / rate:
        raise ValidationError(f"{path}: sample timestamps do not form a uniform 1/{rate} grid")

    return SessionRecord(
        session_id=header.get("session_id", path.stem),
        rate_hz=rate,
        u=u,
        y_pos=y_pos,
        y_vel=y_vel,
        f=f,
        env=_env_from_dict(header.get("env", {})),
        source=header.get("source", "unknown"),
        axes=axes,
        provenance=header.get("provenance", {}),
        notes=header.get("notes", ""),
        complete=bool(footer and footer.get("complete", False)),
        aborted=bool(footer and footer.get("aborted", False)),
    )


def export_csv(record: SessionRecord, path) -> Path:
    """Spreadsheet export with the fixed column order ``t, u_pos_*, u_vel_*, y_pos_*, y_vel_*, f_*``."""
    path = Path(path)
    k = record.n_axes
    cols = (["t"]
            + [f"u_pos_{i}" for i in range(k)]
            + [f"u_vel_{i}" for i in range(k)]
            + [f"y_pos_{i}" for i in range(k)]
            + [f"y_vel_{i}" for i in range(k)]
            + [f"f_{i}" for i in range(k)])
    data = np.column_stack([
        record.t,
        record.u.channels(),
        record.u.channel_velocities(),
        record.y_pos,
        record.y_vel,
        record.f,
    ])
    with path.open("w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    return path


def save_trajectory(traj: Trajectory, path) -> Path:
    """Write a trajectory in the same ndjson container style as sessions."""
    path = Path(path)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "rate_hz": traj.rate,
        "t0": traj.t0,
        "axes": {
            "positions": [f"pos{i}" for i in range(traj.n_position_axes)],
            "rotations": [f"rot{i}" for i in range(traj.n_rotation_axes)],
        },
        "provenance": traj.provenance,
    }
    t = traj.t
    with path.open("w") as fh:
        fh.write(json.dumps({"kind": "trajectory-header", **meta}, allow_nan=False) + "\n")
        for i in range(traj.n_samples):
            row = {"t": t[i],
                   "pos": list(traj.pos[i]),
                   "vel": list(traj.vel[i])}
            if traj.rot is not None:
                row["rot"] = list(traj.rot[i])
                row["rotvel"] = list(traj.rotvel[i])
            fh.write(json.dumps(row, allow_nan=False) + "\n")
        fh.write(json.dumps({"kind": "footer", "n_samples": traj.n_samples}) + "\n")
    return path


def load_trajectory(path) -> Trajectory:
    path = Path(path)
    with path.open() as fh:
        lines = [ln for ln in (raw.strip() for raw in fh) if ln]
    if not lines:
        raise ValidationError(f"{path}: empty trajectory file")
    header = json.loads(lines[0])
    if header.get("kind") != "trajectory-header":
        raise ValidationError(f"{path}: not a trajectory file")
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(f"{path}: unsupported schema_version "
                              f"{header.get('schema_version')}")
    rows = []
    for i, line in enumerate(lines[1:], start=1):
        obj = json.loads(line)
        if obj.get("kind") == "footer":
            continue
        _check_row_finite(obj, len(rows))
        rows.append(obj)
    if not rows:
        raise ValidationError(f"{path}: trajectory contains no samples")
    has_rot = "rot" in rows[0]
    return Trajectory(
        rate=header["rate_hz"],
        pos=np.array([r["pos"] for r in rows]),
        vel=np.array([r["vel"] for r in rows]),
        rot=np.array([r["rot"] for r in rows]) if has_rot else None,
        rotvel=np.array([r["rotvel"] for r in rows]) if has_rot else None,
        t0=header.get("t0", 0.0),
        provenance=header.get("provenance", {}),
    )


@dataclass(frozen=True)
class AlignResult:
    """Streams resampled onto a common uniform grid."""

    u: Trajectory
    y_pos: np.ndarray
    y_vel: np.ndarray
    max_gap_s: float
    n_samples: int


def resample_align(u: Trajectory, y_t, y_channels) -> AlignResult:
    """Align a jittery output stream with a uniform input trajectory.

    Both streams are linearly interpolated onto the input's nominal
    1/rate grid over the overlapping time span (the input is already on
    that grid, so it is cropped, not resampled). Output velocities are
    central differences of the aligned positions.

    Raises when the output stream has a dropout longer than
    ``MAX_GAP_PERIODS`` nominal periods, listing the gap locations.
    """
    y_t = as_float_array(y_t, "y timestamps", ndim=1)
    y_channels = as_float_array(y_channels, "y samples")
    if y_channels.ndim == 1:
        y_channels = y_channels[:, None]
    check_same_length(y_t, y_channels, names=["y timestamps", "y samples"])
    if np.any(np.diff(y_t) <= 0):
        raise ValidationError("y timestamps must be strictly increasing")
    if y_channels.shape[1] != u.n_axes:
        raise ValidationError(
            f"output has {y_channels.shape[1]} channels, input has {u.n_axes} axes"
        )

    period = u.dt
    gaps = np.diff(y_t)
    bad = np.flatnonzero(gaps > MAX_GAP_PERIODS * period)
    if bad.size:
        windows = ", ".join(f"[{y_t[i]:.3f}s..{y_t[i + 1]:.3f}s]" for i in bad[:10])
        raise ValidationError(
            f"output stream has {bad.size} dropout(s) longer than "
            f"{MAX_GAP_PERIODS} periods: {windows}"
        )

    t_lo = max(u.t0, y_t[0])
    t_hi = min(u.t0 + (u.n_samples - 1) * period, y_t[-1])
    if t_hi - t_lo < period:
        raise ValidationError("streams do not overlap")
    i_lo = int(np.ceil((t_lo - u.t0) / period - 1e-9))
    i_hi = int(np.floor((t_hi - u.t0) / period + 1e-9))
    grid = u.t0 + np.arange(i_lo, i_hi + 1) / u.rate

    y_pos = np.column_stack([
        np.interp(grid, y_t, y_channels[:, j]) for j in range(y_channels.shape[1])
    ])
    dt = period
    y_vel = np.empty_like(y_pos)
    y_vel[1:-1] = (y_pos[2:] - y_pos[:-2]) / (2 * dt)
    y_vel[0] = (y_pos[1] - y_pos[0]) / dt
    y_vel[-1] = (y_pos[-1] - y_pos[-2]) / dt

    k_pos = u.n_position_axes
    u_cropped = Trajectory(
        rate=u.rate,
        pos=u.pos[i_lo:i_hi + 1],
        vel=u.vel[i_lo:i_hi + 1],
        rot=None if u.rot is None else u.rot[i_lo:i_hi + 1],
        rotvel=None if u.rotvel is None else u.rotvel[i_lo:i_hi + 1],
        t0=u.t0 + i_lo / u.rate,
        provenance=dict(u.provenance),
    )
    return AlignResult(
        u=u_cropped,
        y_pos=y_pos,
        y_vel=y_vel,
        max_gap_s=float(np.max(gaps)) if gaps.size else 0.0,
        n_samples=len(grid),
    )


@dataclass
class AnalysisReport:
    """Merged analysis results; sections are optional plain dicts."""

    session_id: str = ""
    fits: Optional[list] = None
    coupling: Optional[dict] = None
    linearity: Optional[dict] = None
    time_invariance: Optional[dict] = None
    passivity: Optional[dict] = None
    residuals: Optional[dict] = None
    path_length: Optional[dict] = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "session_id": self.session_id, "meta": self.meta}
        for key in ("fits", "coupling", "linearity", "time_invariance",
                    "passivity", "residuals", "path_length"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported report schema_version {d.get('schema_version')}")
        return cls(
            session_id=d.get("session_id", ""),
            fits=d.get("fits"),
            coupling=d.get("coupling"),
            linearity=d.get("linearity"),
            time_invariance=d.get("time_invariance"),
            passivity=d.get("passivity"),
            residuals=d.get("residuals"),
            path_length=d.get("path_length"),
            meta=d.get("meta", {}),
        )

    def validate(self):
        """Check cross-module invariants of every present metric."""
        if self.linearity:
            for key in ("spectral_xcorr", "time_xcorr"):
                for v in self.linearity.get(key, []):
                    if not -1.0 <= v <= 1.0:
                        raise ValidationError(f"linearity.{key} value {v} outside [-1, 1]")
            for v in self.linearity.get("coherence_in_band", []):
                if not 0.0 <= v <= 1.0 + 1e-12:
                    raise ValidationError(f"coherence value {v} outside [0, 1]")
        if self.residuals:
            if self.residuals.get("sigma", 0.0) < 0:
                raise ValidationError("residuals.sigma must be >= 0")
            if self.residuals.get("bhattacharyya", 0.0) < -1e-12:
                raise ValidationError("residuals.bhattacharyya must be >= 0")
        if self.fits:
            for fit in self.fits:
                if fit.get("rms_percent_error") is not None and fit["rms_percent_error"] < 0:
                    raise ValidationError("fit rms_percent_error must be >= 0")
        if self.path_length:
            for v in self.path_length.values():
                if isinstance(v, (int, float)) and v < 0:
                    raise ValidationError("path lengths must be >= 0")
        return self

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "AnalysisReport":
        return cls.from_dict(json.loads(Path(path).read_text()))
