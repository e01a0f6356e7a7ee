"""Figure-data families and merged analysis reports.

Each family is emitted twice: a CSV with the raw series (so any tool
can re-render) and a static SVG rendering. The five families cover
input/output spectra, coherence, Nyquist curves of the fitted models,
cumulative energy, and the residual histogram against its Gaussian fit.
"""

from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis
from ._validation import ValidationError
from .session import AnalysisReport, SessionRecord
from .svgplot import line_plot
from .sysid import (
    FitOptions,
    FitResult,
    evaluate_position,
    fit_structured,
    segment_analysis,
)

NYQUIST_FREQ_GRID = np.logspace(-2, 1.5, 600)  # 0.01 .. ~31.6 Hz


def write_csv(path, columns: dict) -> Path:
    """Write named 1-d columns; shorter columns are padded with blanks."""
    path = Path(path)
    names = list(columns)
    arrays = [np.asarray(columns[n]).ravel() for n in names]
    n = max(len(a) for a in arrays)
    with path.open("w") as fh:
        fh.write(",".join(names) + "\n")
        for i in range(n):
            cells = [repr(float(a[i])) if i < len(a) else "" for a in arrays]
            fh.write(",".join(cells) + "\n")
    return path


def fit_all_axes(record: SessionRecord, opts: Optional[FitOptions] = None,
                 init=None) -> list:
    return [fit_structured(record, axis=a, init=init, opts=opts)
            for a in range(record.n_axes)]


def fit_summaries(fits: Sequence[FitResult]) -> list:
    out = []
    for a, f in enumerate(fits):
        out.append({
            "axis": a,
            "k_over_m": f.params.k_over_m,
            "b_over_m": f.params.b_over_m,
            "rms_percent_error": float(f.rms_percent_error[0]),
            "iterations": f.iterations,
            "converged": f.converged,
            "final_cost": f.final_cost,
        })
    return out


def spectra_family(record: SessionRecord, out_dir: Path) -> dict:
    """Input/output amplitude spectra per axis plus their correlation."""
    u_ch = record.u.channels()
    cols = {}
    xcorr = []
    series = []
    for a in range(record.n_axes):
        pair = analysis.spectrum_pair(u_ch[:, a], record.y_pos[:, a], record.rate_hz)
        if a == 0:
            cols["freq_hz"] = pair.freq
        cols[f"input_amp_{a}"] = pair.amplitude_u
        cols[f"output_amp_{a}"] = pair.amplitude_y
        xcorr.append(pair.xcorr)
        sel = pair.freq <= 5.0
        series.append((pair.freq[sel], pair.amplitude_u[sel], f"input {a}"))
        series.append((pair.freq[sel], pair.amplitude_y[sel], f"output {a}"))
    write_csv(out_dir / "spectra.csv", cols)
    line_plot(out_dir / "spectra.svg", series, title="Input/output amplitude spectra",
              xlabel="frequency (Hz)", ylabel="amplitude (m)")
    return {"spectral_xcorr": xcorr}


def coherence_family(record: SessionRecord, out_dir: Path) -> dict:
    u_ch = record.u.channels()
    cols = {}
    series = []
    summary = []
    band = (0.03, min(2.0, record.u.provenance.get("cutoff_hz", 0.63)))
    for a in range(record.n_axes):
        res = analysis.coherence(u_ch[:, a], record.y_pos[:, a], record.rate_hz)
        if a == 0:
            cols["freq_hz"] = res.freq
        cols[f"coherence_{a}"] = res.coherence
        sel = res.freq <= 5.0
        series.append((res.freq[sel], res.coherence[sel], f"axis {a}"))
        in_band = res.in_band(*band)
        summary.append(float(in_band.min()) if in_band.size else float("nan"))
    write_csv(out_dir / "coherence.csv", cols)
    line_plot(out_dir / "coherence.svg", series, title="Magnitude-squared coherence",
              xlabel="frequency (Hz)", ylabel="coherence")
    return {"coherence_in_band": summary, "coherence_band_hz": list(band)}


def nyquist_family(fits: Sequence[FitResult], out_dir: Path) -> dict:
    cols = {"freq_hz": NYQUIST_FREQ_GRID}
    series = []
    crossings = []
    for a, f in enumerate(fits):
        curve = analysis.nyquist_curve(f.params, NYQUIST_FREQ_GRID)
        cols[f"re_{a}"] = curve.real
        cols[f"im_{a}"] = curve.imag
        series.append((curve.real, curve.imag, f"axis {a}"))
        crossing = analysis.passivity_crossing(f.params)
        crossings.append(None if crossing is None else float(crossing))
    write_csv(out_dir / "nyquist.csv", cols)
    line_plot(out_dir / "nyquist.svg", series, title="Nyquist curves of fitted models",
              xlabel="Re G", ylabel="Im G")
    return {"crossing_hz": crossings}


def energy_family(record: SessionRecord, out_dir: Path) -> dict:
    velocity = analysis.record_energy(record, variant="velocity")
    force = analysis.record_energy(record, variant="force")
    write_csv(out_dir / "energy.csv", {
        "t": velocity.t,
        "energy_velocity": velocity.energy,
        "energy_force": force.energy,
    })
    line_plot(out_dir / "energy.svg",
              [(velocity.t, velocity.energy, "velocity pairing"),
               (force.t, force.energy, "force pairing")],
              title="Cumulative energy", xlabel="time (s)", ylabel="energy")
    skip = int(round(record.rate_hz * 1.6))
    tail_v = velocity.energy[min(skip, len(velocity.energy) - 1):]
    tail_f = force.energy[min(skip, len(force.energy) - 1):]
    return {
        "min_energy_velocity": float(tail_v.min()),
        "min_energy_force": float(tail_f.min()),
        "final_energy_velocity": velocity.final,
        "final_energy_force": force.final,
        "transient_skip_s": skip / record.rate_hz,
    }


def residual_family(record: SessionRecord, fits: Sequence[FitResult],
                    out_dir: Path) -> dict:
    u = record.input_matrix()
    predicted = np.column_stack([
        evaluate_position(f.params, u[:, 2 * a:2 * a + 2], record.y_pos[:, a],
                          record.dt)
        for a, f in enumerate(fits)
    ])
    stats = analysis.residual_stats(record.y_pos, predicted)
    centers = (stats.bin_edges[:-1] + stats.bin_edges[1:]) / 2
    write_csv(out_dir / "residual_hist.csv", {
        "bin_center_m": centers,
        "probability": stats.hist,
        "gaussian_probability": stats.gaussian,
    })
    line_plot(out_dir / "residual_hist.svg",
              [(centers, stats.hist, "residuals"),
               (centers, stats.gaussian, "fitted Gaussian")],
              title="Residual distribution", xlabel="residual (m)",
              ylabel="bin probability")
    return {
        "mu": stats.mu,
        "sigma": stats.sigma,
        "bhattacharyya": stats.bhattacharyya,
        "n_residuals": int(stats.residuals.size),
    }


def linearity_metrics(record: SessionRecord) -> dict:
    u_ch = record.u.channels()
    return {
        "time_xcorr": [float(analysis.time_xcorr(u_ch[:, a], record.y_pos[:, a]))
                       for a in range(record.n_axes)],
    }


def path_metrics(record: SessionRecord) -> dict:
    return {
        "input_m": float(analysis.path_length(record.u.channels())),
        "output_m": float(analysis.path_length(record.y_pos)),
    }


def build_report(record: SessionRecord, out_dir, n_segments: int = 3,
                 opts: Optional[FitOptions] = None,
                 init=None) -> AnalysisReport:
    """Run the full single-session pipeline and emit all figure families."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fits = fit_all_axes(record, opts=opts, init=init)

    linearity = linearity_metrics(record)
    linearity.update(spectra_family(record, out_dir))
    linearity.update(coherence_family(record, out_dir))

    passivity = nyquist_family(fits, out_dir)
    passivity.update(energy_family(record, out_dir))

    residuals = residual_family(record, fits, out_dir)

    time_invariance = None
    if n_segments >= 2:
        try:
            seg = segment_analysis(record, n_segments=n_segments, opts=opts, init=init)
            time_invariance = {
                "n_segments": n_segments,
                "param_deltas_percent": seg.param_deltas_percent.tolist(),
                "cross_rms_percent": seg.cross_rms_percent.tolist(),
                "rms_delta_percent": seg.rms_delta_percent.tolist(),
                "k_over_m": seg.k_over_m.tolist(),
                "b_over_m": seg.b_over_m.tolist(),
            }
        except ValidationError as exc:
            time_invariance = {"skipped": str(exc)}

    report = AnalysisReport(
        session_id=record.session_id,
        fits=fit_summaries(fits),
        linearity=linearity,
        time_invariance=time_invariance,
        passivity=passivity,
        residuals=residuals,
        path_length=path_metrics(record),
        meta={"source": record.source, "rate_hz": record.rate_hz,
              "duration_s": record.duration, "n_axes": record.n_axes},
    )
    report.validate()
    report.save(out_dir / "report.json")
    return report
