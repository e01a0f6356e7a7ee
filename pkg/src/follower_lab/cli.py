"""Command line pipeline: gen, simulate, identify, analyze, report, serve.

Every run writes a manifest echoing the resolved options; ``rerun``
replays a manifest, so any output is reproducible from its manifest
alone. Exit codes: 0 ok, 2 validation, 3 non-convergence, 4 I/O.
"""

import functools
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from ._validation import ValidationError
from .model import EnvParams, FollowerParams, NoiseModel, block_diagonal, build_state_space, simulate
from .reporting import build_report, fit_all_axes, fit_summaries, write_csv
from .session import (
    AnalysisReport,
    load_session,
    load_trajectory,
    save_session,
    save_trajectory,
)
from .sysid import (
    FitOptions,
    coupling_report,
    fit_structured,
    fit_unstructured,
    init_from_axis_fits,
    segment_analysis,
)
from .trajectory import (
    NoiseTrajSpec,
    default_fourier_spec,
    gen_filtered_noise,
    gen_fourier,
    gen_orientation_noise,
)

EXIT_VALIDATION = 2
EXIT_NONCONVERGED = 3
EXIT_IO = 4


def data_root() -> Path:
    return Path(os.environ.get("FOLLOWER_LAB_DATA_DIR", "."))


def resolve_out(out, default_name: str) -> Path:
    path = Path(out) if out else data_root() / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(command: str, options: dict, out_path: Path) -> Path:
    manifest = {
        "command": command,
        "options": {k: (str(v) if isinstance(v, Path) else v)
                    for k, v in options.items()},
        "package_version": __version__,
    }
    if out_path.suffix:
        manifest_path = out_path.with_suffix(out_path.suffix + ".manifest.json")
    else:
        manifest_path = out_path / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def pipeline_command(fn):
    """Map pipeline errors onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ValidationError as exc:
            click.echo(f"validation error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)
        except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(EXIT_IO)

    return wrapper


@click.group()
@click.version_option(__version__)
def main():
    """Follower dynamics lab: generate, simulate, identify, analyze."""


@main.command()
@click.option("--type", "traj_type", type=click.Choice(["noise", "fourier", "orientation"]),
              default="noise", show_default=True)
@click.option("--duration", type=float, default=None, help="Seconds; defaults per type.")
@click.option("--rate", type=float, default=100.0, show_default=True)
@click.option("--cutoff", type=float, default=0.63, show_default=True,
              help="Noise band limit (Hz).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--axes", type=int, default=1, show_default=True)
@click.option("--amp", type=float, default=None,
              help="Noise draw half-range (m or rad); Fourier peak (m).")
@click.option("--out", type=click.Path(), default=None, help="Output .traj.ndjson path.")
@pipeline_command
def gen(traj_type, duration, rate, cutoff, seed, axes, amp, out):
    """Generate an input trajectory file."""
    if traj_type == "noise":
        duration = 240.0 if duration is None else duration
        amp = 0.08 if amp is None else amp
        traj = gen_filtered_noise(NoiseTrajSpec(
            seed=seed, duration=duration, rate=rate, cutoff=cutoff,
            amp_range=(-amp, amp), axes=axes))
    elif traj_type == "orientation":
        duration = 240.0 if duration is None else duration
        amp = np.deg2rad(30.0) if amp is None else amp
        traj = gen_orientation_noise(NoiseTrajSpec(
            seed=seed, duration=duration, rate=rate, cutoff=cutoff,
            amp_range=(-amp, amp), axes=axes))
    else:
        duration = 120.0 if duration is None else duration
        amp = 0.03 if amp is None else amp
        traj = gen_fourier(default_fourier_spec(
            axes=axes, seed=seed, duration=duration, rate=rate, peak=amp))
    path = resolve_out(out, f"{traj_type}-{seed}.traj.ndjson")
    save_trajectory(traj, path)
    write_manifest("gen", {"type": traj_type, "duration": duration, "rate": rate,
                           "cutoff": cutoff, "seed": seed, "axes": axes,
                           "amp": amp, "out": str(path)}, path)
    click.echo(f"wrote {path} ({traj.n_samples} samples, {traj.n_axes} axes)")


@main.command("simulate")
@click.option("--input", "input_path", type=click.Path(), required=True,
              help="Input .traj.ndjson.")
@click.option("--m", "masses", type=float, multiple=True, default=(1.0,),
              show_default=True, help="Mass per axis (repeat for multi-axis).")
@click.option("--b", "dampings", type=float, multiple=True, default=(20.0,),
              show_default=True)
@click.option("--k", "stiffnesses", type=float, multiple=True, default=(270.0,),
              show_default=True)
@click.option("--kp", type=float, default=0.0, show_default=True,
              help="Environment stiffness (N/m).")
@click.option("--bp", type=float, default=0.0, show_default=True)
@click.option("--surface", type=float, default=0.0, show_default=True,
              help="Virtual surface height (m).")
@click.option("--contact/--no-contact", default=False, show_default=True)
@click.option("--noise-sigma", type=float, default=0.0, show_default=True,
              help="Output position noise std (m).")
@click.option("--noise-seed", type=int, default=0, show_default=True)
@click.option("--session-id", default=None)
@click.option("--out", type=click.Path(), default=None, help="Output .session.ndjson.")
@pipeline_command
def simulate_cmd(input_path, masses, dampings, stiffnesses, kp, bp, surface,
                 contact, noise_sigma, noise_seed, session_id, out):
    """Simulate the follower model tracking a trajectory file."""
    traj = load_trajectory(input_path)
    k_axes = traj.n_axes

    def per_axis(values, name):
        if len(values) == 1:
            return list(values) * k_axes
        if len(values) != k_axes:
            raise ValidationError(
                f"--{name} given {len(values)} times for {k_axes} axes")
        return list(values)

    params = [FollowerParams(m, b, k) for m, b, k in zip(
        per_axis(masses, "m"), per_axis(dampings, "b"), per_axis(stiffnesses, "k"))]
    env = EnvParams(k_p=kp, b_p=bp, surface_height=surface, enabled=contact)
    model = block_diagonal([build_state_space(p, env) for p in params])
    noise = NoiseModel(sigma_pos=noise_sigma, seed=noise_seed) if noise_sigma > 0 else None
    record = simulate(model, traj, noise=noise,
                      session_id=session_id or f"sim-{Path(input_path).stem}")
    path = resolve_out(out, f"{record.session_id}.session.ndjson")
    save_session(record, path)
    write_manifest("simulate", {
        "input": str(input_path), "m": list(masses), "b": list(dampings),
        "k": list(stiffnesses), "kp": kp, "bp": bp, "surface": surface,
        "contact": contact, "noise_sigma": noise_sigma, "noise_seed": noise_seed,
        "session_id": record.session_id, "out": str(path)}, path)
    click.echo(f"wrote {path} ({record.n_samples} samples)")


def _fit_options(max_iter, reg):
    return FitOptions(max_iterations=max_iter, regularization_weight=reg)


@main.command()
@click.option("--session", "session_path", type=click.Path(), required=True)
@click.option("--mode", type=click.Choice(["structured", "unstructured", "segments"]),
              default="structured", show_default=True)
@click.option("--segments", type=int, default=3, show_default=True)
@click.option("--init-b", type=float, default=20.0, show_default=True)
@click.option("--init-k", type=float, default=270.0, show_default=True)
@click.option("--max-iter", type=int, default=200, show_default=True)
@click.option("--reg", type=float, default=1e-8, show_default=True,
              help="Regularization weight toward the initial guess.")
@click.option("--out", type=click.Path(), default=None, help="Output fit .json.")
@pipeline_command
def identify(session_path, mode, segments, init_b, init_k, max_iter, reg, out):
    """Fit follower parameters to a recorded session."""
    record = load_session(session_path)
    opts = _fit_options(max_iter, reg)
    init = FollowerParams(1.0, init_b, init_k)
    payload = {"mode": mode, "session_id": record.session_id}
    converged = True

    if mode == "structured":
        fits = fit_all_axes(record, opts=opts, init=init)
        payload["fits"] = fit_summaries(fits)
        converged = all(f.converged for f in fits)
    elif mode == "unstructured":
        axis_fits = fit_all_axes(record, opts=opts, init=init)
        fit = fit_unstructured(record, init_from_axis_fits(axis_fits), opts)
        report = coupling_report(fit)
        payload["axis_fits"] = fit_summaries(axis_fits)
        payload["matrices"] = {n: fit.matrices[n].tolist() for n in ("A", "B", "C")}
        payload["coupling"] = report.per_matrix
        payload["rms_percent_error"] = fit.rms_percent_error.tolist()
        payload["converged"] = fit.converged
        converged = fit.converged and all(f.converged for f in axis_fits)
    else:
        seg = segment_analysis(record, n_segments=segments, opts=opts, init=init)
        payload["n_segments"] = segments
        payload["param_deltas_percent"] = seg.param_deltas_percent.tolist()
        payload["cross_rms_percent"] = seg.cross_rms_percent.tolist()
        payload["rms_delta_percent"] = seg.rms_delta_percent.tolist()
        payload["k_over_m"] = seg.k_over_m.tolist()
        payload["b_over_m"] = seg.b_over_m.tolist()
        converged = all(f.converged for per_axis in seg.fits for f in per_axis)

    path = resolve_out(out, f"{record.session_id}.fit.json")
    path.write_text(json.dumps(payload, indent=2) + "\n")
    write_manifest("identify", {
        "session": str(session_path), "mode": mode, "segments": segments,
        "init_b": init_b, "init_k": init_k, "max_iter": max_iter, "reg": reg,
        "out": str(path)}, path)
    click.echo(f"wrote {path}")
    if not converged:
        click.echo("fit did not converge; partial results written", err=True)
        sys.exit(EXIT_NONCONVERGED)


@main.command()
@click.option("--session", "session_path", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), default=None, help="Output directory.")
@click.option("--segments", type=int, default=3, show_default=True)
@click.option("--max-iter", type=int, default=200, show_default=True)
@click.option("--reg", type=float, default=1e-8, show_default=True)
@pipeline_command
def analyze(session_path, out, segments, max_iter, reg):
    """Full analysis of one session: figure data, CSV, SVG, report JSON."""
    record = load_session(session_path)
    out_dir = Path(out) if out else data_root() / f"{record.session_id}-analysis"
    report = build_report(record, out_dir, n_segments=segments,
                          opts=_fit_options(max_iter, reg))
    write_csv(out_dir / "timeseries.csv", {
        "t": record.t,
        **{f"u_pos_{a}": record.u.channels()[:, a] for a in range(record.n_axes)},
        **{f"y_pos_{a}": record.y_pos[:, a] for a in range(record.n_axes)},
    })
    write_manifest("analyze", {"session": str(session_path), "out": str(out_dir),
                               "segments": segments, "max_iter": max_iter,
                               "reg": reg}, out_dir)
    click.echo(f"wrote {out_dir}/report.json")
    click.echo(json.dumps(report.to_dict()["fits"], indent=2))


@main.command()
@click.option("--session", "session_path", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), default=None, help="Output directory.")
@click.option("--segments", type=int, default=3, show_default=True)
@click.option("--max-iter", type=int, default=200, show_default=True)
@click.option("--reg", type=float, default=1e-8, show_default=True)
@pipeline_command
def report(session_path, out, segments, max_iter, reg):
    """Merged report with all five figure-data families."""
    record = load_session(session_path)
    out_dir = Path(out) if out else data_root() / f"{record.session_id}-report"
    build_report(record, out_dir, n_segments=segments,
                 opts=_fit_options(max_iter, reg))
    write_manifest("report", {"session": str(session_path), "out": str(out_dir),
                              "segments": segments, "max_iter": max_iter,
                              "reg": reg}, out_dir)
    families = ["spectra", "coherence", "nyquist", "energy", "residual_hist"]
    for fam in families:
        assert (out_dir / f"{fam}.csv").exists() and (out_dir / f"{fam}.svg").exists()
    click.echo(f"wrote {out_dir} ({', '.join(families)}, report.json)")


@main.command()
@click.option("--port", type=int, default=None, help="Default: CAPTURE_PORT or 8787.")
@click.option("--data-dir", type=click.Path(), default=None,
              help="Default: CAPTURE_DATA_DIR or ./capture-data.")
@click.option("--sample-timeout", type=float, default=None,
              help="Abort after this many silent seconds (default 5).")
@click.option("--time-scale", type=float, default=None,
              help="Pacing acceleration for scripted runs (default 1).")
@pipeline_command
def serve(port, data_dir, sample_timeout, time_scale):
    """Run the live capture service."""
    from .service import ServiceConfig, run_server

    config = ServiceConfig.from_env()
    if port is not None:
        config.port = port
    if data_dir is not None:
        config.data_dir = Path(data_dir)
    if sample_timeout is not None:
        config.sample_timeout_s = sample_timeout
    if time_scale is not None:
        config.time_scale = time_scale
    click.echo(f"capture service on port {config.port}, data in {config.data_dir}")
    run_server(config)


@main.command()
@click.argument("manifest_path", type=click.Path())
@pipeline_command
def rerun(manifest_path):
    """Re-execute a command from its manifest."""
    try:
        manifest = json.loads(Path(manifest_path).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ValidationError(f"corrupted manifest: {exc}")
    command = manifest.get("command")
    options = manifest.get("options", {})
    runners = {
        "gen": gen, "simulate": simulate_cmd, "identify": identify,
        "analyze": analyze, "report": report,
    }
    if command not in runners:
        raise ValidationError(f"manifest names unknown command {command!r}")
    argv = []
    for key, value in options.items():
        if value is None:
            continue
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            # switch-style options (contact) carry a --no- variant
            argv.append(flag if value else flag.replace("--", "--no-", 1))
        elif isinstance(value, (list, tuple)):
            for v in value:
                argv.extend([flag, str(v)])
        else:
            argv.extend([flag, str(value)])
    runners[command].main(args=argv, standalone_mode=False)


if __name__ == "__main__":
    main()
