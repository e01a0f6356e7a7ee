"""Live tracking capture service.

Streams target poses from a generated trajectory to a browser (or
scripted) client over a WebSocket at the session rate, ingests the
client's tracked samples, and persists the finished session in the
canonical format for the identification/analysis pipeline.

Target emission and sample ingestion run as independent tasks so a slow
client can never stall the target stream. Wall-clock pacing can be
accelerated with ``time_scale`` for scripted runs; message contents and
session timestamps are unaffected.
"""

import asyncio
import json
import os
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from fastapi.responses import FileResponse
from pydantic import BaseModel, Field

from ._validation import ValidationError
from .session import SessionRecord, resample_align, save_session
from .trajectory import (
    DEFAULT_CUTOFF_HZ,
    NoiseTrajSpec,
    Trajectory,
    default_fourier_spec,
    gen_filtered_noise,
    gen_fourier,
    gen_orientation_noise,
)

DEFAULT_PORT = 8787
GRACE_PERIOD_S = 0.5  # wait for trailing samples after the last target


@dataclass
class ServiceConfig:
    data_dir: Path = Path("capture-data")
    port: int = DEFAULT_PORT
    sample_timeout_s: float = 5.0
    time_scale: float = 1.0          # >1 compresses wall-clock pacing
    timestamp_source: str = "server"  # "server" | "client"

    @classmethod
    def from_env(cls) -> "ServiceConfig":
        return cls(
            data_dir=Path(os.environ.get("CAPTURE_DATA_DIR", "capture-data")),
            port=int(os.environ.get("CAPTURE_PORT", DEFAULT_PORT)),
            sample_timeout_s=float(os.environ.get("CAPTURE_SAMPLE_TIMEOUT", 5.0)),
            time_scale=float(os.environ.get("CAPTURE_TIME_SCALE", 1.0)),
        )


class SessionSpec(BaseModel):
    """Trajectory request for a live session."""

    type: str = Field(pattern="^(noise|fourier)$")
    duration_s: float = 240.0
    rate_hz: float = 100.0
    cutoff_hz: float = DEFAULT_CUTOFF_HZ
    seed: Optional[int] = None
    amp: float = 0.15
    rotation: bool = False
    rotation_amp_deg: float = 30.0
    notes: str = ""


@dataclass
class LiveSession:
    """Registry entry; state moves only forward."""

    session_id: str
    spec: dict
    state: str = "created"  # created -> running -> ended | aborted
    created_wall: float = field(default_factory=time.time)
    targets_sent: int = 0
    samples_received: int = 0
    samples_rejected: int = 0
    client: Optional[dict] = None
    file: Optional[str] = None

    _ORDER = {"created": 0, "running": 1, "ended": 2, "aborted": 2}

    def advance(self, new_state: str):
        if self._ORDER[new_state] < self._ORDER[self.state]:
            raise ValidationError(f"illegal state transition {self.state} -> {new_state}")
        self.state = new_state

    def summary(self) -> dict:
        return {
            "session_id": self.session_id,
            "state": self.state,
            "created_wall": self.created_wall,
            "targets_sent": self.targets_sent,
            "samples_received": self.samples_received,
            "samples_rejected": self.samples_rejected,
            "spec": self.spec,
            "file": self.file,
        }


def materialize_trajectory(spec: dict) -> Trajectory:
    """Concrete two-position-axis trajectory (plus optional rotation)."""
    seed = spec["seed"]
    if spec["type"] == "noise":
        base = gen_filtered_noise(NoiseTrajSpec(
            seed=seed, duration=spec["duration_s"], rate=spec["rate_hz"],
            cutoff=spec["cutoff_hz"], amp_range=(-spec["amp"], spec["amp"]), axes=2))
    else:
        base = gen_fourier(default_fourier_spec(
            axes=2, seed=seed, duration=spec["duration_s"], rate=spec["rate_hz"],
            peak=spec["amp"]))
    if not spec.get("rotation"):
        return base
    lim = np.deg2rad(spec.get("rotation_amp_deg", 30.0))
    orient = gen_orientation_noise(NoiseTrajSpec(
        seed=seed + 1, duration=spec["duration_s"], rate=spec["rate_hz"],
        cutoff=spec["cutoff_hz"], amp_range=(-lim, lim), axes=1))
    n = min(base.n_samples, orient.n_samples)
    return Trajectory(rate=base.rate, pos=base.pos[:n], vel=base.vel[:n],
                      rot=orient.rot[:n], rotvel=orient.rotvel[:n],
                      provenance={**base.provenance, "rotation": orient.provenance})


def resolve_spec(req: SessionSpec) -> dict:
    """Validate a request and materialize the seed; raises ValidationError.

    Generator spec construction runs every invariant check without
    actually generating the (possibly minutes-long) signal.
    """
    spec = req.model_dump()
    if spec["seed"] is None:
        spec["seed"] = int.from_bytes(os.urandom(4), "little")
    if spec["type"] == "noise":
        NoiseTrajSpec(seed=spec["seed"], duration=spec["duration_s"],
                      rate=spec["rate_hz"], cutoff=spec["cutoff_hz"],
                      amp_range=(-spec["amp"], spec["amp"]), axes=2)
    else:
        default_fourier_spec(axes=2, seed=spec["seed"], duration=spec["duration_s"],
                             rate=spec["rate_hz"], peak=spec["amp"])
    if spec["rotation"]:
        lim = np.deg2rad(spec["rotation_amp_deg"])
        NoiseTrajSpec(seed=spec["seed"] + 1, duration=spec["duration_s"],
                      rate=spec["rate_hz"], cutoff=spec["cutoff_hz"],
                      amp_range=(-lim, lim), axes=1)
        if spec["rotation_amp_deg"] > 50.0:
            raise ValidationError("rotation amplitude exceeds +/-50 degrees")
    return spec


class CaptureRun:
    """One WebSocket run: paced target stream plus sample ingestion."""

    def __init__(self, session: LiveSession, traj: Trajectory,
                 config: ServiceConfig):
        self.session = session
        self.traj = traj
        self.config = config
        self.samples: list = []
        self.last_activity = time.monotonic()
        self.start_monotonic: Optional[float] = None
        self.client_done = asyncio.Event()
        self.raw_log = None

    @property
    def has_rotation(self) -> bool:
        return self.traj.n_rotation_axes > 0

    def session_clock(self) -> float:
        return (time.monotonic() - self.start_monotonic) * self.config.time_scale

    def open_raw_log(self):
        path = self.config.data_dir / f"{self.session.session_id}.capture.ndjson"
        self.raw_log = path.open("w")
        self.raw_log.write(json.dumps({
            "kind": "header", "session_id": self.session.session_id,
            "spec": self.session.spec,
        }) + "\n")

    def log_raw(self, obj: dict):
        if self.raw_log:
            self.raw_log.write(json.dumps(obj) + "\n")
            if self.session.samples_received % 100 == 0:
                self.raw_log.flush()

    def close_raw_log(self, complete: bool, aborted: bool):
        if self.raw_log:
            self.raw_log.write(json.dumps({
                "kind": "footer", "complete": complete, "aborted": aborted,
                "n_samples": self.session.samples_received,
            }) + "\n")
            self.raw_log.close()
            self.raw_log = None

    async def stream_targets(self, ws: WebSocket):
        rate = self.traj.rate
        pos = self.traj.pos
        rot = self.traj.rot
        interval = (1.0 / rate) / max(self.config.time_scale, 1e-9)
        start = time.monotonic()
        for k in range(self.traj.n_samples):
            deadline = start + k * interval
            delay = deadline - time.monotonic()
            if delay > 0:
                await asyncio.sleep(delay)
            msg = {
                "type": "target",
                "t": round(k / rate, 9),
                "pos": [float(pos[k, 0]), float(pos[k, 1])],
                "rot": float(rot[k, 0]) if rot is not None else 0.0,
            }
            await ws.send_text(json.dumps(msg))
            self.session.targets_sent += 1
        await ws.send_text(json.dumps({"type": "done"}))

    def ingest_sample(self, msg: dict) -> bool:
        """Validate and store one sample; False when rejected."""
        try:
            t_client = float(msg["t"])
            pos = [float(msg["pos"][0]), float(msg["pos"][1])]
            rot = float(msg.get("rot", 0.0))
        except (KeyError, IndexError, TypeError, ValueError):
            return False
        if not np.isfinite([t_client, *pos, rot]).all():
            return False
        if self.samples and t_client <= self.samples[-1][0]:
            return False  # out of order: reject, keep the session alive
        t_server = self.session_clock()
        self.samples.append((t_client, t_server, pos[0], pos[1], rot))
        return True

    def to_record(self, aborted: bool) -> Optional[SessionRecord]:
        if len(self.samples) < 2:
            return None
        arr = np.array(self.samples)
        t = arr[:, 1] if self.config.timestamp_source == "server" else arr[:, 0]
        channels = arr[:, 2:4]
        if self.has_rotation:
            channels = np.hstack([channels, arr[:, 4:5]])
        order = np.argsort(t, kind="stable")
        t = t[order]
        channels = channels[order]
        keep = np.concatenate([[True], np.diff(t) > 0])
        aligned = resample_align(self.traj, t[keep], channels[keep])
        n = aligned.n_samples
        return SessionRecord(
            session_id=self.session.session_id,
            rate_hz=self.traj.rate,
            u=aligned.u,
            y_pos=aligned.y_pos,
            y_vel=aligned.y_vel,
            f=np.zeros((n, aligned.y_pos.shape[1])),
            source="human-capture",
            axes={
                "positions": ["x", "y"],
                "rotations": ["theta"] if self.has_rotation else [],
            },
            provenance={
                "input": dict(self.traj.provenance),
                "capture": {
                    "timestamp_source": self.config.timestamp_source,
                    "samples_received": self.session.samples_received,
                    "samples_rejected": self.session.samples_rejected,
                    "max_gap_s": aligned.max_gap_s,
                    "client": self.session.client,
                },
            },
            notes=self.session.spec.get("notes", ""),
            complete=not aborted,
            aborted=aborted,
        )


def create_app(config: Optional[ServiceConfig] = None) -> FastAPI:
    config = config or ServiceConfig.from_env()
    config.data_dir = Path(config.data_dir)
    config.data_dir.mkdir(parents=True, exist_ok=True)
    app = FastAPI(title="follower-lab capture service")
    registry: dict = {}
    app.state.config = config
    app.state.registry = registry

    @app.post("/sessions", status_code=201)
    def create_session(req: SessionSpec):
        try:
            spec = resolve_spec(req)
        except ValidationError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        session_id = uuid.uuid4().hex[:12]
        session = LiveSession(session_id=session_id, spec=spec)
        registry[session_id] = session
        meta_path = config.data_dir / f"{session_id}.meta.json"
        meta_path.write_text(json.dumps(session.summary(), indent=2))
        return {"session_id": session_id, "spec": spec}

    @app.get("/sessions")
    def list_sessions():
        return [s.summary() for s in sorted(registry.values(),
                                            key=lambda s: s.created_wall)]

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        if session_id not in registry:
            raise HTTPException(status_code=404, detail="unknown session")
        return registry[session_id].summary()

    @app.get("/sessions/{session_id}/file")
    def get_session_file(session_id: str):
        session = registry.get(session_id)
        if session is None or not session.file:
            raise HTTPException(status_code=404, detail="no persisted file")
        return FileResponse(session.file, media_type="application/x-ndjson")

    @app.websocket("/sessions/{session_id}/run")
    async def run_session(ws: WebSocket, session_id: str):
        session = registry.get(session_id)
        if session is None or session.state != "created":
            await ws.close(code=4004)
            return
        await ws.accept()
        session.advance("running")
        traj = materialize_trajectory(session.spec)
        run = CaptureRun(session, traj, config)
        run.open_raw_log()
        run.start_monotonic = time.monotonic()
        run.last_activity = time.monotonic()

        await ws.send_text(json.dumps({
            "type": "session",
            "rate_hz": traj.rate,
            "duration_s": session.spec["duration_s"],
            "seed": session.spec["seed"],
            "rotation": run.has_rotation,
        }))

        sender = asyncio.create_task(run.stream_targets(ws))
        aborted = False
        # the sample timeout is session time; convert to wall clock
        timeout_wall = config.sample_timeout_s / max(config.time_scale, 1e-9)
        try:
            while True:
                if sender.done() and run.client_done.is_set():
                    break
                try:
                    raw = await asyncio.wait_for(ws.receive_text(), timeout=0.1)
                except asyncio.TimeoutError:
                    if sender.done():
                        # allow trailing samples, then finalize
                        if time.monotonic() - run.last_activity > GRACE_PERIOD_S:
                            break
                    elif time.monotonic() - run.last_activity > timeout_wall:
                        aborted = True
                        break
                    continue
                run.last_activity = time.monotonic()
                try:
                    msg = json.loads(raw)
                except json.JSONDecodeError:
                    session.samples_rejected += 1
                    continue
                kind = msg.get("type")
                if kind == "hello":
                    session.client = {"client": msg.get("client"),
                                      "version": msg.get("version")}
                elif kind == "sample":
                    if run.ingest_sample(msg):
                        session.samples_received += 1
                        run.log_raw({"kind": "sample", **msg,
                                     "t_server": run.samples[-1][1]})
                    else:
                        session.samples_rejected += 1
                elif kind == "end":
                    run.client_done.set()
                    if sender.done():
                        break
        except WebSocketDisconnect:
            aborted = True
        finally:
            if not sender.done():
                sender.cancel()
            run.close_raw_log(complete=not aborted, aborted=aborted)

        try:
            record = run.to_record(aborted=aborted)
        except ValidationError as exc:
            record = None
            session.spec["finalize_error"] = str(exc)
        if record is not None:
            path = config.data_dir / f"{session_id}.session.ndjson"
            save_session(record, path)
            session.file = str(path)
        session.advance("aborted" if aborted else "ended")
        meta_path = config.data_dir / f"{session_id}.meta.json"
        meta_path.write_text(json.dumps(session.summary(), indent=2))
        try:
            await ws.close()
        except RuntimeError:
            pass

    return app


def run_server(config: Optional[ServiceConfig] = None):
    import uvicorn

    config = config or ServiceConfig.from_env()
    uvicorn.run(create_app(config), host="0.0.0.0", port=config.port,
                log_level="warning")
