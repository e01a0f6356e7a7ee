import json
import time
from collections import deque
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

import follower_lab as fl
from follower_lab.service import ServiceConfig, create_app


@pytest.fixture()
def fast_client(tmp_path):
    """App with accelerated pacing and client-declared timestamps."""
    config = ServiceConfig(data_dir=tmp_path, sample_timeout_s=5.0,
                           time_scale=200.0, timestamp_source="client")
    app = create_app(config)
    with TestClient(app) as client:
        yield client, tmp_path


def run_echo_client(client, session_id, delay_samples=5, drop_after=None):
    """Scripted follower: echoes each target with a fixed sample delay."""
    buffer = deque()
    n_sent = 0
    with client.websocket_connect(f"/sessions/{session_id}/run") as ws:
        ws.send_json({"type": "hello", "client": "scripted-echo", "version": 1})
        head = ws.receive_json()
        assert head["type"] == "session"
        while True:
            msg = ws.receive_json()
            if msg["type"] == "done":
                break
            assert msg["type"] == "target"
            buffer.append(msg)
            if len(buffer) > delay_samples:
                past = buffer.popleft()
                if drop_after is not None and n_sent >= drop_after:
                    continue
                ws.send_json({"type": "sample", "t": msg["t"],
                              "pos": past["pos"], "rot": past["rot"]})
                n_sent += 1
        ws.send_json({"type": "end"})
    return head, n_sent


class TestSessionCreation:
    def test_noise_spec_echoed_with_concrete_seed(self, fast_client):
        client, _ = fast_client
        r = client.post("/sessions", json={"type": "noise", "cutoff_hz": 0.63,
                                           "duration_s": 240.0})
        assert r.status_code == 201
        body = r.json()
        assert body["session_id"]
        assert body["spec"]["cutoff_hz"] == 0.63
        assert body["spec"]["duration_s"] == 240.0
        assert isinstance(body["spec"]["seed"], int)

    def test_cutoff_above_nyquist_422(self, fast_client):
        client, _ = fast_client
        r = client.post("/sessions", json={"type": "noise", "cutoff_hz": 60.0,
                                           "rate_hz": 100.0})
        assert r.status_code == 422
        assert "cutoff" in r.text

    def test_bad_type_422(self, fast_client):
        client, _ = fast_client
        r = client.post("/sessions", json={"type": "triangle"})
        assert r.status_code == 422

    def test_duplicate_creates_distinct_ids(self, fast_client):
        client, _ = fast_client
        spec = {"type": "noise", "seed": 7}
        a = client.post("/sessions", json=spec).json()["session_id"]
        b = client.post("/sessions", json=spec).json()["session_id"]
        assert a != b

    def test_excessive_rotation_422(self, fast_client):
        client, _ = fast_client
        r = client.post("/sessions", json={"type": "noise", "rotation": True,
                                           "rotation_amp_deg": 80.0})
        assert r.status_code == 422


class TestRunProtocol:
    def test_scripted_echo_run_persists_valid_session(self, fast_client):
        client, data_dir = fast_client
        r = client.post("/sessions", json={"type": "noise", "duration_s": 30.0,
                                           "seed": 5})
        sid = r.json()["session_id"]
        run_echo_client(client, sid, delay_samples=5)

        info = client.get(f"/sessions/{sid}").json()
        assert info["state"] == "ended"
        assert info["targets_sent"] == 3000
        assert abs(info["samples_received"] - 3000) / 3000 < 0.01

        path = Path(info["file"])
        record = fl.load_session(path)
        assert record.complete and not record.aborted
        assert record.source == "human-capture"
        # echoing 5 samples late: high correlation, pure-delay character
        corr = fl.time_xcorr(record.u.pos[:, 0], record.y_pos[:, 0])
        assert corr >= 0.99

    def test_sample_count_accounting_240s(self, fast_client):
        client, _ = fast_client
        r = client.post("/sessions", json={"type": "noise", "duration_s": 240.0,
                                           "seed": 3})
        sid = r.json()["session_id"]
        run_echo_client(client, sid)
        info = client.get(f"/sessions/{sid}").json()
        assert info["targets_sent"] == 24000
        assert abs(info["samples_received"] - 24000) / 24000 < 0.01
        record = fl.load_session(Path(info["file"]))
        assert abs(record.n_samples - 24000) / 24000 < 0.01

    def test_out_of_order_samples_rejected_but_session_continues(self, fast_client):
        client, _ = fast_client
        r = client.post("/sessions", json={"type": "noise", "duration_s": 30.0,
                                           "seed": 9})
        sid = r.json()["session_id"]
        with client.websocket_connect(f"/sessions/{sid}/run") as ws:
            head = ws.receive_json()
            assert head["type"] == "session"
            sent = 0
            while True:
                msg = ws.receive_json()
                if msg["type"] == "done":
                    break
                ws.send_json({"type": "sample", "t": msg["t"], "pos": msg["pos"],
                              "rot": 0.0})
                sent += 1
                if sent % 100 == 0:  # stale timestamp: must be rejected
                    ws.send_json({"type": "sample", "t": msg["t"] - 1.0,
                                  "pos": msg["pos"], "rot": 0.0})
            ws.send_json({"type": "end"})
        info = client.get(f"/sessions/{sid}").json()
        assert info["state"] == "ended"
        assert info["samples_rejected"] >= 25
        assert info["samples_received"] == 3000

    def test_silent_client_aborts_after_timeout(self, tmp_path):
        config = ServiceConfig(data_dir=tmp_path, sample_timeout_s=5.0,
                               time_scale=100.0, timestamp_source="client")
        app = create_app(config)
        with TestClient(app) as client:
            r = client.post("/sessions", json={"type": "noise", "duration_s": 240.0,
                                               "seed": 1})
            sid = r.json()["session_id"]
            t0 = time.monotonic()
            with client.websocket_connect(f"/sessions/{sid}/run") as ws:
                head = ws.receive_json()
                assert head["type"] == "session"
                # never send a sample; drain until the server closes
                with pytest.raises(Exception):
                    while True:
                        ws.receive_json()
            elapsed = time.monotonic() - t0
            info = client.get(f"/sessions/{sid}").json()
            assert info["state"] == "aborted"
            assert elapsed < 30.0

    def test_second_run_rejected(self, fast_client):
        from starlette.websockets import WebSocketDisconnect

        client, _ = fast_client
        r = client.post("/sessions", json={"type": "noise", "duration_s": 30.0,
                                           "seed": 2})
        sid = r.json()["session_id"]
        run_echo_client(client, sid)
        with pytest.raises(WebSocketDisconnect):
            with client.websocket_connect(f"/sessions/{sid}/run") as ws:
                ws.receive_json()


class TestListingAndDownload:
    def test_list_and_download_byte_identical(self, fast_client):
        client, _ = fast_client
        r = client.post("/sessions", json={"type": "fourier", "duration_s": 30.0,
                                           "seed": 4, "amp": 0.05})
        sid = r.json()["session_id"]
        run_echo_client(client, sid)
        sessions = client.get("/sessions").json()
        assert len(sessions) == 1
        assert sessions[0]["session_id"] == sid
        file_bytes = client.get(f"/sessions/{sid}/file").content
        disk_bytes = Path(sessions[0]["file"]).read_bytes()
        assert file_bytes == disk_bytes

    def test_unknown_id_404(self, fast_client):
        client, _ = fast_client
        assert client.get("/sessions/nope/file").status_code == 404
        assert client.get("/sessions/nope").status_code == 404


class TestPacing:
    def test_real_time_interval_within_5_percent(self, tmp_path):
        config = ServiceConfig(data_dir=tmp_path, sample_timeout_s=5.0,
                               time_scale=1.0, timestamp_source="client")
        app = create_app(config)
        arrivals = []
        with TestClient(app) as client:
            r = client.post("/sessions", json={"type": "noise", "duration_s": 12.0,
                                               "cutoff_hz": 1.0, "seed": 6})
            sid = r.json()["session_id"]
            with client.websocket_connect(f"/sessions/{sid}/run") as ws:
                head = ws.receive_json()
                assert head["type"] == "session"
                while True:
                    msg = ws.receive_json()
                    if msg["type"] == "done":
                        break
                    arrivals.append(time.monotonic())
                    ws.send_json({"type": "sample", "t": msg["t"],
                                  "pos": msg["pos"], "rot": 0.0})
                ws.send_json({"type": "end"})
        intervals = np.diff(arrivals)
        assert len(intervals) > 1000
        assert abs(np.mean(intervals) / 0.010 - 1) < 0.05
