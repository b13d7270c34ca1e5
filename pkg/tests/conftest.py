"""Shared fixtures: in-process runtime, live HTTP server, time helpers."""
from __future__ import annotations

import socket
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import httpx
import pytest
import uvicorn

from hgdesk.ctm.api import Runtime, ServiceConfig, build_runtime, create_app
from hgdesk.domain.timefmt import at_time_of_day


@pytest.fixture()
def runtime(tmp_path: Path) -> Iterator[Runtime]:
    """Fresh single-process runtime on a manual clock (no HTTP)."""
    config = ServiceConfig(
        db_path=tmp_path / "ctm.sqlite3",
        object_dir=tmp_path / "objects",
        virtual_clock=True,
        queue_events=True,
    )
    rt = build_runtime(config)
    yield rt
    rt.close()


def set_time(rt: Runtime, day: str, time_of_day: str = "00:00") -> int:
    now = at_time_of_day(day, time_of_day)
    rt.clock.set(now)
    return now


@dataclass
class LiveServer:
    base_url: str
    runtime: Runtime
    worker_token: str
    _server: uvicorn.Server
    _thread: threading.Thread

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=10)
        self.runtime.close()


def free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def start_live_server(tmp_path: Path, *, virtual_clock: bool = True) -> LiveServer:
    config = ServiceConfig(
        db_path=tmp_path / "ctm.sqlite3",
        object_dir=tmp_path / "objects",
        virtual_clock=virtual_clock,
        tick_secs=3600.0,  # ticks are driven explicitly in tests
    )
    rt = build_runtime(config)
    app = create_app(rt)
    port = free_port()
    server = uvicorn.Server(
        uvicorn.Config(app, host="127.0.0.1", port=port, log_level="error")
    )
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    base_url = f"http://127.0.0.1:{port}"
    deadline = time.monotonic() + 15
    while time.monotonic() < deadline:
        try:
            if httpx.get(base_url + "/v1/healthz", timeout=1).status_code == 200:
                break
        except httpx.TransportError:
            time.sleep(0.05)
    else:
        raise RuntimeError("test server failed to start")
    return LiveServer(
        base_url=base_url,
        runtime=rt,
        worker_token=rt.worker_token(),
        _server=server,
        _thread=thread,
    )


@pytest.fixture()
def live_server(tmp_path: Path) -> Iterator[LiveServer]:
    handle = start_live_server(tmp_path)
    yield handle
    handle.stop()
