"""HTTP + WebSocket API around interactive sessions.

Geometry travels as binary frames, not JSON:

    offset  size  field
    0       4     magic b"TRGM"
    4       2     version (uint16, = 1)
    6       2     kind (uint16: 1 = indexed mesh, 2 = point cloud)
    8       4     vertex count (uint32)
    12      4     index count (uint32, 0 for clouds)
    16      4     scalar field count (uint32, 0 or vertex count)
    20      ...   payload: vertices float32 xyz, then uint32 indices,
                  then float32 scalars
    end     4     crc32 of payload (uint32)

All integers little-endian. Events on /sessions/{id}/events are JSON
envelopes: accepted -> progress(level, step, loss) -> done(revision, cd)
or failed(reason). One optimization may be in flight per session; a second
prompt while busy is rejected with 409.
"""

from __future__ import annotations

import asyncio
import os
import struct
import threading
import time
import uuid
import zlib
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from . import __version__
from .mesh import PointCloud
from .metrics import chamfer_one_sided
from .pipeline import register
from .session import Prompt, PromptError, Session, session_snapshot
from .synth import load_case

MAGIC = b"TRGM"
VERSION = 1
KIND_MESH = 1
KIND_CLOUD = 2

DEFAULT_SESSION_CAP = 16
DEFAULT_TTL_SECONDS = 3600.0


def encode_geometry(vertices: np.ndarray, indices: np.ndarray | None = None,
                    scalars: np.ndarray | None = None) -> bytes:
    kind = KIND_MESH if indices is not None else KIND_CLOUD
    v = np.ascontiguousarray(vertices, dtype="<f4")
    payload = v.tobytes()
    n_idx = 0
    if indices is not None:
        i = np.ascontiguousarray(indices, dtype="<u4")
        payload += i.tobytes()
        n_idx = i.size
    n_scal = 0
    if scalars is not None:
        s = np.ascontiguousarray(scalars, dtype="<f4")
        payload += s.tobytes()
        n_scal = s.size
    header = MAGIC + struct.pack("<HHIII", VERSION, kind, len(v), n_idx, n_scal)
    return header + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def decode_geometry(frame: bytes):
    """Inverse of encode_geometry; raises ValueError on corruption."""
    if frame[:4] != MAGIC:
        raise ValueError("bad magic")
    version, kind, n_v, n_i, n_s = struct.unpack("<HHIII", frame[4:20])
    if version != VERSION:
        raise ValueError(f"unsupported frame version {version}")
    payload = frame[20:-4]
    (crc,) = struct.unpack("<I", frame[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ValueError("checksum mismatch")
    off = 0
    vertices = np.frombuffer(payload, dtype="<f4", count=3 * n_v, offset=off).reshape(n_v, 3)
    off += 12 * n_v
    indices = np.frombuffer(payload, dtype="<u4", count=n_i, offset=off).reshape(-1, 3) if n_i else None
    off += 4 * n_i
    scalars = np.frombuffer(payload, dtype="<f4", count=n_s, offset=off) if n_s else None
    return kind, vertices, indices, scalars


@dataclass
class ApiSession:
    session: Session
    case_name: str
    lock: threading.Lock = field(default_factory=threading.Lock)
    busy: bool = False
    last_activity: float = field(default_factory=time.monotonic)
    cloud_frame: bytes = b""
    surface_frames: dict[int, bytes] = field(default_factory=dict)  # latest revision only
    subscribers: list[asyncio.Queue] = field(default_factory=list)

    def touch(self) -> None:
        self.last_activity = time.monotonic()


class PromptBody(BaseModel):
    line_on_model: list[list[float]]
    line_on_cloud: list[list[float]]


class SessionBody(BaseModel):
    case: str
    auto_register: bool = False


def _surface_frame(api: ApiSession) -> bytes:
    s = api.session
    rev = s.revision
    if rev not in api.surface_frames:
        api.surface_frames.clear()  # single-revision retention
        api.surface_frames[rev] = encode_geometry(
            s.deformed_surface, s.mesh.boundary_faces
        )
    return api.surface_frames[rev]


def create_app(
    cases_dir: str,
    ui_dir: str | None = None,
    session_cap: int = DEFAULT_SESSION_CAP,
    ttl_seconds: float = DEFAULT_TTL_SECONDS,
) -> FastAPI:
    case_names = sorted(
        d for d in os.listdir(cases_dir) if os.path.exists(os.path.join(cases_dir, d, "case.json"))
    )
    if not case_names:
        raise ValueError(f"{cases_dir}: contains no case bundles")
    if ui_dir is not None and not os.path.exists(os.path.join(ui_dir, "index.html")):
        raise ValueError(f"{ui_dir}: not a UI bundle (missing index.html)")

    app = FastAPI(title="tetreg session service", version=__version__)
    sessions: dict[str, ApiSession] = {}

    def evict_idle() -> None:
        now = time.monotonic()
        for sid in [s for s, a in sessions.items() if not a.busy and now - a.last_activity > ttl_seconds]:
            del sessions[sid]

    def get_or_404(sid: str) -> ApiSession | JSONResponse:
        api = sessions.get(sid)
        if api is None:
            return JSONResponse({"error": "unknown session"}, status_code=404)
        api.touch()
        return api

    def broadcast(api: ApiSession, loop: asyncio.AbstractEventLoop, event: dict) -> None:
        for queue in list(api.subscribers):
            loop.call_soon_threadsafe(queue.put_nowait, event)

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__, "sessions": len(sessions)}

    @app.get("/cases")
    def cases():
        return {"cases": case_names}

    @app.post("/sessions", status_code=201)
    def create_session(body: SessionBody):
        evict_idle()
        if body.case not in case_names:
            return JSONResponse({"error": f"unknown case {body.case!r}"}, status_code=404)
        if len(sessions) >= session_cap:
            return JSONResponse({"error": "session limit reached"}, status_code=429)
        case = load_case(os.path.join(cases_dir, body.case))
        initial = None
        if body.auto_register:
            result = register(case.mesh, case.cloud, case.corr, mode="biompinn-pbm",
                              material=case.material)
            initial = result.u_vol
        session = Session.create(case.mesh, case.cloud, corr=case.corr,
                                 material=case.material, initial_field=initial)
        sid = uuid.uuid4().hex[:12]
        api = ApiSession(session=session, case_name=body.case)
        api.cloud_frame = encode_geometry(case.cloud.points)
        sessions[sid] = api
        return {
            "session_id": sid,
            "revision": session.revision,
            "geometry": {
                "surface": f"/sessions/{sid}/surface?rev={session.revision}",
                "cloud": f"/sessions/{sid}/cloud",
            },
        }

    @app.get("/sessions/{sid}/surface")
    def surface(sid: str, rev: int | None = None):
        api = get_or_404(sid)
        if isinstance(api, JSONResponse):
            return api
        current = api.session.revision
        if rev is not None and rev != current:
            return JSONResponse({"error": f"revision {rev} not retained", "current": current},
                                status_code=410)
        return Response(content=_surface_frame(api), media_type="application/octet-stream",
                        headers={"ETag": str(current)})

    @app.get("/sessions/{sid}/cloud")
    def cloud(sid: str):
        api = get_or_404(sid)
        if isinstance(api, JSONResponse):
            return api
        return Response(content=api.cloud_frame, media_type="application/octet-stream")

    @app.get("/sessions/{sid}/metrics")
    def metrics(sid: str):
        api = get_or_404(sid)
        if isinstance(api, JSONResponse):
            return api
        s = api.session
        cd = chamfer_one_sided(s.cloud, PointCloud(s.deformed_surface))
        return {
            "revision": s.revision,
            "cd": cd,
            "sigma2": s.last_sigma2,
            "last_prompt_seconds": s.last_prompt_seconds,
        }

    @app.get("/sessions/{sid}/snapshot")
    def snapshot(sid: str):
        api = get_or_404(sid)
        if isinstance(api, JSONResponse):
            return api
        return session_snapshot(api.session)

    @app.post("/sessions/{sid}/prompts", status_code=202)
    async def submit_prompt(sid: str, body: PromptBody):
        api = get_or_404(sid)
        if isinstance(api, JSONResponse):
            return api
        try:
            prompt = Prompt(
                line_on_model=np.array(body.line_on_model, dtype=np.float64),
                line_on_cloud=np.array(body.line_on_cloud, dtype=np.float64),
                prompt_id=uuid.uuid4().hex[:8],
                timestamp=time.time(),
            )
        except PromptError as exc:
            return JSONResponse({"error": str(exc)}, status_code=422)
        with api.lock:
            if api.busy:
                return JSONResponse({"error": "optimization in flight"}, status_code=409)
            api.busy = True

        loop = asyncio.get_running_loop()
        job_id = prompt.prompt_id
        broadcast(api, loop, {"type": "accepted", "job_id": job_id, "revision": api.session.revision})

        def on_step(level, step, parts):
            if step % 25 == 0:
                broadcast(api, loop, {"type": "progress", "job_id": job_id,
                                      "level": level, "step": step, "loss": parts.total})

        def work():
            try:
                info = api.session.apply_prompt(prompt, on_step=on_step)
                s = api.session
                cd = chamfer_one_sided(s.cloud, PointCloud(s.deformed_surface))
                broadcast(api, loop, {"type": "done", "job_id": job_id,
                                      "revision": info["revision"], "cd": cd,
                                      "seconds": info["seconds"], "sigma2": info["sigma2"]})
            except (PromptError, ValueError) as exc:
                broadcast(api, loop, {"type": "failed", "job_id": job_id, "reason": str(exc)})
            finally:
                with api.lock:
                    api.busy = False
                api.touch()

        asyncio.get_running_loop().run_in_executor(None, work)
        return {"job_id": job_id}

    @app.websocket("/sessions/{sid}/events")
    async def events(ws: WebSocket, sid: str):
        api = sessions.get(sid)
        if api is None:
            await ws.close(code=4404)
            return
        await ws.accept()
        queue: asyncio.Queue = asyncio.Queue()
        api.subscribers.append(queue)
        try:
            while True:
                event = await queue.get()
                await ws.send_json(event)
        except WebSocketDisconnect:
            pass
        finally:
            if queue in api.subscribers:
                api.subscribers.remove(queue)

    if ui_dir is not None:
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
