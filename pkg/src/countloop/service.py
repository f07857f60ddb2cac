"""HTTP/JSON session server exposing the active-learning loop to a browser UI.

Stdlib-only threading server. Each session is single-flight: mutating calls
take the session lock, and long-running training happens on a worker thread
while /state reports progress. Coordinates on the wire are in original-image
space; the server maps them to the rescaled working space internally.

Phases: awaiting-windows -> (training <-> awaiting-feedback)* -> finished.
"""

from __future__ import annotations

import io
import json
import re
import threading
import traceback
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .active_loop import (
    InsufficientPositives,
    LabelDecision,
    QueryBatch,
    Session,
    apply_feedback,
)
from .imgio import Image, render_overlay, rescale_for_window
from .matching import MIN_INITIAL_POSITIVES, BoundingWindow
from .network import ConvergenceFailure, NetworkConfig, init_classifier, train_to_labels


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        self.status = status
        super().__init__(message)


@dataclass
class SessionHandle:
    sid: str
    image: Image  # original image
    seed: int
    phase: str = "awaiting-windows"
    windows: list[BoundingWindow] = field(default_factory=list)
    session: Session | None = None
    batch: QueryBatch | None = None
    error: str | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)
    worker: threading.Thread | None = None
    positives_found: int = 0
    detections: np.ndarray | None = None

    def require_phase(self, *allowed: str) -> None:
        if self.phase not in allowed:
            raise ApiError(409, f"action invalid in phase {self.phase!r} (wants {'/'.join(allowed)})")


class SessionStore:
    """In-memory session registry with optional per-iteration JSON snapshots."""

    def __init__(self, snapshot_dir: str | None = None):
        self._sessions: dict[str, SessionHandle] = {}
        self._lock = threading.Lock()
        self.snapshot_dir = Path(snapshot_dir) if snapshot_dir else None

    def create(self, image: Image, seed: int) -> SessionHandle:
        sid = uuid.uuid4().hex[:12]
        handle = SessionHandle(sid=sid, image=image, seed=seed)
        with self._lock:
            self._sessions[sid] = handle
        return handle

    def get(self, sid: str) -> SessionHandle:
        with self._lock:
            handle = self._sessions.get(sid)
        if handle is None:
            raise ApiError(404, f"unknown session {sid!r}")
        return handle

    def delete(self, sid: str) -> None:
        with self._lock:
            if sid not in self._sessions:
                raise ApiError(404, f"unknown session {sid!r}")
            del self._sessions[sid]

    def snapshot(self, handle: SessionHandle) -> None:
        if self.snapshot_dir is None or handle.session is None:
            return
        self.snapshot_dir.mkdir(parents=True, exist_ok=True)
        doc = {
            "sid": handle.sid,
            "iteration": handle.session.iteration,
            "clicks": handle.session.clicks,
            "labels": handle.session.labels.counts,
            "log": handle.session.log,
        }
        (self.snapshot_dir / f"{handle.sid}.json").write_text(json.dumps(doc, sort_keys=True))


# ---------------------------------------------------------------------------
# session workflow


def _to_original_rect(handle: SessionHandle, q) -> list[float]:
    tf = handle.session.transform
    x0, y0 = tf.to_original(q.rect[0], q.rect[1])
    x1, y1 = tf.to_original(q.rect[0] + q.rect[2], q.rect[1] + q.rect[3])
    return [round(float(x0), 2), round(float(y0), 2), round(float(x1 - x0), 2), round(float(y1 - y0), 2)]


def _query_payload(handle: SessionHandle) -> dict:
    batch = handle.batch
    if batch is None or handle.session is None:
        return {"iteration": handle.session.iteration if handle.session else 0, "queries": []}
    tf = handle.session.transform
    out = []
    for q in batch.queries:
        ox, oy = tf.to_original(float(q.x), float(q.y))
        out.append({
            "x": round(float(ox), 2),
            "y": round(float(oy), 2),
            "rect": _to_original_rect(handle, q),
            "tentative": q.tentative,
        })
    return {"iteration": batch.iteration, "queries": out}


def add_windows(handle: SessionHandle, rects: list[dict], config_overrides: dict) -> dict:
    handle.require_phase("awaiting-windows")
    for rect in rects:
        win = BoundingWindow(x=int(rect["x"]), y=int(rect["y"]), width=int(rect["w"]), height=int(rect["h"]))
        win.validate(handle.image.width, handle.image.height)
        handle.windows.append(win)
    rescaled, transform, mapped = rescale_for_window(handle.image, handle.windows)
    config = NetworkConfig(c_in=handle.image.channels, **config_overrides)
    handle.session = Session(image=rescaled, transform=transform, config=config, seed=handle.seed)
    try:
        handle.positives_found = handle.session.harvest_initial_labels(mapped)
        sufficient = True
    except InsufficientPositives as exc:
        handle.positives_found = exc.found
        sufficient = False
    return {"positives_found": handle.positives_found, "sufficient": sufficient,
            "minimum": MIN_INITIAL_POSITIVES}


def _train_job(store: SessionStore, handle: SessionHandle) -> None:
    try:
        session = handle.session
        if session.classifier is None:
            session.select_network_capacity()
            session.classifier = init_classifier(session.config, session.seed)
        result = train_to_labels(session.classifier, session.image.pixels,
                                 session.labels.pos, session.labels.neg)
        session.forward = result.forward
        batch = session.build_queries()
        with handle.lock:
            handle.batch = batch
            handle.phase = "awaiting-feedback"
        store.snapshot(handle)
    except (ConvergenceFailure, Exception) as exc:  # noqa: BLE001 - surfaced via /state
        with handle.lock:
            handle.error = f"{type(exc).__name__}: {exc}"
            handle.phase = "awaiting-feedback"
            handle.batch = None
        traceback.print_exc()


def start_iterate(store: SessionStore, handle: SessionHandle) -> None:
    handle.require_phase("awaiting-windows", "awaiting-feedback")
    if handle.session is None or handle.session.labels.counts[0] < 1:
        raise ApiError(409, "no labels harvested yet; POST windows first")
    if handle.phase == "awaiting-windows" and handle.positives_found < MIN_INITIAL_POSITIVES:
        raise ApiError(409, f"insufficient positives ({handle.positives_found}); add windows")
    if handle.batch is not None and len(handle.batch):
        raise ApiError(409, "queries pending; POST feedback first")
    handle.phase = "training"
    handle.error = None
    handle.worker = threading.Thread(target=_train_job, args=(store, handle), daemon=True)
    handle.worker.start()


def _feedback_job(store: SessionStore, handle: SessionHandle, decisions: list[LabelDecision]) -> None:
    try:
        session = handle.session
        batch = handle.batch
        stats = apply_feedback(session.labels, batch, decisions, session.iteration + 1)
        session.clicks += stats["clicks"]
        result = train_to_labels(session.classifier, session.image.pixels,
                                 session.labels.pos, session.labels.neg)
        session.forward = result.forward
        session.iteration += 1
        session.log.append({
            "phase": "iteration", "iteration": session.iteration,
            "queries": [{"x": q.x, "y": q.y, "tentative": q.tentative} for q in batch.queries],
            "decisions": [{"x": d.x, "y": d.y, "action": d.action} for d in decisions],
            "clicks": stats["clicks"], "train_steps": result.steps,
            "labels": session.labels.counts,
        })
        with handle.lock:
            handle.batch = None
            handle.phase = "awaiting-feedback"
        store.snapshot(handle)
    except Exception as exc:  # noqa: BLE001
        with handle.lock:
            handle.error = f"{type(exc).__name__}: {exc}"
            handle.phase = "awaiting-feedback"
        traceback.print_exc()


def apply_feedback_request(store: SessionStore, handle: SessionHandle, decisions_doc: list[dict]) -> None:
    handle.require_phase("awaiting-feedback")
    if handle.batch is None or len(handle.batch) == 0:
        raise ApiError(409, "no queries pending; POST iterate first")
    tf = handle.session.transform
    by_rescaled = {(q.x, q.y): q for q in handle.batch.queries}
    decisions = []
    for doc in decisions_doc:
        action = doc.get("action")
        if action not in ("accept", "flip", "undetermined"):
            raise ApiError(422, f"bad action {action!r}")
        rx, ry = tf.to_rescaled(float(doc["x"]), float(doc["y"]))
        key = (int(round(float(rx))), int(round(float(ry))))
        if key not in by_rescaled:
            raise ApiError(422, f"decision at {doc['x']},{doc['y']} matches no pending query")
        decisions.append(LabelDecision(x=key[0], y=key[1], action=action))
    handle.phase = "training"
    handle.error = None
    handle.worker = threading.Thread(target=_feedback_job, args=(store, handle, decisions), daemon=True)
    handle.worker.start()


def state_payload(handle: SessionHandle) -> dict:
    session = handle.session
    doc = {
        "phase": handle.phase,
        "iteration": session.iteration if session else 0,
        "clicks": session.clicks if session else 0,
        "positives_found": handle.positives_found,
        "queries_pending": len(handle.batch) if handle.batch else 0,
        "error": handle.error,
    }
    if session is not None and session.forward is not None and handle.phase != "training":
        doc["count_estimate"] = session.count_estimate()
        doc["labels"] = list(session.labels.counts)
    return doc


def finish(handle: SessionHandle) -> dict:
    handle.require_phase("awaiting-feedback")
    session = handle.session
    if session is None or session.forward is None:
        raise ApiError(409, "session has not trained yet")
    pts = session.final_detections()
    handle.detections = pts
    handle.phase = "finished"
    return {
        "count": int(len(pts)),
        "points": [[round(float(x), 2), round(float(y), 2)] for x, y in pts],
        "space": "original",
        "clicks": session.clicks,
        "iterations": session.iteration,
    }


# ---------------------------------------------------------------------------
# HTTP plumbing


def _parse_multipart(body: bytes, content_type: str) -> bytes:
    match = re.search(r'boundary="?([^";]+)"?', content_type)
    if not match:
        raise ApiError(422, "multipart body without boundary")
    boundary = b"--" + match.group(1).encode()
    for part in body.split(boundary):
        if b"\r\n\r\n" not in part:
            continue
        head, _, payload = part.partition(b"\r\n\r\n")
        if b"filename=" in head or b'name="image"' in head:
            return payload.rstrip(b"\r\n-")
    raise ApiError(422, "no file part found in multipart body")


def make_handler(store: SessionStore):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):  # quiet by default
            pass

        def _send(self, status: int, payload: dict | bytes, content_type: str = "application/json") -> None:
            body = payload if isinstance(payload, bytes) else (json.dumps(payload, sort_keys=True) + "\n").encode()
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _body(self) -> bytes:
            length = int(self.headers.get("Content-Length") or 0)
            return self.rfile.read(length)

        def _json_body(self) -> dict:
            try:
                return json.loads(self._body() or b"{}")
            except json.JSONDecodeError as exc:
                raise ApiError(422, f"malformed JSON: {exc}") from exc

        def _route(self, method: str) -> None:
            try:
                self._dispatch(method)
            except ApiError as exc:
                self._send(exc.status, {"error": str(exc)})
            except (ValueError, KeyError, TypeError) as exc:
                self._send(422, {"error": f"{type(exc).__name__}: {exc}"})
            except BrokenPipeError:
                pass
            except Exception as exc:  # noqa: BLE001
                traceback.print_exc()
                self._send(500, {"error": f"{type(exc).__name__}: {exc}"})

        def _dispatch(self, method: str) -> None:
            path = self.path.split("?")[0].rstrip("/")
            query = dict(re.findall(r"[?&]([^=&]+)=([^&]*)", self.path))

            if method == "POST" and path == "/sessions":
                ctype = self.headers.get("Content-Type", "")
                body = self._body()
                data = _parse_multipart(body, ctype) if ctype.startswith("multipart/") else body
                if not data:
                    raise ApiError(422, "empty image upload")
                from PIL import Image as PILImage

                try:
                    with PILImage.open(io.BytesIO(data)) as img:
                        if img.mode in ("1", "L", "I", "I;16", "F"):
                            arr = np.asarray(img.convert("F"), dtype=np.float64)[:, :, None] / 255.0
                        else:
                            arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
                except Exception as exc:
                    raise ApiError(422, f"cannot decode image: {exc}") from exc
                handle = store.create(Image(np.clip(arr, 0, 1)), seed=int(query.get("seed", 0)))
                self._send(200, {"id": handle.sid})
                return

            match = re.match(r"^/sessions/([0-9a-f]+)(/.*)?$", path)
            if not match:
                raise ApiError(404, f"no such route {path!r}")
            handle = store.get(match.group(1))
            rest = match.group(2) or ""

            if method == "DELETE" and rest == "":
                store.delete(handle.sid)
                self._send(200, {"deleted": handle.sid})
            elif method == "POST" and rest == "/windows":
                doc = self._json_body()
                with handle.lock:
                    payload = add_windows(handle, doc.get("rects", []), doc.get("config", {}))
                self._send(200, payload)
            elif method == "POST" and rest == "/iterate":
                with handle.lock:
                    start_iterate(store, handle)
                self._send(202, {"phase": handle.phase})
            elif method == "GET" and rest == "/queries":
                handle.require_phase("awaiting-feedback")
                self._send(200, _query_payload(handle))
            elif method == "POST" and rest == "/feedback":
                doc = self._json_body()
                with handle.lock:
                    apply_feedback_request(store, handle, doc.get("decisions", []))
                self._send(202, {"phase": handle.phase})
            elif method == "GET" and rest == "/state":
                with handle.lock:
                    self._send(200, state_payload(handle))
            elif method == "GET" and rest == "/overlay.png":
                if handle.session is None or handle.session.forward is None:
                    raise ApiError(409, "nothing to draw yet")
                session = handle.session
                pts = session.final_detections()
                buf = io.BytesIO()
                payload = _query_payload(handle)
                canvas = render_overlay(handle.image, pts, None,
                                        queries=payload["queries"] if handle.batch else None)
                canvas.save(buf, format="PNG")
                self._send(200, buf.getvalue(), content_type="image/png")
            elif method == "POST" and rest == "/finish":
                with handle.lock:
                    self._send(200, finish(handle))
            else:
                raise ApiError(404, f"no such route {method} {path!r}")

        def do_GET(self):
            self._route("GET")

        def do_POST(self):
            self._route("POST")

        def do_DELETE(self):
            self._route("DELETE")

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.end_headers()

    return Handler


def make_server(host: str = "127.0.0.1", port: int = 0, snapshot_dir: str | None = None) -> ThreadingHTTPServer:
    store = SessionStore(snapshot_dir=snapshot_dir)
    server = ThreadingHTTPServer((host, port), make_handler(store))
    server.store = store  # type: ignore[attr-defined]
    return server


def serve(host: str = "127.0.0.1", port: int = 8008, snapshot_dir: str | None = None) -> None:
    server = make_server(host, port, snapshot_dir)
    print(f"countloop service on http://{host}:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
