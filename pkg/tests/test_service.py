import io
import json
import threading
import time
import urllib.error
import urllib.request

import numpy as np
import pytest

from countloop.imgio import Image, save_image
from countloop.oracle import GeneratorSpec, GroundTruth, SimulatedUser, generate_synthetic
from countloop.service import make_server


@pytest.fixture(scope="module")
def server():
    srv = make_server(port=0)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}"
    srv.shutdown()


def http(method, url, body=None, content_type="application/json", raw=False):
    data = None
    if body is not None:
        data = body if isinstance(body, bytes) else json.dumps(body).encode()
    req = urllib.request.Request(url, data=data, method=method)
    req.add_header("Content-Type", content_type)
    try:
        with urllib.request.urlopen(req, timeout=120) as resp:
            payload = resp.read()
            return resp.status, payload if raw else json.loads(payload)
    except urllib.error.HTTPError as exc:
        payload = exc.read()
        return exc.code, payload if raw else json.loads(payload)


def small_scene():
    spec = GeneratorSpec(width=128, height=128, count=12, kind="disk",
                         radius_min=8, radius_max=8, intensity_jitter=0.2,
                         background_noise=0.0, min_spacing=24, edge_margin=20)
    return generate_synthetic(spec, seed=3)


def png_bytes(pixels):
    import PIL.Image

    buf = io.BytesIO()
    arr = np.round(pixels[:, :, 0] * 255).astype(np.uint8)
    PIL.Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def wait_for_phase(base, sid, phase, timeout=180):
    deadline = time.time() + timeout
    while time.time() < deadline:
        status, state = http("GET", f"{base}/sessions/{sid}/state")
        assert status == 200
        if state.get("error"):
            raise AssertionError(f"session error: {state['error']}")
        if state["phase"] == phase:
            return state
        time.sleep(0.2)
    raise TimeoutError(f"session never reached {phase}")


class TestErrors:
    def test_unknown_session_404(self, server):
        status, doc = http("GET", f"{server}/sessions/deadbeef0000/state")
        assert status == 404
        assert "error" in doc

    def test_unknown_route_404(self, server):
        status, _ = http("GET", f"{server}/nonsense")
        assert status == 404

    def test_malformed_payload_422(self, server):
        pixels, _ = small_scene()
        status, doc = http("POST", f"{server}/sessions", body=png_bytes(pixels), content_type="image/png")
        assert status == 200
        sid = doc["id"]
        status, _ = http("POST", f"{server}/sessions/{sid}/windows", body=b"{not json", content_type="application/json")
        assert status == 422
        http("DELETE", f"{server}/sessions/{sid}")

    def test_iterate_before_windows_409(self, server):
        pixels, _ = small_scene()
        _, doc = http("POST", f"{server}/sessions", body=png_bytes(pixels), content_type="image/png")
        sid = doc["id"]
        status, _ = http("POST", f"{server}/sessions/{sid}/iterate")
        assert status == 409
        http("DELETE", f"{server}/sessions/{sid}")

    def test_empty_upload_422(self, server):
        status, _ = http("POST", f"{server}/sessions", body=b"", content_type="image/png")
        assert status == 422

    def test_delete_then_404(self, server):
        pixels, _ = small_scene()
        _, doc = http("POST", f"{server}/sessions", body=png_bytes(pixels), content_type="image/png")
        sid = doc["id"]
        status, _ = http("DELETE", f"{server}/sessions/{sid}")
        assert status == 200
        status, _ = http("GET", f"{server}/sessions/{sid}/state")
        assert status == 404


class TestMultipart:
    def test_multipart_upload(self, server):
        pixels, _ = small_scene()
        png = png_bytes(pixels)
        boundary = "xyzboundary42"
        body = (
            f"--{boundary}\r\n"
            'Content-Disposition: form-data; name="image"; filename="scene.png"\r\n'
            "Content-Type: image/png\r\n\r\n"
        ).encode() + png + f"\r\n--{boundary}--\r\n".encode()
        status, doc = http("POST", f"{server}/sessions", body=body,
                           content_type=f'multipart/form-data; boundary="{boundary}"')
        assert status == 200
        assert "id" in doc
        http("DELETE", f"{server}/sessions/{doc['id']}")


@pytest.mark.slow
class TestFullFlow:
    @pytest.fixture(scope="class")
    def flow(self, server):
        pixels, gt = small_scene()
        _, doc = http("POST", f"{server}/sessions?seed=5", body=png_bytes(pixels), content_type="image/png")
        sid = doc["id"]
        d0 = gt.points[0]
        rect = {"x": int(d0[0]) - 10, "y": int(d0[1]) - 10, "w": 21, "h": 21}
        status, wdoc = http("POST", f"{server}/sessions/{sid}/windows",
                            body={"rects": [rect], "config": {"max_train_steps": 8000}})
        assert status == 200
        return {"server": server, "sid": sid, "gt": gt, "windows": wdoc, "pixels": pixels}

    def test_windows_report_positives(self, flow):
        assert flow["windows"]["sufficient"] is True
        assert flow["windows"]["positives_found"] >= 10

    def test_feedback_before_iterate_409(self, flow):
        status, _ = http("POST", f"{flow['server']}/sessions/{flow['sid']}/feedback", body={"decisions": []})
        assert status == 409

    def test_iterate_trains_and_serves_queries(self, flow):
        base, sid = flow["server"], flow["sid"]
        status, _ = http("POST", f"{base}/sessions/{sid}/iterate")
        assert status == 202
        status, _ = http("POST", f"{base}/sessions/{sid}/iterate")
        assert status == 409  # already training
        state = wait_for_phase(base, sid, "awaiting-feedback")
        assert state["iteration"] == 0
        status, qdoc = http("GET", f"{base}/sessions/{sid}/queries")
        assert status == 200
        assert qdoc["iteration"] == 1
        flow["queries"] = qdoc["queries"]

    def test_overlay_is_png(self, flow):
        status, body = http("GET", f"{flow['server']}/sessions/{flow['sid']}/overlay.png", raw=True)
        assert status == 200
        assert body[:8] == b"\x89PNG\r\n\x1a\n"

    def test_empty_feedback_means_all_accept(self, flow):
        base, sid = flow["server"], flow["sid"]
        status, _ = http("POST", f"{base}/sessions/{sid}/feedback", body={"decisions": []})
        assert status == 202
        state = wait_for_phase(base, sid, "awaiting-feedback")
        assert state["iteration"] == 1
        assert state["clicks"] == 0

    def test_finish_returns_detections(self, flow):
        base, sid = flow["server"], flow["sid"]
        status, doc = http("POST", f"{base}/sessions/{sid}/finish")
        assert status == 200
        assert doc["space"] == "original"
        assert doc["count"] == len(doc["points"])
        assert doc["count"] >= 10  # most of the 12 disks
        status, _ = http("POST", f"{base}/sessions/{sid}/iterate")
        assert status == 409  # finished sessions reject mutation
