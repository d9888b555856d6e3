"""Live browser driver speaking the DevTools debugging protocol.

Drives a locally installed Chromium-family browser over its remote
debugging WebSocket, records Network/Page events during a navigation and
synthesizes a HAR document from them. The event-to-HAR synthesis is a pure
function so it stays testable without a browser; the driver itself needs a
browser binary and is therefore not part of the offline test suite.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import shutil
import socket
import struct
import subprocess
import tempfile
import time
from datetime import datetime, timezone
from urllib.parse import urlsplit
from urllib.request import urlopen

from .probe import BrowserDriver, DriverFailure, LaunchSpec, NavigationResult, NavigationTimeout

logger = logging.getLogger(__name__)

_BROWSER_CANDIDATES = (
    "google-chrome",
    "google-chrome-stable",
    "chromium",
    "chromium-browser",
    "chrome",
    "msedge",
)

_LIFECYCLE_PAINTS = {
    "firstPaint": "first-paint",
    "firstContentfulPaint": "first-contentful-paint",
}


# -- HAR synthesis (pure) ---------------------------------------------------------


def har_from_network_events(events, page_url: str) -> tuple[dict, list]:
    """Build a HAR 1.2 document plus paint events from raw CDP messages.

    ``events`` are dicts with ``method`` and ``params`` as received from the
    debugger. Request lifecycles are keyed by requestId; redirects flush the
    previous exchange as its own entry. Timestamps are CDP monotonic
    seconds; wallTime on the first request anchors absolute time.
    """
    requests: dict[str, dict] = {}
    finished: list[dict] = []
    nav_mono = None
    nav_wall = None
    on_load = None
    on_content = None
    paints = []

    def flush(request_id, end_mono, failed=False):
        state = requests.pop(request_id, None)
        if state is None or state.get("start_mono") is None:
            return
        state["end_mono"] = end_mono
        state["failed"] = failed
        finished.append(state)

    for event in events:
        method = event.get("method", "")
        params = event.get("params", {}) or {}
        if method == "Network.requestWillBeSent":
            request_id = params.get("requestId")
            if request_id is None:
                continue
            if params.get("redirectResponse") is not None and request_id in requests:
                requests[request_id]["response"] = params["redirectResponse"]
                flush(request_id, params.get("timestamp"))
            if nav_mono is None:
                nav_mono = params.get("timestamp")
                nav_wall = params.get("wallTime")
            requests[request_id] = {
                "request": params.get("request", {}),
                "start_mono": params.get("timestamp"),
                "wall": params.get("wallTime"),
                "response": None,
                "encoded_length": None,
            }
        elif method == "Network.responseReceived":
            state = requests.get(params.get("requestId"))
            if state is not None:
                state["response"] = params.get("response", {})
        elif method == "Network.loadingFinished":
            state = requests.get(params.get("requestId"))
            if state is not None and params.get("encodedDataLength") is not None:
                state["encoded_length"] = params["encodedDataLength"]
            flush(params.get("requestId"), params.get("timestamp"))
        elif method == "Network.loadingFailed":
            flush(params.get("requestId"), params.get("timestamp"), failed=True)
        elif method == "Page.loadEventFired":
            on_load = params.get("timestamp")
        elif method == "Page.domContentEventFired":
            on_content = params.get("timestamp")
        elif method == "Page.lifecycleEvent":
            name = _LIFECYCLE_PAINTS.get(params.get("name"))
            if name and nav_mono is not None and params.get("timestamp") is not None:
                paints.append((name, (params["timestamp"] - nav_mono) * 1000.0))

    # anything still open when capture stopped is kept with zero duration
    for request_id in list(requests):
        state = requests[request_id]
        flush(request_id, state.get("start_mono"))

    if nav_wall is None:
        nav_wall = time.time()
    if nav_mono is None:
        nav_mono = 0.0
    started_at = datetime.fromtimestamp(nav_wall, tz=timezone.utc)

    entries = []
    for state in finished:
        entries.append(_har_entry(state, nav_mono, started_at))
    entries.sort(key=lambda e: e["startedDateTime"])

    timings = {}
    if on_content is not None:
        timings["onContentLoad"] = (on_content - nav_mono) * 1000.0
    if on_load is not None:
        timings["onLoad"] = (on_load - nav_mono) * 1000.0

    har = {
        "log": {
            "version": "1.2",
            "creator": {"name": "webprobe-cdp", "version": "1"},
            "pages": [
                {
                    "id": "page_1",
                    "startedDateTime": _iso(started_at),
                    "title": page_url,
                    "pageTimings": timings or {"onLoad": -1},
                }
            ],
            "entries": entries,
        }
    }
    return har, paints


def _har_entry(state, nav_mono, started_at) -> dict:
    request = state.get("request") or {}
    response = state.get("response") or {}
    start_mono = state.get("start_mono") or nav_mono
    end_mono = state.get("end_mono") or start_mono
    offset_s = start_mono - nav_mono
    wall = state.get("wall")
    if wall is not None:
        started = datetime.fromtimestamp(wall, tz=timezone.utc)
    else:
        started = datetime.fromtimestamp(
            started_at.timestamp() + offset_s, tz=timezone.utc
        )
    total_ms = max(0.0, (end_mono - start_mono) * 1000.0)

    headers = response.get("headers") or {}
    header_list = []
    for name, value in headers.items():
        # the debugger folds duplicate headers into newline-joined values
        for part in str(value).split("\n"):
            header_list.append({"name": name, "value": part})

    status = response.get("status", 0)
    if state.get("failed"):
        status = 0

    entry = {
        "pageref": "page_1",
        "startedDateTime": _iso(started),
        "time": total_ms,
        "request": {
            "method": request.get("method", "GET"),
            "url": request.get("url", ""),
            "httpVersion": response.get("protocol", ""),
            "headers": [],
        },
        "response": {
            "status": status,
            "httpVersion": response.get("protocol", ""),
            "headers": header_list,
            "content": {
                "size": state.get("encoded_length") or 0,
                "mimeType": response.get("mimeType", ""),
            },
            "bodySize": state.get("encoded_length") if state.get("encoded_length") is not None else -1,
            "_transferSize": state.get("encoded_length") if state.get("encoded_length") is not None else -1,
        },
        "timings": _har_timings(response.get("timing"), total_ms),
    }
    ip = response.get("remoteIPAddress")
    if ip:
        entry["serverIPAddress"] = str(ip).strip("[]")
    return entry


def _har_timings(timing, total_ms: float) -> dict:
    if not timing:
        return {phase: -1 for phase in ("blocked", "dns", "connect", "ssl", "send", "wait", "receive")}

    def span(start_key, end_key):
        start, end = timing.get(start_key, -1), timing.get(end_key, -1)
        if start is None or end is None or start < 0 or end < 0:
            return -1
        return max(0.0, end - start)

    blocked = timing.get("dnsStart", -1)
    if blocked is None or blocked < 0:
        blocked = timing.get("sendStart", -1)
    wait = span("sendEnd", "receiveHeadersEnd")
    headers_end = timing.get("receiveHeadersEnd", -1)
    receive = max(0.0, total_ms - headers_end) if headers_end and headers_end >= 0 else -1
    return {
        "blocked": blocked if blocked is not None and blocked >= 0 else -1,
        "dns": span("dnsStart", "dnsEnd"),
        "connect": span("connectStart", "connectEnd"),
        "ssl": span("sslStart", "sslEnd"),
        "send": span("sendStart", "sendEnd"),
        "wait": wait,
        "receive": receive,
    }


def _iso(stamp: datetime) -> str:
    return stamp.isoformat(timespec="milliseconds").replace("+00:00", "Z")


# -- minimal WebSocket client -------------------------------------------------------


class _WebSocket:
    """Just enough RFC 6455 for a local debugger socket: text frames, ping."""

    def __init__(self, url: str, timeout: float = 10.0):
        parts = urlsplit(url)
        self._sock = socket.create_connection(
            (parts.hostname, parts.port or 80), timeout=timeout
        )
        key = base64.b64encode(os.urandom(16)).decode("ascii")
        path = parts.path or "/"
        if parts.query:
            path += "?" + parts.query
        handshake = (
            f"GET {path} HTTP/1.1\r\n"
            f"Host: {parts.hostname}:{parts.port or 80}\r\n"
            "Upgrade: websocket\r\nConnection: Upgrade\r\n"
            f"Sec-WebSocket-Key: {key}\r\nSec-WebSocket-Version: 13\r\n\r\n"
        )
        self._sock.sendall(handshake.encode("ascii"))
        response = self._read_until(b"\r\n\r\n")
        if b" 101 " not in response.split(b"\r\n", 1)[0]:
            raise DriverFailure(f"websocket handshake refused: {response[:120]!r}")
        accept = base64.b64encode(
            hashlib.sha1((key + "258EAFA5-E914-47DA-95CA-C5AB0DC85B11").encode()).digest()
        )
        if accept not in response:
            raise DriverFailure("websocket handshake accept mismatch")
        self._buffer = b""

    def _read_until(self, marker: bytes) -> bytes:
        data = b""
        while marker not in data:
            chunk = self._sock.recv(4096)
            if not chunk:
                raise DriverFailure("websocket closed during handshake")
            data += chunk
        return data

    def _read_exact(self, n: int) -> bytes:
        data = b""
        while len(data) < n:
            chunk = self._sock.recv(n - len(data))
            if not chunk:
                raise DriverFailure("websocket closed mid-frame")
            data += chunk
        return data

    def send_text(self, payload: str) -> None:
        data = payload.encode("utf-8")
        mask = os.urandom(4)
        header = bytearray([0x81])
        length = len(data)
        if length < 126:
            header.append(0x80 | length)
        elif length < 1 << 16:
            header.append(0x80 | 126)
            header += struct.pack(">H", length)
        else:
            header.append(0x80 | 127)
            header += struct.pack(">Q", length)
        header += mask
        masked = bytes(b ^ mask[i % 4] for i, b in enumerate(data))
        self._sock.sendall(bytes(header) + masked)

    def recv_text(self, timeout: float) -> str:
        self._sock.settimeout(timeout)
        message = b""
        while True:
            first, second = self._read_exact(2)
            fin = first & 0x80
            opcode = first & 0x0F
            length = second & 0x7F
            if length == 126:
                length = struct.unpack(">H", self._read_exact(2))[0]
            elif length == 127:
                length = struct.unpack(">Q", self._read_exact(8))[0]
            if second & 0x80:
                mask = self._read_exact(4)
                payload = bytes(
                    b ^ mask[i % 4] for i, b in enumerate(self._read_exact(length))
                )
            else:
                payload = self._read_exact(length)
            if opcode == 0x8:
                raise DriverFailure("debugger closed the websocket")
            if opcode == 0x9:
                self._send_control(0xA, payload)
                continue
            if opcode == 0xA:
                continue
            message += payload
            if fin:
                return message.decode("utf-8")

    def _send_control(self, opcode: int, payload: bytes) -> None:
        mask = os.urandom(4)
        header = bytes([0x80 | opcode, 0x80 | len(payload)]) + mask
        self._sock.sendall(header + bytes(b ^ mask[i % 4] for i, b in enumerate(payload)))

    def close(self) -> None:
        try:
            self._send_control(0x8, b"")
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass


# -- the driver ----------------------------------------------------------------------


def find_browser(binary: str | None = None) -> str:
    override = binary or os.environ.get("WEBPROBE_BROWSER")
    if override:
        found = shutil.which(override) or (override if os.path.exists(override) else None)
        if not found:
            raise DriverFailure(f"browser binary {override!r} not found")
        return found
    for candidate in _BROWSER_CANDIDATES:
        found = shutil.which(candidate)
        if found:
            return found
    raise DriverFailure("no Chromium-family browser found on PATH")


class LiveBrowserDriver(BrowserDriver):
    """Launches a real browser and captures navigations via the debugger port."""

    def __init__(self, binary: str | None = None, quiet_window_s: float = 1.5):
        self._binary = binary
        self._quiet_window_s = quiet_window_s
        self._process = None
        self._profile_dir = None
        self._ws = None
        self._next_id = 1
        self._pending_cache_clear = False

    def launch(self, spec: LaunchSpec) -> None:
        binary = find_browser(self._binary)
        self._profile_dir = tempfile.mkdtemp(prefix="webprobe-profile-")
        flags = [
            binary,
            "--headless=new",
            "--remote-debugging-port=0",
            f"--user-data-dir={self._profile_dir}",
            f"--window-size={spec.window[0]},{spec.window[1]}",
            "--no-first-run",
            "--no-default-browser-check",
            "--disable-gpu",
            "about:blank",
        ]
        flags.insert(2, "--enable-quic" if spec.settings.quic_enabled else "--disable-quic")
        if not spec.settings.h2_enabled:
            flags.insert(2, "--disable-http2")
        if spec.adblock:
            logger.warning("adblock requested but no blocker extension is wired in")
        try:
            self._process = subprocess.Popen(
                flags, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL
            )
        except OSError as exc:
            raise DriverFailure(f"cannot launch {binary}: {exc}") from exc
        port = self._wait_for_port()
        self._connect(port)

    def _wait_for_port(self, wait_s: float = 15.0) -> int:
        port_file = os.path.join(self._profile_dir, "DevToolsActivePort")
        deadline = time.monotonic() + wait_s
        while time.monotonic() < deadline:
            if self._process.poll() is not None:
                raise DriverFailure("browser exited during startup")
            try:
                with open(port_file, encoding="ascii") as fp:
                    return int(fp.readline().strip())
            except (OSError, ValueError):
                time.sleep(0.05)
        raise DriverFailure("browser never opened its debugging port")

    def _connect(self, port: int) -> None:
        try:
            with urlopen(f"http://127.0.0.1:{port}/json/list", timeout=5) as response:
                targets = json.loads(response.read())
        except OSError as exc:
            raise DriverFailure(f"cannot list debugger targets: {exc}") from exc
        page = next((t for t in targets if t.get("type") == "page"), None)
        if page is None or "webSocketDebuggerUrl" not in page:
            raise DriverFailure("no debuggable page target")
        self._ws = _WebSocket(page["webSocketDebuggerUrl"])
        self._call("Network.enable", {})
        self._call("Page.enable", {})
        self._call("Page.setLifecycleEventsEnabled", {"enabled": True})

    def _call(self, method: str, params: dict, timeout: float = 10.0) -> dict:
        if self._ws is None:
            raise DriverFailure("driver not launched")
        call_id = self._next_id
        self._next_id += 1
        self._ws.send_text(json.dumps({"id": call_id, "method": method, "params": params}))
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            message = json.loads(self._ws.recv_text(timeout=max(0.1, deadline - time.monotonic())))
            if message.get("id") == call_id:
                if "error" in message:
                    raise DriverFailure(f"{method} failed: {message['error']}")
                return message.get("result", {})
        raise DriverFailure(f"{method} got no reply")

    def navigate(self, url: str, timeout_ms: float) -> NavigationResult:
        if self._ws is None:
            raise DriverFailure("driver not launched")
        if self._pending_cache_clear:
            self._call("Network.clearBrowserCache", {})
            self._pending_cache_clear = False
        events: list[dict] = []
        deadline = time.monotonic() + timeout_ms / 1000.0
        self._call("Page.navigate", {"url": url})
        loaded_at = None
        while True:
            now = time.monotonic()
            if now >= deadline:
                har, paints = har_from_network_events(events, url)
                raise NavigationTimeout(
                    f"page load exceeded {timeout_ms:.0f} ms",
                    partial_har=json.dumps(har).encode("utf-8"),
                    paint_events=paints,
                )
            if loaded_at is not None and now - loaded_at >= self._quiet_window_s:
                break
            try:
                message = json.loads(self._ws.recv_text(timeout=min(0.25, deadline - now)))
            except socket.timeout:
                continue
            if "method" not in message:
                continue
            events.append(message)
            if message["method"] == "Page.loadEventFired":
                loaded_at = time.monotonic()
        har, paints = har_from_network_events(events, url)
        return NavigationResult(har=json.dumps(har).encode("utf-8"), paint_events=paints)

    def clear_resource_cache(self) -> None:
        if self._ws is not None:
            self._call("Network.clearBrowserCache", {})
        else:
            self._pending_cache_clear = True

    def clear_dns_cache(self) -> None:
        # the debugger exposes no host-resolver flush; a probe relies on
        # browser restarts for cold DNS, so this stays a logged no-op
        logger.warning("clear_dns_cache is not supported by the debugging protocol")

    def close(self) -> None:
        if self._ws is not None:
            self._ws.close()
            self._ws = None
        if self._process is not None:
            self._process.terminate()
            try:
                self._process.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._process.kill()
            self._process = None
        if self._profile_dir is not None:
            shutil.rmtree(self._profile_dir, ignore_errors=True)
            self._profile_dir = None
