"""HTTP front end for the broker.

Every endpoint delegates to a broker method, which in turn invokes the
matching runtime action. ``GET /stream/<id>`` holds the connection open and
writes NDJSON delivery frames as they arrive.
"""

from __future__ import annotations

import json
import logging
import select
import socket
import threading
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

from faasbroker.broker import Broker
from faasbroker.errors import (
    AlreadyRegistered,
    BrokerError,
    BudgetRejected,
    HandlerError,
    InvocationTimeout,
    NotFound,
    ThrottledError,
    UnknownSubscriber,
)
from faasbroker.gateway import AlreadyConnected
from faasbroker.matchlang import ParseError

log = logging.getLogger(__name__)

_STATUS = [
    (ParseError, HTTPStatus.BAD_REQUEST),
    (UnknownSubscriber, HTTPStatus.NOT_FOUND),
    (NotFound, HTTPStatus.NOT_FOUND),
    (AlreadyRegistered, HTTPStatus.CONFLICT),
    (AlreadyConnected, HTTPStatus.CONFLICT),
    (ThrottledError, HTTPStatus.TOO_MANY_REQUESTS),
    (BudgetRejected, HTTPStatus.SERVICE_UNAVAILABLE),
    (InvocationTimeout, HTTPStatus.GATEWAY_TIMEOUT),
    (HandlerError, HTTPStatus.INTERNAL_SERVER_ERROR),
]


class BindError(BrokerError, OSError):
    code = "bind_error"


class ApiError(Exception):
    def __init__(self, status: HTTPStatus, code: str, detail):
        super().__init__(detail)
        self.status = status
        self.code = code
        self.detail = detail


def _error_for(exc: Exception) -> ApiError:
    if isinstance(exc, ApiError):
        return exc
    if isinstance(exc, ParseError):
        return ApiError(HTTPStatus.BAD_REQUEST, exc.code, exc.to_json())
    for cls, status in _STATUS:
        if isinstance(exc, cls):
            return ApiError(status, exc.code, str(exc))
    if isinstance(exc, (ValueError, KeyError, TypeError)):
        return ApiError(HTTPStatus.BAD_REQUEST, "bad_request", str(exc))
    log.exception("unhandled error")
    return ApiError(HTTPStatus.INTERNAL_SERVER_ERROR, "internal", str(exc))


def _field(body: dict, name: str, kind=str):
    if name not in body:
        raise ApiError(HTTPStatus.BAD_REQUEST, "bad_request", f"missing field {name!r}")
    value = body[name]
    if not isinstance(value, kind):
        raise ApiError(HTTPStatus.BAD_REQUEST, "bad_request", f"field {name!r} has the wrong type")
    return value


def _receipt_body(receipt) -> dict:
    return dict(receipt.to_json(), accepted=receipt.accepted)


class _Handler(BaseHTTPRequestHandler):
    server_version = "faasbroker"
    broker: Broker  # set per server class

    def log_message(self, format, *args):
        log.debug("%s - %s", self.address_string(), format % args)

    # -- plumbing ---------------------------------------------------------

    def _send_json(self, status: HTTPStatus, body) -> None:
        payload = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def _read_json(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        try:
            body = json.loads(raw.decode("utf-8")) if raw else {}
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ApiError(HTTPStatus.BAD_REQUEST, "bad_json", str(exc))
        if not isinstance(body, dict):
            raise ApiError(HTTPStatus.BAD_REQUEST, "bad_json", "body must be a JSON object")
        return body

    def _dispatch(self, routes: dict) -> None:
        path = self.path.split("?", 1)[0].rstrip("/") or "/"
        try:
            for prefix, fn in routes.items():
                if prefix.endswith("/") and path.startswith(prefix) and len(path) > len(prefix):
                    return fn(path[len(prefix):])
                if path == prefix:
                    return fn()
            raise ApiError(HTTPStatus.NOT_FOUND, "no_route", path)
        except Exception as exc:  # every failure becomes a JSON error body
            err = _error_for(exc)
            self._send_json(err.status, {"error": err.code, "detail": err.detail})

    def do_GET(self):
        self._dispatch({
            "/register": self.get_register,
            "/stream/": self.get_stream,
            "/receipts/": self.get_receipt,
        })

    def do_POST(self):
        self._dispatch({
            "/register-device": self.post_register_device,
            "/subscribe/topics": self.post_subscribe_topics,
            "/unsubscribe/topics": self.post_unsubscribe_topics,
            "/subscribe/content": self.post_subscribe_content,
            "/unsubscribe/content": self.post_unsubscribe_content,
            "/subscribe/function": self.post_subscribe_function,
            "/unsubscribe/function": self.post_unsubscribe_function,
            "/publish/topic": self.post_publish_topic,
            "/publish/content": self.post_publish_content,
            "/publish/function": self.post_publish_function,
        })

    # -- endpoints --------------------------------------------------------

    def get_register(self):
        self._send_json(HTTPStatus.OK, {"subscriberId": self.broker.register_subscriber()})

    def get_receipt(self, publication_id):
        try:
            receipt = self.broker.receipt(publication_id)
        except KeyError:
            raise ApiError(HTTPStatus.NOT_FOUND, "not_found", publication_id)
        self._send_json(HTTPStatus.OK, _receipt_body(receipt))

    def post_register_device(self):
        body = self._read_json()
        self.broker.register_device(_field(body, "subscriberId"))
        self._send_json(HTTPStatus.OK, {"ok": True})

    def post_subscribe_topics(self):
        body = self._read_json()
        self.broker.subscribe_topics(_field(body, "subscriberId"), _field(body, "topics", list))
        self._send_json(HTTPStatus.OK, {"ok": True})

    def post_unsubscribe_topics(self):
        body = self._read_json()
        self.broker.unsubscribe_topics(_field(body, "subscriberId"), _field(body, "topics", list))
        self._send_json(HTTPStatus.OK, {"ok": True})

    def post_subscribe_content(self):
        body = self._read_json()
        self.broker.subscribe_content(_field(body, "subscriberId"), _field(body, "constraints", list))
        self._send_json(HTTPStatus.OK, {"ok": True})

    def post_unsubscribe_content(self):
        body = self._read_json()
        self.broker.unsubscribe_content(_field(body, "subscriberId"))
        self._send_json(HTTPStatus.OK, {"ok": True})

    def post_subscribe_function(self):
        body = self._read_json()
        self.broker.subscribe_function(_field(body, "subscriberId"), _field(body, "functionType"),
                                       _field(body, "source"))
        self._send_json(HTTPStatus.OK, {"ok": True})

    def post_unsubscribe_function(self):
        body = self._read_json()
        self.broker.unsubscribe_function(_field(body, "subscriberId"), _field(body, "functionType"))
        self._send_json(HTTPStatus.OK, {"ok": True})

    def _publish_response(self, receipt):
        if not receipt.accepted:
            self._send_json(HTTPStatus.TOO_MANY_REQUESTS,
                            {"error": ThrottledError.code, "detail": _receipt_body(receipt)})
        else:
            self._send_json(HTTPStatus.ACCEPTED, _receipt_body(receipt))

    def post_publish_topic(self):
        body = self._read_json()
        self._publish_response(self.broker.publish_topic(_field(body, "data"), _field(body, "topics", list)))

    def post_publish_content(self):
        body = self._read_json()
        self._publish_response(
            self.broker.publish_content(_field(body, "data"), _field(body, "properties", list)))

    def post_publish_function(self):
        body = self._read_json()
        self._publish_response(
            self.broker.publish_function(_field(body, "data"), _field(body, "functionType")))

    def get_stream(self, subscriber):
        conn = self.broker.gateway.connect(subscriber)
        self.server.track(conn)
        try:
            self.send_response(HTTPStatus.OK)
            self.send_header("Content-Type", "application/x-ndjson")
            self.send_header("Cache-Control", "no-cache")
            self.end_headers()
            self.wfile.flush()
            while True:
                line = conn.read(timeout=0.25)
                if line is None:
                    if conn.closed or self._peer_gone():
                        break
                    continue
                self.wfile.write(line)
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError):
            pass
        finally:
            self.broker.gateway.disconnect(conn)
            self.server.untrack(conn)
            self.close_connection = True

    def _peer_gone(self) -> bool:
        sock = self.connection
        try:
            readable, _, _ = select.select([sock], [], [], 0)
            if not readable:
                return False
            return sock.recv(1, socket.MSG_PEEK) == b""
        except OSError:
            return True


class ApiServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, broker: Broker):
        handler = type("BoundHandler", (_Handler,), {"broker": broker})
        self.broker = broker
        self._streams = set()
        self._streams_lock = threading.Lock()
        self._thread: Optional[threading.Thread] = None
        super().__init__(address, handler)

    def track(self, conn) -> None:
        with self._streams_lock:
            self._streams.add(conn)

    def untrack(self, conn) -> None:
        with self._streams_lock:
            self._streams.discard(conn)

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ApiServer":
        self._thread = threading.Thread(target=self.serve_forever, name="broker-api", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        with self._streams_lock:
            streams = list(self._streams)
        for conn in streams:
            conn.close()
        self.shutdown()
        self.server_close()


def serve_api(broker: Broker, host: str = "127.0.0.1", port: int = 0) -> ApiServer:
    """Bind and start serving in a background thread; port 0 picks a free port."""
    try:
        server = ApiServer((host, port), broker)
    except OSError as exc:
        raise BindError(f"cannot bind {host}:{port}: {exc}") from exc
    return server.start()
