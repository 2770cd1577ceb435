import http.client
import json
import socket
import time
import urllib.parse

import pytest

from faasbroker.api import BindError, serve_api
from faasbroker.bench.harness import EVENT_SENTENCE, POPULATION_SOURCE
from faasbroker.broker import Broker
from faasbroker.gateway import WIRE_FIELDS
from faasbroker.store import DocumentStore, LookupBudget


@pytest.fixture
def server():
    broker = Broker(store=DocumentStore(LookupBudget(capacity=None)))
    srv = serve_api(broker, "127.0.0.1", 0)
    yield srv
    srv.stop()
    broker.close()


class Client:
    def __init__(self, url):
        parts = urllib.parse.urlsplit(url)
        self.host, self.port = parts.hostname, parts.port

    def request(self, method, path, body=None):
        conn = http.client.HTTPConnection(self.host, self.port, timeout=5)
        payload = None if body is None else json.dumps(body)
        headers = {} if body is None else {"Content-Type": "application/json"}
        conn.request(method, path, body=payload, headers=headers)
        resp = conn.getresponse()
        data = json.loads(resp.read() or b"null")
        conn.close()
        return resp.status, data

    def get(self, path):
        return self.request("GET", path)

    def post(self, path, body):
        return self.request("POST", path, body)

    def stream(self, sid):
        conn = http.client.HTTPConnection(self.host, self.port, timeout=5)
        conn.request("GET", f"/stream/{sid}")
        resp = conn.getresponse()
        return conn, resp

    def client(self):
        status, body = self.get("/register")
        assert status == 200
        sid = body["subscriberId"]
        assert self.post("/register-device", {"subscriberId": sid}) == (200, {"ok": True})
        return sid


@pytest.fixture
def client(server):
    return Client(server.url)


def test_register(client):
    status, body = client.get("/register")
    assert status == 200 and set(body) == {"subscriberId"}


def test_register_device_twice(client):
    sid = client.client()
    status, body = client.post("/register-device", {"subscriberId": sid})
    assert status == 409 and body["error"] == "already_registered"


def test_topic_stream_end_to_end(client):
    sid = client.client()
    assert client.post("/subscribe/topics", {"subscriberId": sid, "topics": ["a"]})[0] == 200
    conn, resp = client.stream(sid)
    assert resp.status == 200
    status, receipt = client.post("/publish/topic", {"data": "hello", "topics": ["a"]})
    assert status == 202 and receipt["accepted"]
    line = resp.readline()
    frame = json.loads(line)
    assert tuple(frame) == WIRE_FIELDS
    assert (frame["subscriberId"], frame["data"], frame["matchInfo"]) == (sid, "hello", "a")
    conn.close()


def test_function_stream_within_a_second(client):
    sid = client.client()
    body = {"subscriberId": sid, "functionType": "population", "source": POPULATION_SOURCE}
    assert client.post("/subscribe/function", body)[0] == 200
    conn, resp = client.stream(sid)
    t0 = time.monotonic()
    assert client.post("/publish/function", {"data": EVENT_SENTENCE, "functionType": "population"})[0] == 202
    frame = json.loads(resp.readline())
    assert time.monotonic() - t0 < 1.0
    assert frame["data"] == EVENT_SENTENCE and frame["matchInfo"] == "population"
    conn.close()


def test_content_endpoints(client):
    sid = client.client()
    constraints = [{"key": "k1", "op": "=", "value": 5}, {"key": "k2", "op": ">=", "value": 10}]
    assert client.post("/subscribe/content", {"subscriberId": sid, "constraints": constraints})[0] == 200
    conn, resp = client.stream(sid)
    props = [{"key": "k2", "value": 12}, {"key": "k1", "value": 5}]
    assert client.post("/publish/content", {"data": "d", "properties": props})[0] == 202
    frame = json.loads(resp.readline())
    assert frame["matchInfo"] == [{"key": "k1", "value": 5}, {"key": "k2", "value": 12}]
    conn.close()
    assert client.post("/unsubscribe/content", {"subscriberId": sid}) == (200, {"ok": True})


def test_publish_topic_with_empty_topics(client):
    status, body = client.post("/publish/topic", {"data": "d", "topics": []})
    assert status == 400 and set(body) == {"error", "detail"}


def test_subscribe_function_parse_error_carries_position(client):
    sid = client.client()
    status, body = client.post("/subscribe/function",
                               {"subscriberId": sid, "functionType": "T", "source": "publication >"})
    assert status == 400
    assert body["error"] == "parse_error"
    assert body["detail"]["column"] == 14 and body["detail"]["line"] == 1


def test_unknown_subscriber_and_routes(client):
    assert client.post("/subscribe/topics", {"subscriberId": "ghost", "topics": ["a"]})[0] == 404
    assert client.get("/nowhere")[0] == 404
    assert client.get("/receipts/none")[0] == 404
    assert client.get("/stream/ghost")[0] == 404


def test_unsubscribe_absent_function_type(client):
    sid = client.client()
    status, _ = client.post("/unsubscribe/function", {"subscriberId": sid, "functionType": "T"})
    assert status == 404


def test_bad_bodies(client):
    conn = http.client.HTTPConnection(client.host, client.port, timeout=5)
    conn.request("POST", "/publish/topic", body="{not json", headers={"Content-Type": "application/json"})
    resp = conn.getresponse()
    assert resp.status == 400 and json.loads(resp.read())["error"] == "bad_json"
    conn.close()
    assert client.post("/publish/topic", {"data": "d"})[0] == 400
    assert client.post("/publish/topic", {"data": 1, "topics": ["a"]})[0] == 400
    assert client.post("/subscribe/content", {"subscriberId": "x", "constraints": [{"key": "k"}]})[0] in (400, 404)


def test_receipt_endpoint(client):
    sid = client.client()
    client.post("/subscribe/topics", {"subscriberId": sid, "topics": ["a", "b"]})
    _, receipt = client.post("/publish/topic", {"data": "d", "topics": ["a", "b"]})
    deadline = time.monotonic() + 5
    while True:
        status, body = client.get(f"/receipts/{receipt['publicationId']}")
        assert status == 200
        stages = [b["stage"] for b in body["branches"] if b["status"] != "running"]
        if stages.count("topic-deliver") == 2 or time.monotonic() > deadline:
            break
        time.sleep(0.02)
    assert stages.count("topic-match") == 2 and stages.count("topic-deliver") == 2


def test_closed_stream_disconnects_subscriber(client, server):
    sid = client.client()
    sock = socket.create_connection((client.host, client.port), timeout=5)
    sock.sendall(f"GET /stream/{sid} HTTP/1.0\r\n\r\n".encode())
    assert sock.recv(64).startswith(b"HTTP/1.0 200")
    assert server.broker.gateway.device(sid).connection_state.value == "connected"
    sock.close()
    deadline = time.monotonic() + 3
    while server.broker.gateway.device(sid).connection_state.value == "connected":
        assert time.monotonic() < deadline
        time.sleep(0.05)


def test_bind_error(server):
    port = server.server_address[1]
    with pytest.raises(BindError) as info:
        serve_api(server.broker, "127.0.0.1", port)
    assert isinstance(info.value, OSError)
