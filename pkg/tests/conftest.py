import sys
import queue

import pytest

from faasbroker.broker import Broker, PipelineConfig
from faasbroker.clock import ManualClock
from faasbroker.gateway import DeliveryGateway, decode_frame
from faasbroker.runtime import FaasRuntime, RuntimeLimits
from faasbroker.store import DocumentStore, LookupBudget


class Harness:
    """A broker on a manual clock, with every subscriber feeding one sink."""

    def __init__(self, config=None, limits=None, budget=None):
        self.clock = ManualClock()
        self.runtime = FaasRuntime(limits or RuntimeLimits(), clock=self.clock, seed=7)
        self.store = DocumentStore(budget or LookupBudget(capacity=None), clock=self.clock)
        self.gateway = DeliveryGateway(clock=self.clock)
        self.broker = Broker(self.runtime, self.store, self.gateway, config or PipelineConfig(), clock=self.clock)
        self.sink = queue.Queue()

    def subscriber(self):
        sid = self.broker.register_client()
        self.gateway.connect(sid, sink=self.sink)
        return sid

    def drain(self):
        frames = []
        while True:
            try:
                sid, line = self.sink.get_nowait()
            except queue.Empty:
                return frames
            frame = decode_frame(line)
            assert frame["subscriberId"] == sid
            frames.append(frame)

    def publish(self, kind, *args):
        receipt = getattr(self.broker, "publish_" + kind)(*args)
        assert receipt.wait(10)
        return receipt, self.drain()

    def close(self):
        self.broker.close()


@pytest.fixture
def harness():
    h = Harness()
    yield h
    h.close()


@pytest.fixture
def make_harness():
    made = []

    def make(**kwargs):
        h = Harness(**kwargs)
        made.append(h)
        return h

    yield make
    for h in made:
        h.close()


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
