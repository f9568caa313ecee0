import sys
import threading
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from forge.clock import FakeClock
from forge.engine import Forge
from forge.nn import clear_lambdas
from forge.wire import ForgeClient, ForgeServer


@pytest.fixture(autouse=True)
def _clean_registries():
    from forge import faults
    from forge.handlers import clear_user_fns

    yield
    faults.disarm_all()
    clear_lambdas()
    clear_user_fns()


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def engine(tmp_path, clock):
    eng = Forge(tmp_path / "store", create=True, clock=clock, fsync=False)
    yield eng
    eng.close()


@pytest.fixture
def wire_pair(engine):
    server = ForgeServer(engine, port=0)
    server.start()
    client = ForgeClient(*server.address)
    yield engine, server, client
    client.close()
    server.stop()


@pytest.fixture(params=["local", "wire"])
def api(request, engine):
    """The same operation surface over both transports (criterion: transport
    transparency)."""
    if request.param == "local":
        yield engine
        return
    server = ForgeServer(engine, port=0)
    server.start()
    client = ForgeClient(*server.address)
    yield client
    client.close()
    server.stop()


def make_engine(path, clock=None):
    return Forge(path, create=True, clock=clock or FakeClock(), fsync=False)


class AgentHarness:
    """Threads running agents/master against an api, with clean shutdown."""

    def __init__(self):
        self.stop = threading.Event()
        self.threads: list[threading.Thread] = []
        self.errors: list[BaseException] = []

    def spawn(self, target, *args, **kwargs):
        def wrapped():
            try:
                target(*args, stop=self.stop, **kwargs)
            except BaseException as exc:  # noqa: BLE001 - collected for asserts
                self.errors.append(exc)

        thread = threading.Thread(target=wrapped, daemon=True)
        thread.start()
        self.threads.append(thread)
        return thread

    def shutdown(self, timeout=5.0):
        self.stop.set()
        for thread in self.threads:
            thread.join(timeout)


@pytest.fixture
def harness():
    h = AgentHarness()
    yield h
    h.shutdown()
