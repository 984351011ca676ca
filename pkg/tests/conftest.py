from __future__ import annotations

import sys

import pytest

from ros2store.engine import Engine, EngineClient, EngineConfig
from ros2store.tenancy import TenantRegistry

# short GIL slices keep the loopback request/response ping-pong snappy on one CPU
sys.setswitchinterval(0.0005)

PROVIDERS = ("stream", "rdmasim")


class EngineHarness:
    def __init__(self, tmp_path, **cfg):
        self.tmp_path = tmp_path
        self.registry = TenantRegistry()
        self.alice = self.registry.create_tenant("alice")
        self.bob = self.registry.create_tenant("bob")
        self.config = EngineConfig(nvme_path=str(tmp_path / "pool.img"), **cfg)
        self.engine = Engine(self.config, self.registry, **self._engine_kw).start()
        self.clients: list[EngineClient] = []

    _engine_kw: dict = {}

    def client(self, tenant=None, provider: str = "stream", **kw) -> EngineClient:
        t = tenant or self.alice
        c = EngineClient(self.engine.ctrl_address, self.engine.data_address, t.tenant_id, t.secret,
                         provider, **kw).connect()
        self.clients.append(c)
        return c

    def engine_kwargs(self, provider: str = "stream", tenant=None) -> dict:
        t = tenant or self.alice
        return dict(ctrl_addr=self.engine.ctrl_address, data_addr=self.engine.data_address,
                    tenant_id=t.tenant_id, secret=t.secret, provider=provider)

    def close(self) -> None:
        for c in self.clients:
            c.close()
        self.engine.stop()


@pytest.fixture
def harness(tmp_path):
    h = EngineHarness(tmp_path)
    yield h
    h.close()


@pytest.fixture(params=PROVIDERS)
def provider(request):
    return request.param


MODES = ("inline", "offload")
COMBOS = [(p, m) for p in PROVIDERS for m in MODES]


class ClientFactory:
    """Builds mounted inline/offload file clients against one harness engine."""

    def __init__(self, harness):
        self.harness = harness
        self.proxies = {}
        self.clients = []

    def proxy(self, provider, tenant=None, **kw):
        from ros2store.proxy import ProxyConfig, ProxyServer
        key = (provider, (tenant or self.harness.alice).name)
        if key not in self.proxies:
            e, t = self.harness.engine, tenant or self.harness.alice
            cfg = ProxyConfig(e.ctrl_address, e.data_address, t.tenant_id, t.secret, provider, **kw)
            self.proxies[key] = ProxyServer(cfg).start()
        return self.proxies[key]

    def __call__(self, provider, mode, container="dfs", tenant=None):
        from ros2store.proxy import mode_select
        if mode == "inline":
            make = mode_select("inline", engine=self.harness.engine_kwargs(provider, tenant), container=container)
        else:
            make = mode_select("offload", proxy_addr=self.proxy(provider, tenant).address, container=container)
        c = make()
        self.clients.append(c)
        return c

    def close(self):
        for c in self.clients:
            try:
                c.shutdown()
            except Exception:  # noqa: BLE001 - best-effort teardown
                pass
        for p in self.proxies.values():
            p.stop()


@pytest.fixture
def file_clients(harness):
    f = ClientFactory(harness)
    yield f
    f.close()
