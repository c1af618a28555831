import pytest

from priorserve import PriorServer, ServerConfig


@pytest.fixture
def run_server():
    """Start servers on ephemeral ports; stop them all on teardown."""
    servers = []

    def _start(**kwargs) -> PriorServer:
        server = PriorServer(ServerConfig(**kwargs)).start()
        servers.append(server)
        return server

    yield _start
    for server in servers:
        server.stop()
