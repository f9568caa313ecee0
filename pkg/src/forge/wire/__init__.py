from forge.wire.client import ForgeClient, default_address
from forge.wire.server import DEFAULT_PORT, ForgeServer

__all__ = ["DEFAULT_PORT", "ForgeClient", "ForgeServer", "default_address"]
