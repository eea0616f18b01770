"""Simulator for decentralized federated graph learning with adaptive topology and sampling-ratio control."""

from .config import SimConfig, load_config
from .errors import ConfigurationError, ProtocolError, SimError
from .orchestrator import RunResult, evaluate, run

__all__ = [
    "SimConfig",
    "load_config",
    "run",
    "evaluate",
    "RunResult",
    "SimError",
    "ConfigurationError",
    "ProtocolError",
]
__version__ = "0.1.0"
