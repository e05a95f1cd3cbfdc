"""Packet-level simulator of a QUIC-like transport with per-packet dynamic reliability."""

from .experiment import load_config, parse_config, run_sweep, summarize
from .scenario import RunResult, ScenarioConfig, run_scenario

__version__ = "0.1.0"

__all__ = ["ScenarioConfig", "RunResult", "run_scenario", "load_config", "parse_config", "run_sweep",
           "summarize", "__version__"]
