"""Crossfire link-flooding simulation and neural-network detection for SDN-based ITS."""

from .config import ConfigError, ScenarioConfig
from .detectors import AlphaBuffer, DetectorModel, NetworkState, build_detector, detect_stream, load_model, save_model
from .simulation import TrafficSample, read_dataset, run_scenario, write_dataset
from .topology import build_topology, route_flow

__all__ = [
    "AlphaBuffer", "ConfigError", "DetectorModel", "NetworkState", "ScenarioConfig", "TrafficSample",
    "build_detector", "build_topology", "detect_stream", "load_model", "read_dataset", "route_flow",
    "run_scenario", "save_model", "write_dataset",
]
__version__ = "0.1.0"
