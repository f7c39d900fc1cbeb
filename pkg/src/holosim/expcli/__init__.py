"""Experiment configuration, grid execution, analysis and the command line."""
from __future__ import annotations

from .analyze import ReportBundle, analyze
from .cli import main
from .config import ExperimentConfig, GridSettings, dump_config, load_config, write_default_config
from .grid import GridCell, GridSpec, cell_seed, load_manifest, run_grid

__all__ = [
    "ExperimentConfig",
    "GridCell",
    "GridSettings",
    "GridSpec",
    "ReportBundle",
    "analyze",
    "cell_seed",
    "dump_config",
    "load_config",
    "load_manifest",
    "main",
    "run_grid",
    "write_default_config",
]
