"""Experiment grid: cell enumeration, seeded per-cell configs, resumable parallel execution."""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..brains import make_brain
from ..brains.llm import LlmEndpointConfig
from ..domain import SimConfig, canonical_json
from ..engine import RunArtifact, atomic_write, run_simulation
from .config import AXES, ExperimentConfig

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
ARTIFACT_FILES = ("config.json", "events.jsonl", "snapshots.json")
SHORT = {"mgmt_mean_level": "mm", "func_mean_level": "fm", "mgmt_std_level": "ms", "func_std_level": "fs"}


def cell_seed(base_seed: int, coords: dict[str, str], repetition: int = 0) -> int:
    """Seed of a cell: base seed plus a stable hash of its coordinates, mod 2^64."""
    key = canonical_json({"coords": coords, "repetition": repetition}).encode("utf-8")
    offset = int.from_bytes(hashlib.sha256(key).digest()[:8], "big")
    return (base_seed + offset) % 2**64


@dataclass(frozen=True)
class GridCell:
    cell_id: str
    coords: dict[str, str]
    repetition: int
    seed: int
    config: SimConfig


@dataclass(frozen=True)
class GridSpec:
    base: SimConfig = field(default_factory=SimConfig)
    axes: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(AXES))
    base_seed: int = 42
    repetitions: int = 1

    @classmethod
    def from_experiment(cls, exp: ExperimentConfig) -> GridSpec:
        return cls(exp.sim, dict(exp.grid.axes), exp.grid.base_seed, exp.grid.repetitions)

    def cells(self) -> list[GridCell]:
        names = [k for k in AXES if k in self.axes]
        out = []
        for levels in itertools.product(*(self.axes[k] for k in names)):
            coords = dict(zip(names, levels))
            stem = "_".join(f"{SHORT[k]}-{v}" for k, v in coords.items())
            for rep in range(self.repetitions):
                seed = cell_seed(self.base_seed, coords, rep)
                cell_id = stem if self.repetitions == 1 else f"{stem}_r{rep}"
                out.append(GridCell(cell_id, coords, rep, seed, self.base.replace(seed=seed, **coords)))
        seeds = [c.seed for c in out]
        if len(set(seeds)) != len(seeds):
            raise RuntimeError("grid cell seeds collide")
        return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def entry_is_complete(out: Path, entry: dict[str, Any]) -> bool:
    if entry.get("status") != "complete":
        return False
    path = out / entry["path"]
    for name in ARTIFACT_FILES:
        f = path / name
        if not f.is_file() or _sha256(f) != entry.get("digests", {}).get(name):
            return False
    return True


def load_manifest(path: str | Path) -> dict[str, Any]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("version") != MANIFEST_VERSION or not isinstance(data.get("runs"), list):
        raise ValueError(f"{path} is not a holosim manifest")
    return data


def write_manifest(out: Path, grid: GridSpec, entries: dict[str, dict[str, Any]], order: list[str]) -> Path:
    doc = {
        "version": MANIFEST_VERSION,
        "grid": {
            "base_seed": grid.base_seed,
            "repetitions": grid.repetitions,
            "axes": {k: list(v) for k, v in grid.axes.items()},
            "base_config": grid.base.to_dict(),
        },
        "n": len([c for c in order if c in entries]),
        "runs": [entries[c] for c in order if c in entries],
    }
    path = out / MANIFEST_NAME
    atomic_write(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return path


def run_cell(cell: GridCell, out: str, llm: LlmEndpointConfig | None = None) -> dict[str, Any]:
    """Execute one cell and write its artifact; never raises."""
    entry: dict[str, Any] = {
        "run_id": cell.cell_id,
        "cell_id": cell.cell_id,
        "coords": cell.coords,
        "repetition": cell.repetition,
        "seed": cell.seed,
        "path": cell.cell_id,
    }
    started = time.perf_counter()
    try:
        artifact = run_simulation(cell.config, make_brain(cell.config, llm))
        entry["digests"] = artifact.write(Path(out) / cell.cell_id)
        entry["status"] = artifact.status
        entry["error"] = artifact.error
    except Exception as exc:  # a broken cell must not take the grid down
        entry.update(status="failed", digests={}, error={"kind": type(exc).__name__, "message": str(exc)})
    entry["seconds"] = round(time.perf_counter() - started, 3)
    return entry


def run_grid(
    grid: GridSpec,
    out: str | Path,
    parallelism: int = 1,
    llm: LlmEndpointConfig | None = None,
) -> dict[str, Any]:
    """Run every cell not already complete in ``out``'s manifest.

    Cells run in separate processes when ``parallelism`` > 1; only this
    process writes the manifest, rewriting it after each finished cell so
    an interrupted grid resumes where it stopped.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cells = grid.cells()
    order = [c.cell_id for c in cells]
    entries: dict[str, dict[str, Any]] = {}
    manifest_path = out / MANIFEST_NAME
    if manifest_path.exists():
        try:
            previous = load_manifest(manifest_path)
        except (ValueError, json.JSONDecodeError):
            log.warning("ignoring unreadable manifest %s", manifest_path)
            previous = {"runs": []}
        wanted = {c.cell_id: c for c in cells}
        for e in previous["runs"]:
            cell = wanted.get(e.get("cell_id"))
            if cell is not None and e.get("seed") == cell.seed and entry_is_complete(out, e):
                entries[cell.cell_id] = e
    todo = [c for c in cells if c.cell_id not in entries]
    log.info("grid: %d cells, %d already complete, %d to run", len(cells), len(entries), len(todo))
    write_manifest(out, grid, entries, order)

    def done(entry: dict[str, Any]) -> None:
        entries[entry["cell_id"]] = entry
        write_manifest(out, grid, entries, order)
        log.info("cell %s: %s (%d/%d)", entry["cell_id"], entry["status"], len(entries), len(cells))

    if parallelism == 1 or len(todo) <= 1:
        for cell in todo:
            done(run_cell(cell, str(out), llm))
    else:
        with ProcessPoolExecutor(max_workers=min(parallelism, len(todo))) as pool:
            futures = [pool.submit(run_cell, cell, str(out), llm) for cell in todo]
            for fut in as_completed(futures):
                done(fut.result())
    return load_manifest(manifest_path)


def load_artifacts(manifest_path: str | Path) -> tuple[list[dict[str, Any]], list[RunArtifact], list[str]]:
    """Complete runs listed in a manifest whose files still match their digests.

    Returns the manifest entries, the loaded artifacts (aligned) and a list
    of problems for runs that were skipped.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    manifest = load_manifest(manifest_path)
    entries, artifacts, problems = [], [], []
    for e in manifest["runs"]:
        if e.get("status") != "complete":
            problems.append(f"{e.get('run_id')}: status {e.get('status')}")
            continue
        if not entry_is_complete(base, e):
            problems.append(f"{e.get('run_id')}: files missing or digest mismatch")
            continue
        entries.append(e)
        artifacts.append(RunArtifact.load(base / e["path"]))
    return entries, artifacts, problems
