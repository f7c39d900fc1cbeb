"""Report bundle: regression tables, per-run network exports and a sign summary."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..netanalysis import NodeMetrics, build_graph, compute_metrics, export_graph, modularity
from ..stats import (
    INDIVIDUAL_OUTCOMES,
    ORG_OUTCOMES,
    RankDeficient,
    RegressionTable,
    TooFewRows,
    build_individual_design,
    build_org_design,
    fit_table,
    render_sign_summary,
)
from .grid import load_artifacts

log = logging.getLogger(__name__)

MIN_POOLED_RUNS = 2
TABLE_TITLES = (
    "Table 1. Organization level, final week",
    "Table 2. Individual level, final week",
    "Table 3. Individual level, competence mean and difference",
    "Table 4. Social network, individual level",
    "Table 5. Social network, competence mean and difference",
)


@dataclass
class ReportBundle:
    out: Path
    tables: list[RegressionTable]
    graph_dirs: list[Path]
    skipped: list[str] = field(default_factory=list)

    @property
    def table_files(self) -> list[Path]:
        return sorted((self.out / "tables").glob("table*.csv"))


def _guarded(title: str, build) -> RegressionTable:
    try:
        return fit_table(title, build())
    except (TooFewRows, RankDeficient) as exc:
        log.warning("%s: %s", title, exc)
        return RegressionTable(title, [], error=f"{type(exc).__name__}: {exc}")


def analyze(manifest_path: str | Path, out: str | Path) -> ReportBundle:
    """Build every table and export from the runs a manifest lists.

    A table that cannot be fitted (too few runs, degenerate predictors) is
    written as insufficient; the rest of the bundle is still produced.
    """
    out = Path(out)
    entries, artifacts, skipped = load_artifacts(manifest_path)
    if not artifacts:
        raise ValueError(f"{manifest_path} lists no complete runs")
    (out / "tables").mkdir(parents=True, exist_ok=True)

    network: list[dict[str, NodeMetrics]] = []
    graph_dirs = []
    for entry, artifact in zip(entries, artifacts):
        g = build_graph(artifact.events)
        metrics = compute_metrics(g)
        network.append(metrics)
        d = out / "graphs" / entry["run_id"]
        export_graph(g, metrics, d, stem=entry["run_id"])
        labels = {n: m.community for n, m in metrics.items()}
        summary = {"modularity": modularity(g, labels), "communities": len(set(labels.values()))}
        (d / "modularity.json").write_text(json.dumps(summary) + "\n", encoding="utf-8")
        graph_dirs.append(d)

    def pooled(variant: str, include_network: bool):
        def build():
            if len(artifacts) < MIN_POOLED_RUNS:
                raise TooFewRows(f"pooling needs at least {MIN_POOLED_RUNS} complete runs, got {len(artifacts)}")
            designs = build_individual_design(artifacts, include_network, variant, network)
            if include_network:
                return {k: v for k, v in designs.items() if k not in INDIVIDUAL_OUTCOMES}
            return designs

        return build

    tables = [
        _guarded(TABLE_TITLES[0], lambda: build_org_design(artifacts)),
        _guarded(TABLE_TITLES[1], pooled("a", False)),
        _guarded(TABLE_TITLES[2], pooled("b", False)),
        _guarded(TABLE_TITLES[3], pooled("a", True)),
        _guarded(TABLE_TITLES[4], pooled("b", True)),
    ]
    long_rows = []
    for k, table in enumerate(tables, start=1):
        (out / "tables" / f"table{k}.csv").write_text(table.to_csv(), encoding="utf-8")
        (out / "tables" / f"table{k}.txt").write_text(table.to_text(), encoding="utf-8")
        long_rows.extend(table.long_rows())
    with (out / "tables" / "coefficients.csv").open("w", newline="", encoding="utf-8") as fh:
        cols = ["table", "outcome", "term", "coef", "se", "t", "p", "stars", "n", "r2"]
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        writer.writerows(long_rows)
    summary = render_sign_summary(tables)
    (out / "signs.txt").write_text(summary, encoding="utf-8")
    report = [t.to_text() for t in tables] + [summary, _org_completion_note(tables[0])]
    if skipped:
        report.append("Runs skipped:\n" + "\n".join(f"  {s}" for s in skipped) + "\n")
    (out / "report.txt").write_text("\n".join(report), encoding="utf-8")
    return ReportBundle(out, tables, graph_dirs, skipped)


def _org_completion_note(table: RegressionTable) -> str:
    if table.error:
        return "Organization-level completion: not estimated.\n"
    fit = next(f for f in table.fits if f.outcome == ORG_OUTCOMES[1])
    parts = []
    for term in fit.names[1:3]:
        r = fit.row(term)
        p = "nan" if math.isnan(r["p"]) else f"{r['p']:.3g}"
        parts.append(f"{term}: {r['coef']:+.4f} (p={p})")
    return "Organization-level completion (descriptive): " + "; ".join(parts) + "\n"


def bundle_summary(bundle: ReportBundle) -> dict[str, Any]:
    return {
        "out": str(bundle.out),
        "tables": [{"title": t.title, "status": "insufficient" if t.error else "ok"} for t in bundle.tables],
        "graphs": len(bundle.graph_dirs),
        "skipped": bundle.skipped,
    }
