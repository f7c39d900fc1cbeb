"""Ordinary least squares with classical inference, and the regression designs of the analysis."""
from __future__ import annotations

import csv
import io
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .engine import RunArtifact
from .netanalysis import METRIC_NAMES, NodeMetrics, build_graph, compute_metrics

STAR_LEVELS = ((0.001, "***"), (0.05, "**"), (0.1, "*"))
SIGN_ALPHA = 0.05
MIN_ORG_RUNS = 6

ORG_PREDICTORS = (
    "Management competence mean",
    "Functional competence mean",
    "Management competence std",
    "Functional competence std",
)
ORG_OUTCOMES = ("Average stress", "Work completion level", "Average circle number")
INDIVIDUAL_PREDICTORS = {
    "a": ("Management competence", "Functional competence"),
    "b": ("Competence mean", "Competence difference"),
}
INDIVIDUAL_OUTCOMES = ("Stress", "Work completion level", "Average circle number", "Average workload")
NETWORK_OUTCOMES = {
    "closeness": "Closeness centrality",
    "betweenness": "Betweenness centrality",
    "eigenvector": "Eigenvector centrality",
    "clustering": "Clustering",
    "authority": "Authority score",
    "hub": "Hub score",
    "pagerank": "Pagerank",
}


class RankDeficient(ValueError):
    pass


class TooFewRows(ValueError):
    pass


@dataclass
class Design:
    """Outcome ``y`` and predictors ``X``; the intercept column is prepended on construction."""

    outcome: str
    y: np.ndarray
    X: np.ndarray
    names: list[str]
    row_ids: list[str] = field(default_factory=list)

    @classmethod
    def from_columns(
        cls, outcome: str, y: Sequence[float], columns: Mapping[str, Sequence[float]], row_ids: Sequence[str] = ()
    ) -> Design:
        y = np.asarray(y, dtype=float)
        names = ["Intercept", *columns]
        cols = [np.ones(len(y))] + [np.asarray(v, dtype=float) for v in columns.values()]
        return cls(outcome, y, np.column_stack(cols), names, list(row_ids))

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.X.shape[1]


def stars(p: float) -> str:
    for level, mark in STAR_LEVELS:
        if p < level:
            return mark
    return ""


@dataclass
class FitResult:
    outcome: str
    names: list[str]
    coef: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    residuals: np.ndarray
    r2: float
    n: int
    df_resid: int

    @property
    def stars(self) -> list[str]:
        return [stars(p) for p in self.p]

    def row(self, name: str) -> dict[str, float | str]:
        i = self.names.index(name)
        return {"coef": float(self.coef[i]), "se": float(self.se[i]), "t": float(self.t[i]), "p": float(self.p[i]), "stars": stars(self.p[i])}

    def sign(self, name: str, alpha: float = SIGN_ALPHA) -> str:
        r = self.row(name)
        if not r["p"] < alpha:
            return "ns"
        return "+" if r["coef"] > 0 else "-"


def ols_fit(design: Design) -> FitResult:
    """Least squares through a Householder QR factorization of X.

    With an intercept the slopes are solved on centered columns and the
    intercept recovered from the means, which keeps exact-fit designs exact;
    one step of iterative refinement then removes most remaining rounding.
    Standard errors use sigma^2 (X'X)^-1 = sigma^2 R^-1 R^-T; p-values are
    two-sided from Student's t with n - p degrees of freedom.
    """
    X, y = design.X, design.y
    n, p = X.shape
    if y.shape != (n,):
        raise ValueError("outcome and predictor rows differ")
    if n <= p:
        raise TooFewRows(f"{design.outcome}: need more than {p} rows, got {n}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError(f"{design.outcome}: design holds non-finite values")
    q, r = np.linalg.qr(X, mode="reduced")
    diag = np.abs(np.diag(r))
    scale = np.max(np.linalg.norm(X, axis=0))
    if scale == 0 or np.min(diag) <= max(n, p) * np.finfo(float).eps * scale * 1e3:
        raise RankDeficient(f"{design.outcome}: predictors are collinear (columns {design.names})")
    coef = _solve(X, y)
    resid = y - X @ coef
    df = n - p
    ssr = float(resid @ resid)
    sigma2 = ssr / df
    r_inv = np.linalg.solve(r, np.eye(p))
    se = np.sqrt(sigma2 * np.sum(r_inv * r_inv, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, coef / se, np.where(coef == 0, 0.0, np.sign(coef) * np.inf))
    pvals = 2 * sps.t.sf(np.abs(t), df)
    centered = y - y.mean()
    sst = float(centered @ centered)
    r2 = 0.0 if sst == 0 else min(1.0, max(0.0, 1.0 - ssr / sst))
    return FitResult(design.outcome, list(design.names), coef, se, t, pvals, resid, r2, n, df)


def _refined_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(A, mode="reduced")
    x = np.linalg.solve(r, q.T @ b)
    return x + np.linalg.solve(r, q.T @ (b - A @ x))


def _solve(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    if X.shape[1] > 1 and np.all(X[:, 0] == 1.0):
        means = X[:, 1:].mean(axis=0)
        slopes = _refined_solve(X[:, 1:] - means, y - y.mean())
        return np.concatenate([[y.mean() - means @ slopes], slopes])
    return _refined_solve(X, y)


# designs built from run artifacts


def _complete(artifacts: Sequence[RunArtifact]) -> list[RunArtifact]:
    return [a for a in artifacts if a.status == "complete" and a.snapshots]


def build_org_design(artifacts: Sequence[RunArtifact]) -> dict[str, Design]:
    """One row per organization: final-week outcomes on realized competence moments.

    Average stress and work completion level are member means of final-week
    stress and evaluation; average circle number is the member mean of
    final-week circle memberships. Std is the sample std (ddof=1).
    """
    runs = _complete(artifacts)
    if len(runs) < MIN_ORG_RUNS:
        raise TooFewRows(f"organization-level design needs at least {MIN_ORG_RUNS} complete runs, got {len(runs)}")
    preds: dict[str, list[float]] = {k: [] for k in ORG_PREDICTORS}
    outs: dict[str, list[float]] = {k: [] for k in ORG_OUTCOMES}
    ids = []
    for a in runs:
        mgmt = np.array([p.management_competence for p in a.profiles])
        func = np.array([p.functional_competence for p in a.profiles])
        ddof = 1 if len(mgmt) > 1 else 0
        for name, value in zip(ORG_PREDICTORS, (mgmt.mean(), func.mean(), mgmt.std(ddof=ddof), func.std(ddof=ddof))):
            preds[name].append(float(value))
        last = a.snapshots[-1]
        outs["Average stress"].append(math.fsum(last["stress"].values()) / len(last["stress"]))
        outs["Work completion level"].append(math.fsum(last["evaluation"].values()) / len(last["evaluation"]))
        outs["Average circle number"].append(math.fsum(last["circles"].values()) / len(last["circles"]))
        ids.append(f"seed{a.config.seed}")
    return {k: Design.from_columns(k, outs[k], preds, ids) for k in ORG_OUTCOMES}


def individual_outcomes(artifact: RunArtifact) -> dict[str, dict[str, float]]:
    """Per-member outcomes of one run.

    Stress and work completion level are final-week stress and evaluation;
    average circle number and average workload are means over the weeks.
    """
    snaps = artifact.snapshots
    last = snaps[-1]
    out = {}
    for p in artifact.profiles:
        m = p.member_id
        out[m] = {
            "Stress": float(last["stress"][m]),
            "Work completion level": float(last["evaluation"][m]),
            "Average circle number": math.fsum(s["circles"][m] for s in snaps) / len(snaps),
            "Average workload": math.fsum(s["workload"][m] for s in snaps) / len(snaps),
        }
    return out


def run_network(artifact: RunArtifact) -> dict[str, NodeMetrics]:
    return compute_metrics(build_graph(artifact.events))


def build_individual_design(
    artifacts: Sequence[RunArtifact],
    include_network: bool = False,
    variant: str = "a",
    network: Sequence[Mapping[str, NodeMetrics]] | None = None,
) -> dict[str, Design]:
    """One row per member pooled over runs.

    Variant ``a`` regresses on both competences, variant ``b`` on their mean
    and absolute difference. With ``include_network`` the seven network
    metrics join as extra outcomes, by member id, from ``network`` (aligned
    with ``artifacts``) or computed from each run's log.
    """
    if variant not in INDIVIDUAL_PREDICTORS:
        raise ValueError(f"unknown predictor variant {variant!r}")
    pairs = [(i, a) for i, a in enumerate(artifacts) if a.status == "complete" and a.snapshots]
    outcome_names = list(INDIVIDUAL_OUTCOMES) + ([NETWORK_OUTCOMES[k] for k in METRIC_NAMES] if include_network else [])
    preds: dict[str, list[float]] = {k: [] for k in INDIVIDUAL_PREDICTORS[variant]}
    outs: dict[str, list[float]] = {k: [] for k in outcome_names}
    ids: list[str] = []
    for i, a in pairs:
        per_member = individual_outcomes(a)
        metrics = None
        if include_network:
            metrics = network[i] if network is not None else run_network(a)
        for prof in a.profiles:
            m = prof.member_id
            if variant == "a":
                x = (prof.management_competence, prof.functional_competence)
            else:
                x = (prof.competence_mean, prof.competence_difference)
            for name, value in zip(INDIVIDUAL_PREDICTORS[variant], x):
                preds[name].append(value)
            for name, value in per_member[m].items():
                outs[name].append(value)
            if metrics is not None:
                if m not in metrics:
                    raise KeyError(f"network metrics for run {i} lack member {m}")
                for key in METRIC_NAMES:
                    outs[NETWORK_OUTCOMES[key]].append(getattr(metrics[m], key))
            ids.append(f"run{i}:{m}")
    if len(ids) < len(INDIVIDUAL_PREDICTORS[variant]) + 3:
        raise TooFewRows(f"individual-level design needs at least {len(INDIVIDUAL_PREDICTORS[variant]) + 3} members, got {len(ids)}")
    return {k: Design.from_columns(k, outs[k], preds, ids) for k in outcome_names}


# tables


@dataclass
class RegressionTable:
    """Fits sharing predictors, laid out with outcomes as columns."""

    title: str
    fits: list[FitResult]
    error: str | None = None

    @property
    def terms(self) -> list[str]:
        return self.fits[0].names[1:] if self.fits else []

    def cells(self) -> list[list[str]]:
        header = [""] + [f.outcome for f in self.fits]
        rows = [header]
        for term in self.terms:
            rows.append([term] + [f"{f.row(term)['coef']:.3f}{f.row(term)['stars']}" for f in self.fits])
        rows.append(["N"] + [str(f.n) for f in self.fits])
        rows.append(["R2"] + [f"{f.r2:.3f}" for f in self.fits])
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if self.error:
            writer.writerow(["insufficient", self.error])
        else:
            writer.writerows(self.cells())
        return buf.getvalue()

    def to_text(self) -> str:
        if self.error:
            return f"{self.title}\n  insufficient data: {self.error}\n"
        rows = self.cells()
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        lines = [self.title, "-" * (sum(widths) + 2 * (len(widths) - 1))]
        for k, r in enumerate(rows):
            first = r[0].ljust(widths[0])
            rest = [cell.rjust(w) for cell, w in zip(r[1:], widths[1:])]
            lines.append("  ".join([first, *rest]))
            if k == 0:
                lines.append(lines[1])
        lines.append(lines[1])
        lines.append("Note: *p<0.1, **p<0.05, ***p<0.001. Plain OLS standard errors; pooled rows are not clustered by run.")
        return "\n".join(lines) + "\n"

    def long_rows(self) -> list[dict[str, float | str]]:
        out = []
        for f in self.fits:
            for name in f.names:
                out.append({"table": self.title, "outcome": f.outcome, "term": name, **f.row(name), "n": f.n, "r2": f.r2})
        return out

    def signs(self, alpha: float = SIGN_ALPHA) -> list[dict[str, str]]:
        return [
            {"table": self.title, "outcome": f.outcome, "term": term, "sign": f.sign(term, alpha)}
            for f in self.fits
            for term in self.terms
        ]


def fit_table(title: str, designs: Mapping[str, Design]) -> RegressionTable:
    return RegressionTable(title, [ols_fit(designs[k]) for k in designs])


def render_sign_summary(tables: Sequence[RegressionTable], alpha: float = SIGN_ALPHA) -> str:
    lines = [f"Sign summary (+ / - significant at p<{alpha}, ns otherwise)"]
    for table in tables:
        lines.append(f"{table.title}:")
        if table.error:
            lines.append(f"  insufficient data: {table.error}")
            continue
        for s in table.signs(alpha):
            lines.append(f"  {s['outcome']} ~ {s['term']}: {s['sign']}")
    return "\n".join(lines) + "\n"
