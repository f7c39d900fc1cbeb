"""Co-participation network built from settled circles, with centrality metrics.

Edges join members who shared a settled task; each shared task adds
``workload / circle_size`` to the pair's weight, so small circles bind
their members more tightly than large ones.
"""
from __future__ import annotations

import csv
import heapq
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .domain import EventKind, EventLogEntry, decode_hours

METRIC_NAMES = ("closeness", "betweenness", "eigenvector", "clustering", "authority", "hub", "pagerank")
PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)
PATH_RTOL = 1e-12


class EmptyLog(ValueError):
    pass


class ConvergenceFailure(RuntimeError):
    def __init__(self, what: str, iterations: int):
        super().__init__(f"{what} did not converge after {iterations} iterations")
        self.iterations = iterations


@dataclass
class SocialGraph:
    nodes: list[str]
    weights: dict[tuple[str, str], float] = field(default_factory=dict)
    built_from: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.nodes = sorted(self.nodes)
        for (a, b), w in self.weights.items():
            if a == b:
                raise ValueError("self-loops are not allowed")
            if a > b:
                raise ValueError("edge keys must be (smaller, larger) ordered")
            if not w > 0:
                raise ValueError("edge weights must be strictly positive")

    @classmethod
    def from_edges(cls, nodes, edges, built_from=None) -> SocialGraph:
        weights: dict[tuple[str, str], float] = {}
        for a, b, w in edges:
            key = (a, b) if a < b else (b, a)
            weights[key] = weights.get(key, 0.0) + float(w)
        return cls(list(nodes), weights, built_from or {})

    def matrix(self) -> np.ndarray:
        idx = {m: i for i, m in enumerate(self.nodes)}
        w = np.zeros((len(self.nodes), len(self.nodes)))
        for (a, b), value in self.weights.items():
            w[idx[a], idx[b]] = w[idx[b], idx[a]] = value
        return w

    def neighbors(self, node: str) -> dict[str, float]:
        out = {}
        for (a, b), w in self.weights.items():
            if a == node:
                out[b] = w
            elif b == node:
                out[a] = w
        return out

    def components(self) -> list[set[str]]:
        adj = {n: set() for n in self.nodes}
        for a, b in self.weights:
            adj[a].add(b)
            adj[b].add(a)
        seen: set[str] = set()
        comps = []
        for n in self.nodes:
            if n in seen:
                continue
            stack, comp = [n], set()
            while stack:
                x = stack.pop()
                if x in comp:
                    continue
                comp.add(x)
                stack.extend(adj[x] - comp)
            seen |= comp
            comps.append(comp)
        return comps


@dataclass
class NodeMetrics:
    closeness: float
    betweenness: float
    eigenvector: float
    clustering: float
    authority: float
    hub: float
    pagerank: float
    community: int = -1

    def to_dict(self) -> dict:
        return asdict(self)


def build_graph(
    events: list[EventLogEntry],
    week_range: tuple[int, int] | None = None,
    weight_rule: str = "per_member",
) -> SocialGraph:
    """Co-participation graph over settled tasks in ``week_range`` (inclusive).

    ``weight_rule`` is ``"per_member"`` (workload / circle size) or
    ``"per_pair"`` (workload / number of pairs in the circle).
    """
    if not events:
        raise EmptyLog("event log is empty")
    nodes = [e.payload["profile"]["member_id"] for e in events if e.kind is EventKind.MEMBER_GENERATED]
    if not nodes:
        raise EmptyLog("event log holds no members")
    lo, hi = week_range if week_range else (0, max(e.week for e in events))
    settled = sorted(
        (e for e in events if e.kind is EventKind.TASK_SETTLED and lo <= e.week <= hi),
        key=lambda e: e.payload["task_id"],
    )
    contributions: dict[tuple[str, str], list[float]] = {}
    for e in settled:
        members = sorted(e.payload["allocation"])
        k = len(members)
        if k < 2:
            continue
        workload = decode_hours(e.payload["workload_hours"])
        if weight_rule == "per_member":
            w = workload / k
        elif weight_rule == "per_pair":
            w = workload / Fraction(k * (k - 1), 2)
        else:
            raise ValueError(f"unknown weight rule {weight_rule!r}")
        for i, a in enumerate(members):
            for b in members[i + 1 :]:
                contributions.setdefault((a, b), []).append(w)
    # exact rational sums keep the graph independent of event order
    weights = {pair: float(sum(ws, Fraction(0))) for pair, ws in sorted(contributions.items())}
    return SocialGraph(nodes, weights, {"week_range": [lo, hi], "weight_rule": weight_rule})


def _dijkstra(adj: list[list[tuple[int, float]]], source: int):
    """Distances, shortest-path counts, predecessor lists and settle order from one source."""
    n = len(adj)
    dist = [math.inf] * n
    sigma = [0.0] * n
    preds: list[list[int]] = [[] for _ in range(n)]
    dist[source] = 0.0
    sigma[source] = 1.0
    order: list[int] = []
    done = [False] * n
    heap = [(0.0, source)]
    while heap:
        d, v = heapq.heappop(heap)
        if done[v]:
            continue
        done[v] = True
        order.append(v)
        for u, length in adj[v]:
            nd = d + length
            if done[u]:
                continue
            if nd < dist[u] and not math.isclose(nd, dist[u], rel_tol=PATH_RTOL):
                dist[u] = nd
                sigma[u] = sigma[v]
                preds[u] = [v]
                heapq.heappush(heap, (nd, u))
            elif math.isclose(nd, dist[u], rel_tol=PATH_RTOL):
                sigma[u] += sigma[v]
                preds[u].append(v)
    return dist, sigma, preds, order


def _adjacency(w: np.ndarray) -> list[list[tuple[int, float]]]:
    n = w.shape[0]
    return [[(j, 1.0 / w[i, j]) for j in range(n) if w[i, j] > 0] for i in range(n)]


def harmonic_closeness(w: np.ndarray) -> np.ndarray:
    n = w.shape[0]
    if n < 2:
        return np.zeros(n)
    adj = _adjacency(w)
    out = np.zeros(n)
    for s in range(n):
        dist, *_ = _dijkstra(adj, s)
        out[s] = math.fsum(1.0 / d for i, d in enumerate(dist) if i != s and math.isfinite(d)) / (n - 1)
    return out


def betweenness(w: np.ndarray) -> np.ndarray:
    """Brandes accumulation on inverse-weight lengths, normalized by (n-1)(n-2)/2."""
    n = w.shape[0]
    cb = np.zeros(n)
    adj = _adjacency(w)
    for s in range(n):
        _, sigma, preds, order = _dijkstra(adj, s)
        delta = [0.0] * n
        for v in reversed(order):
            for p in preds[v]:
                delta[p] += sigma[p] / sigma[v] * (1.0 + delta[v])
            if v != s:
                cb[v] += delta[v]
    # each unordered pair was counted from both endpoints
    cb /= 2.0
    if n > 2:
        cb /= (n - 1) * (n - 2) / 2.0
    return cb


def _power_iteration(matrix: np.ndarray, what: str, tol: float, max_iter: int) -> np.ndarray:
    n = matrix.shape[0]
    x = np.ones(n) / n
    for it in range(1, max_iter + 1):
        y = matrix @ x
        norm = np.abs(y).max()
        if norm == 0:
            return np.zeros(n)
        y = y / norm
        if np.abs(y - x).max() < tol:
            return y
        x = y
    raise ConvergenceFailure(what, max_iter)


def eigenvector_centrality(w: np.ndarray, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Perron vector of the weight matrix, scaled to unit max entry."""
    n = w.shape[0]
    if n == 0 or not w.any():
        return np.zeros(n)
    # the identity shift keeps bipartite graphs from oscillating
    shifted = w / w.max() + np.eye(n)
    return _power_iteration(shifted, "eigenvector centrality", tol, max_iter)


def hits(w: np.ndarray, tol: float = 1e-10, max_iter: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Authority and hub scores (unit max entry).

    Authority is the dominant eigenvector of W'W and hub that of WW', both by
    power iteration from the uniform vector; for symmetric weights the two
    matrices coincide and so do the scores.
    """
    n = w.shape[0]
    if n == 0 or not w.any():
        return np.zeros(n), np.zeros(n)
    scaled = w / w.max()
    authority = _power_iteration(scaled.T @ scaled, "HITS authority", tol, max_iter)
    hub = _power_iteration(scaled @ scaled.T, "HITS hub", tol, max_iter)
    return authority, hub


def pagerank(w: np.ndarray, damping: float = 0.85, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    n = w.shape[0]
    if n == 0:
        return np.zeros(0)
    strength = w.sum(axis=1)
    transition = np.full((n, n), 1.0 / n)
    linked = strength > 0
    transition[linked] = w[linked] / strength[linked, None]
    x = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        y = damping * (x @ transition) + (1.0 - damping) / n
        y /= y.sum()
        if np.abs(y - x).sum() < tol:
            return y
        x = y
    raise ConvergenceFailure("pagerank", max_iter)


def weighted_clustering(w: np.ndarray) -> np.ndarray:
    """Geometric-mean weighted clustering with weights scaled by the global maximum."""
    n = w.shape[0]
    if n == 0 or not w.any():
        return np.zeros(n)
    cube = np.cbrt(w / w.max())
    triangles = np.diag(cube @ cube @ cube)
    degree = (w > 0).sum(axis=1)
    out = np.zeros(n)
    ok = degree > 1
    out[ok] = triangles[ok] / (degree[ok] * (degree[ok] - 1))
    return out


def compute_metrics(g: SocialGraph, tol: float = 1e-10, max_iter: int = 100_000) -> dict[str, NodeMetrics]:
    if not g.nodes:
        raise ValueError("graph has no nodes")
    w = g.matrix()
    close = harmonic_closeness(w)
    betw = betweenness(w)
    eig = eigenvector_centrality(w, tol, max_iter)
    clus = weighted_clustering(w)
    auth, hub = hits(w, tol, max_iter)
    pr = pagerank(w, max_iter=max_iter)
    labels, _ = detect_communities(g)
    return {
        m: NodeMetrics(
            float(close[i]), float(betw[i]), float(eig[i]), float(clus[i]),
            float(auth[i]), float(hub[i]), float(pr[i]), labels[m],
        )
        for i, m in enumerate(g.nodes)
    }


def modularity(g: SocialGraph, labels: dict[str, int]) -> float:
    total = math.fsum(g.weights.values())
    if total == 0:
        return 0.0
    strength = {n: 0.0 for n in g.nodes}
    inside: dict[int, float] = {}
    for (a, b), w in g.weights.items():
        strength[a] += w
        strength[b] += w
        if labels[a] == labels[b]:
            inside[labels[a]] = inside.get(labels[a], 0.0) + w
    comm_strength: dict[int, float] = {}
    for n, s in strength.items():
        comm_strength[labels[n]] = comm_strength.get(labels[n], 0.0) + s
    return math.fsum(inside.get(c, 0.0) / total - (k / (2 * total)) ** 2 for c, k in comm_strength.items())


EXACT_MAX_NODES = 10
GAIN_TOL = 1e-12


def _strengths(g: SocialGraph) -> dict[str, float]:
    strength = {n: 0.0 for n in g.nodes}
    for (a, b), w in g.weights.items():
        strength[a] += w
        strength[b] += w
    return strength


def _exact_partition(g: SocialGraph, nodes: list[str]) -> list[frozenset[str]]:
    """Modularity-optimal partition of ``nodes`` by dynamic programming over subsets.

    The best partition of a node set is its best split into the community
    holding the set's lowest node plus the best partition of the rest.
    Optimal communities are connected, so only connected subsets are scored.
    Cost is O(3^n); equal optima keep the first split found, largest first.
    """
    n = len(nodes)
    total = math.fsum(g.weights.values())
    idx = {m: i for i, m in enumerate(nodes)}
    strength = _strengths(g)
    k = [strength[m] for m in nodes]
    adj = [0] * n
    edges = []
    for (a, b), w in g.weights.items():
        i, j = idx[a], idx[b]
        adj[i] |= 1 << j
        adj[j] |= 1 << i
        edges.append((1 << i | 1 << j, w))
    full = (1 << n) - 1
    score: dict[int, float] = {}
    for mask in range(1, full + 1):
        low = mask & -mask
        seen, frontier = low, low
        while frontier:
            bit = frontier & -frontier
            frontier ^= bit
            grow = adj[bit.bit_length() - 1] & mask & ~seen
            seen |= grow
            frontier |= grow
        if seen != mask:
            continue
        inside = math.fsum(w for pair, w in edges if pair & mask == pair)
        ks = math.fsum(k[i] for i in range(n) if mask >> i & 1)
        score[mask] = inside / total - (ks / (2 * total)) ** 2
    best = [0.0] * (full + 1)
    choice = [0] * (full + 1)
    for mask in range(1, full + 1):
        low = mask & -mask
        top, pick = -math.inf, 0
        sub = mask
        while sub:
            if sub & low and sub in score:
                value = score[sub] + best[mask ^ sub]
                if value > top + GAIN_TOL:
                    top, pick = value, sub
            sub = (sub - 1) & mask
        best[mask], choice[mask] = top, pick
    comms = []
    mask = full
    while mask:
        sub = choice[mask]
        comms.append(frozenset(nodes[i] for i in range(n) if sub >> i & 1))
        mask ^= sub
    return comms


def _greedy_merge(g: SocialGraph, comms: list[frozenset[str]]) -> list[frozenset[str]]:
    """Merge the adjacent pair with the largest gain until none gains; ties to the smallest id pair."""
    total = math.fsum(g.weights.values())
    strength = _strengths(g)
    comms = list(comms)
    while True:
        owner = {n: i for i, c in enumerate(comms) for n in c}
        between: dict[tuple[int, int], float] = {}
        for (a, b), w in g.weights.items():
            ca, cb = owner[a], owner[b]
            if ca != cb:
                key = (min(ca, cb), max(ca, cb))
                between[key] = between.get(key, 0.0) + w
        k = [math.fsum(strength[n] for n in c) for c in comms]
        best = None
        for (i, j), w_ij in between.items():
            gain = w_ij / total - k[i] * k[j] / (2 * total * total)
            tie = tuple(sorted((min(comms[i]), min(comms[j]))))
            if gain <= GAIN_TOL:
                continue
            if best is None or gain > best[0] + GAIN_TOL or (abs(gain - best[0]) <= GAIN_TOL and tie < best[1]):
                best = (gain, tie, i, j)
        if best is None:
            return comms
        _, _, i, j = best
        comms = [c for idx, c in enumerate(comms) if idx not in (i, j)] + [comms[i] | comms[j]]


def _move_nodes(g: SocialGraph, comms: list[frozenset[str]]) -> list[frozenset[str]]:
    """Move single nodes, in id order, to the linked community (or a new one) that gains most."""
    total = math.fsum(g.weights.values())
    strength = _strengths(g)
    nbrs = {n: g.neighbors(n) for n in g.nodes}
    label = {n: i for i, c in enumerate(comms) for n in c}
    fresh = len(comms)
    moved = True
    while moved:
        moved = False
        for n in sorted(label):
            tot: dict[int, float] = {}
            for m, c in label.items():
                tot[c] = tot.get(c, 0.0) + strength[m]
            links: dict[int, float] = {}
            for m, w in nbrs[n].items():
                links[label[m]] = links.get(label[m], 0.0) + w
            cur = label[n]
            stay = links.get(cur, 0.0) - strength[n] * (tot[cur] - strength[n]) / (2 * total)
            best_gain, target = GAIN_TOL, None
            for c in sorted(links):
                if c == cur:
                    continue
                gain = links[c] - strength[n] * tot[c] / (2 * total) - stay
                if gain > best_gain:
                    best_gain, target = gain, c
            if -stay > best_gain:
                target = fresh
                fresh += 1
            if target is not None:
                label[n] = target
                moved = True
    groups: dict[int, set[str]] = {}
    for n, c in label.items():
        groups.setdefault(c, set()).add(n)
    return [frozenset(v) for v in groups.values()]


def detect_communities(g: SocialGraph, method: str = "auto") -> tuple[dict[str, int], float]:
    """Modularity-maximizing communities; returns labels and the partition's modularity.

    ``"greedy"`` is agglomerative: from singletons, merge the pair of adjacent
    communities with the largest modularity gain until no merge gains (ties
    to the pair with the smallest member ids), then alternate single-node
    moves and further merges while modularity still rises. ``"exact"`` finds
    the optimum by dynamic programming and is limited to
    ``EXACT_MAX_NODES`` linked nodes. ``"auto"`` uses exact when it fits.
    Isolated nodes always stay alone. Labels are numbered by each
    community's smallest member id.
    """
    strength = _strengths(g)
    linked = [n for n in g.nodes if strength[n] > 0]
    isolated = [frozenset([n]) for n in g.nodes if strength[n] == 0]
    if method == "auto":
        method = "exact" if len(linked) <= EXACT_MAX_NODES else "greedy"
    if method == "exact":
        if len(linked) > EXACT_MAX_NODES:
            raise ValueError(f"exact community search is limited to {EXACT_MAX_NODES} linked nodes")
        comms = _exact_partition(g, linked) if linked else []
    elif method == "greedy":
        comms = [frozenset([n]) for n in linked]
        if linked:
            comms = _greedy_merge(g, comms)
            q = modularity(g, _labels(comms + isolated))
            while True:
                candidate = _greedy_merge(g, _move_nodes(g, comms))
                q_new = modularity(g, _labels(candidate + isolated))
                if q_new <= q + GAIN_TOL:
                    break
                comms, q = candidate, q_new
    else:
        raise ValueError(f"unknown community method {method!r}")
    labels = _labels(comms + isolated)
    return labels, modularity(g, labels)


def _labels(comms: list[frozenset[str]]) -> dict[str, int]:
    ordered = sorted(comms, key=min)
    return {n: idx for idx, c in enumerate(ordered) for n in c}


def export_graph(g: SocialGraph, metrics: dict[str, NodeMetrics], directory: str | Path, stem: str = "graph") -> list[Path]:
    """Write nodes.csv, edges.csv and a DOT file sized by PageRank, colored by community."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nodes_path = directory / "nodes.csv"
    with nodes_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["member_id", *METRIC_NAMES, "community"])
        for n in g.nodes:
            m = metrics[n]
            writer.writerow([n, *(repr(getattr(m, k)) for k in METRIC_NAMES), m.community])
    edges_path = directory / "edges.csv"
    with edges_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["src", "dst", "weight"])
        for (a, b), w in sorted(g.weights.items()):
            writer.writerow([a, b, repr(w)])
    dot_path = directory / f"{stem}.dot"
    dot_path.write_text(to_dot(g, metrics), encoding="utf-8")
    return [nodes_path, edges_path, dot_path]


def to_dot(g: SocialGraph, metrics: dict[str, NodeMetrics]) -> str:
    top = max((metrics[n].pagerank for n in g.nodes), default=1.0) or 1.0
    heaviest = max(g.weights.values(), default=1.0)
    lines = ["graph social {", '  graph [overlap=false, splines=true];', '  node [shape=circle, style=filled, fontsize=10];']
    for n in g.nodes:
        m = metrics[n]
        size = 0.3 + 1.2 * m.pagerank / top
        color = PALETTE[m.community % len(PALETTE)] if m.community >= 0 else "#cccccc"
        lines.append(f'  "{n}" [width={size:.3f}, height={size:.3f}, fillcolor="{color}", pagerank={m.pagerank:.6f}];')
    for (a, b), w in sorted(g.weights.items()):
        lines.append(f'  "{a}" -- "{b}" [weight={w:.6g}, penwidth={0.5 + 3 * w / heaviest:.3f}];')
    lines.append("}")
    return "\n".join(lines) + "\n"
