"""Post logs, social graphs, user filtering and dataset statistics."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("tweet", "retweet", "reply", "mention")
REACTIONS = frozenset(("retweet", "reply", "mention"))


class MalformedLogError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class PostRecord:
    timestamp: int
    author: str
    kind: str
    target: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown post kind {self.kind!r}")
        if (self.kind == "tweet") != (self.target is None):
            raise ValueError("a tweet has no target; every reaction has one")
        if self.timestamp < 0:
            raise ValueError("negative timestamp")

    @property
    def is_reaction(self) -> bool:
        return self.kind in REACTIONS

    def to_json(self) -> str:
        obj = {"ts": self.timestamp, "author": self.author, "kind": self.kind}
        if self.target is not None:
            obj["target"] = self.target
        return json.dumps(obj, separators=(",", ":"))


@dataclass
class ParseResult:
    records: list[PostRecord]
    malformed: int = 0
    lines: int = 0


def _record_from_obj(obj) -> PostRecord:
    if not isinstance(obj, dict):
        raise ValueError("not an object")
    ts = obj["ts"]
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise ValueError("ts must be an integer")
    author = obj["author"]
    target = obj.get("target")
    if not isinstance(author, str) or (target is not None and not isinstance(target, str)):
        raise ValueError("user ids must be strings")
    return PostRecord(ts, author, obj["kind"], target)


def parse_post_log(path, max_malformed_fraction: float = 0.01) -> ParseResult:
    """Read a newline-delimited JSON post log, sorted by timestamp.

    Malformed lines are skipped with a warning. If more than
    ``max_malformed_fraction`` of non-blank lines are malformed the whole log
    is rejected with :class:`MalformedLogError`.
    """
    path = Path(path)
    records, bad, lines = [], 0, 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            lines += 1
            try:
                records.append(_record_from_obj(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                bad += 1
                log.warning("%s:%d: skipping malformed record (%s)", path, lineno, exc)
    if lines and bad / lines > max_malformed_fraction:
        raise MalformedLogError(f"{path}: {bad}/{lines} malformed lines exceeds tolerance")
    records.sort(key=lambda r: (r.timestamp, r.author, r.kind, r.target or ""))
    return ParseResult(records, bad, lines)


def write_post_log(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


@dataclass
class SocialGraph:
    """Directed graph; edge ``(u, v)`` means u reacts to / follows v."""

    users: list[str]
    edges: set[tuple[str, str]]
    semantics: str = "mention"

    def __post_init__(self):
        known = set(self.users)
        for u, v in self.edges:
            if u == v:
                raise ValueError(f"self-loop on {u!r}")
            if u not in known or v not in known:
                raise ValueError(f"edge ({u!r}, {v!r}) references unknown user")

    def out_neighbors(self, u: str) -> set[str]:
        return {v for a, v in self.edges if a == u}

    def adjacency(self, order: list[str] | None = None) -> np.ndarray:
        """Boolean ``M`` with ``M[i, j]`` set iff ``order[i]`` -> ``order[j]`` is an edge.

        Edges touching users outside ``order`` are ignored.
        """
        order = self.users if order is None else order
        index = {u: i for i, u in enumerate(order)}
        m = np.zeros((len(order), len(order)), dtype=bool)
        for u, v in self.edges:
            if u in index and v in index:
                m[index[u], index[v]] = True
        return m


def build_mention_graph(posts) -> SocialGraph:
    edges = {(p.author, p.target) for p in posts if p.is_reaction and p.author != p.target}
    users = sorted({u for e in edges for u in e})
    return SocialGraph(users, edges, "mention")


def load_follower_graph(path, universe) -> SocialGraph:
    """Read ``follower<TAB>followee`` lines, keep edges inside ``universe``.

    Users left with no edges are dropped.
    """
    universe = set(universe)
    edges = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                log.warning("%s:%d: malformed edge line", path, lineno)
                continue
            u, v = parts
            if u not in universe or v not in universe:
                log.warning("%s:%d: edge (%s, %s) references unknown user", path, lineno, u, v)
                continue
            if u != v:
                edges.add((u, v))
    users = sorted({u for e in edges for u in e})
    return SocialGraph(users, edges, "follower")


def write_edge_list(path, graph: SocialGraph) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, v in sorted(graph.edges):
            fh.write(f"{u}\t{v}\n")


@dataclass
class UserFilter:
    activity_threshold: int
    popularity_threshold: int
    active_set: set[str]
    popular_set: set[str]

    @property
    def kept_users(self) -> set[str]:
        return self.active_set | self.popular_set


def activity_counts(posts) -> tuple[Counter, Counter]:
    """(posts per author, reactions received per target)."""
    posted = Counter(p.author for p in posts)
    reacted_to = Counter(p.target for p in posts if p.is_reaction)
    return posted, reacted_to


def _candidate_thresholds(counts: Counter, n_quantiles: int) -> list[int]:
    values = np.array(sorted(counts.values()), dtype=np.int64)
    if values.size == 0:
        return [1]
    qs = np.unique(np.quantile(values, np.linspace(0, 1, n_quantiles + 1), method="lower"))
    # one above the max keeps nobody
    return sorted(set(int(q) for q in qs) | {int(values.max()) + 1})


def filter_users(posts, target_size: int, n_quantiles: int = 100) -> UserFilter:
    """Pick thresholds ``a``, ``p`` so that ``|A | P|`` lands closest to ``target_size``.

    ``A`` holds users with at least ``a`` posts, ``P`` users reacted to at least
    ``p`` times. Both thresholds are swept over quantiles of the observed
    counts. Pairs where both sets are non-empty are preferred. Ties go to the
    higher activity threshold, then the higher popularity threshold, so ``A``
    and ``P`` are as selective as the target allows.
    """
    if target_size < 1:
        raise ValueError("target_size must be >= 1")
    posted, reacted_to = activity_counts(posts)
    everyone = set(posted) | set(reacted_to)
    if len(everyone) < target_size:
        log.warning("only %d distinct users, fewer than target %d", len(everyone), target_size)

    a_grid = _candidate_thresholds(posted, n_quantiles)
    p_grid = _candidate_thresholds(reacted_to, n_quantiles)
    # users sorted by count descending so each threshold is a prefix
    by_posts = sorted(posted.items(), key=lambda kv: -kv[1])
    by_reacts = sorted(reacted_to.items(), key=lambda kv: -kv[1])

    def prefix(items, thr):
        return {u for u, c in items if c >= thr}

    best = None
    for a in a_grid:
        A = prefix(by_posts, a)
        for p in p_grid:
            P = prefix(by_reacts, p)
            if not (A or P):
                continue
            key = (not (A and P), abs(len(A | P) - target_size), -a, -p)
            if best is None or key < best[0]:
                best = (key, a, p, A, P)
    _, a, p, A, P = best
    return UserFilter(a, p, A, P)


def broadcasticity(active: set, popular: set) -> float:
    """One minus the Jaccard index of the active and popular user sets."""
    union = len(active | popular)
    if union == 0:
        raise ValueError("broadcasticity undefined for two empty sets")
    return 1.0 - len(active & popular) / union


@dataclass
class SmallWorld:
    mean_path: float
    critical_path: float
    is_small_world: bool
    pairs: int
    exact: bool
    stderr: float = 0.0


def _undirected_csr(graph: SocialGraph):
    from scipy.sparse import csr_matrix

    index = {u: i for i, u in enumerate(graph.users)}
    n = len(graph.users)
    if graph.edges:
        rows = np.array([index[u] for u, v in graph.edges] + [index[v] for u, v in graph.edges])
        cols = np.array([index[v] for u, v in graph.edges] + [index[u] for u, v in graph.edges])
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
    return csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))


def small_world_check(graph: SocialGraph, sample_pairs: int = 10000, seed: int = 0,
                      exact_limit: int = 2000) -> SmallWorld:
    """Mean shortest path on the undirected projection vs ``log10(N)``.

    Exact all-pairs BFS up to ``exact_limit`` users; above it, ordered pairs
    are drawn uniformly (all drawn before any BFS) and disconnected pairs are
    discarded.
    """
    from scipy.sparse.csgraph import shortest_path

    n = len(graph.users)
    if n < 2:
        raise ValueError("need at least two users")
    adj = _undirected_csr(graph)
    if n <= exact_limit:
        dist = shortest_path(adj, method="D", unweighted=True)
        off = ~np.eye(n, dtype=bool) & np.isfinite(dist)
        d = dist[off]
        exact = True
    else:
        rng = np.random.default_rng(seed)
        src = rng.integers(0, n, size=sample_pairs)
        dst = rng.integers(0, n - 1, size=sample_pairs)
        dst = dst + (dst >= src)
        uniq, inv = np.unique(src, return_inverse=True)
        dist = shortest_path(adj, method="D", unweighted=True, indices=uniq)
        d = dist[inv, dst]
        d = d[np.isfinite(d)]
        exact = False
    if d.size == 0:
        raise ValueError("no connected pair of users")
    mean = float(d.mean())
    stderr = 0.0 if exact or d.size < 2 else float(d.std(ddof=1) / math.sqrt(d.size))
    crit = math.log10(n)
    return SmallWorld(mean, crit, mean <= crit, int(d.size), exact, stderr)


@dataclass
class DatasetStats:
    post_counts_by_kind: dict[str, int]
    broadcasticity: float
    mean_shortest_path: float | None = None
    critical_path: float | None = None
    small_world: bool | None = None
    activity_histogram: dict[int, int] = field(default_factory=dict)
    n_users: int = 0
    n_slices: int = 0
    activity_threshold: int | None = None
    popularity_threshold: int | None = None
    n_active: int = 0
    n_popular: int = 0

    def rows(self) -> list[tuple[str, str]]:
        out = [(f"posts_{k}", str(v)) for k, v in self.post_counts_by_kind.items()]
        out += [
            ("n_users", str(self.n_users)),
            ("n_slices", str(self.n_slices)),
            ("activity_threshold", _fmt(self.activity_threshold)),
            ("popularity_threshold", _fmt(self.popularity_threshold)),
            ("n_active", str(self.n_active)),
            ("n_popular", str(self.n_popular)),
            ("broadcasticity", _fmt(self.broadcasticity)),
            ("mean_shortest_path", _fmt(self.mean_shortest_path)),
            ("critical_path", _fmt(self.critical_path)),
            ("small_world", _fmt(self.small_world)),
        ]
        out += [(f"hist_{k}", str(v)) for k, v in sorted(self.activity_histogram.items())]
        return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def activity_histogram(slice_counts: np.ndarray) -> dict[int, int]:
    """Histogram of users by average posts per slice (rounded).

    ``slice_counts`` is a slices x users matrix of post counts.
    """
    if slice_counts.size == 0:
        return {}
    per_user = np.rint(slice_counts.mean(axis=0)).astype(int)
    vals, cnt = np.unique(per_user, return_counts=True)
    return {int(v): int(c) for v, c in zip(vals, cnt)}


def dataset_stats(posts, graph: SocialGraph | None, user_filter: UserFilter | None,
                  slice_counts: np.ndarray | None = None, sample_pairs: int = 10000,
                  seed: int = 0) -> DatasetStats:
    counts = Counter(p.kind for p in posts)
    by_kind = {k: counts.get(k, 0) for k in KINDS}
    if user_filter is None:
        posted, reacted_to = activity_counts(posts)
        user_filter = UserFilter(1, 1, set(posted), set(reacted_to))
    stats = DatasetStats(
        by_kind,
        broadcasticity(user_filter.active_set, user_filter.popular_set),
        n_users=len(user_filter.kept_users),
        activity_threshold=user_filter.activity_threshold,
        popularity_threshold=user_filter.popularity_threshold,
        n_active=len(user_filter.active_set),
        n_popular=len(user_filter.popular_set),
    )
    if graph is not None and len(graph.users) >= 2 and graph.edges:
        sw = small_world_check(graph, sample_pairs, seed)
        stats.mean_shortest_path = sw.mean_path
        stats.critical_path = sw.critical_path
        stats.small_world = sw.is_small_world
    if slice_counts is not None:
        stats.activity_histogram = activity_histogram(slice_counts)
        stats.n_slices = int(slice_counts.shape[0])
    return stats


def write_stats_csv(path, stats: DatasetStats) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["statistic", "value"])
        w.writerows(stats.rows())
