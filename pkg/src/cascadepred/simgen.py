"""Synthetic activity generators with known ground truth.

Three regimes:

* ``per_user_markov``: every user is an independent two-state chain.
* ``neighbor_driven``: a user's next-window reaction is a logistic function of
  which users it follows were active (planted sparse graph around a few hubs).
* ``broadcast``: seed users tweet every window, their followers retweet with a
  fixed probability.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .ingest import PostRecord, SocialGraph
from .slicing import DEFAULT_DELTA_T, SliceDataset, split_chronological

KINDS = ("per_user_markov", "neighbor_driven", "broadcast")


@dataclass
class GeneratorSpec:
    kind: str
    n_users: int
    n_slices: int
    seed: int = 0
    delta_t: int = DEFAULT_DELTA_T
    t0: int = 1_600_000_000
    # per_user_markov; None draws each user's value uniformly from [0, 1]
    q01: float | list | None = None
    q11: float | list | None = None
    p_init: float | None = None  # None: stationary probability
    # neighbor_driven
    n_hubs: int = 20
    in_degree: int = 1
    weight_low: float = 8.0
    weight_high: float = 8.0
    bias: float = -5.0
    # broadcast
    n_seeds: int = 10
    follows: int = 2
    q: float = 0.3
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.n_users < 2 or self.n_slices < 2:
            raise ValueError("need at least 2 users and 2 slices")
        for name in ("p_init", "q"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability")
        for name in ("q01", "q11"):
            v = getattr(self, name)
            if v is not None and np.any((np.asarray(v) < 0) | (np.asarray(v) > 1)):
                raise ValueError(f"{name} must be probabilities")
        if self.kind == "broadcast" and not 1 <= self.n_seeds < self.n_users:
            raise ValueError("broadcast needs 1 <= n_seeds < n_users")
        if self.kind == "neighbor_driven":
            if not 2 <= self.n_hubs <= self.n_users:
                raise ValueError("neighbor_driven needs 2 <= n_hubs <= n_users")
            if not 1 <= self.in_degree < self.n_hubs:
                raise ValueError("in_degree must be in [1, n_hubs)")

    @classmethod
    def from_json(cls, path) -> "GeneratorSpec":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)


@dataclass
class Simulation:
    spec: GeneratorSpec
    dataset: SliceDataset
    graph: SocialGraph
    truth: dict

    def posts(self) -> list[PostRecord]:
        """The post log that slices back into ``dataset`` (deterministic per spec)."""
        ds = self.dataset
        return _posts(self.spec, np.random.default_rng([self.spec.seed, 2]), ds.inputs,
                      ds.targets, self.graph, self.truth)


def user_ids(n: int) -> list[str]:
    width = len(str(n - 1))
    return [f"u{i:0{width}d}" for i in range(n)]


def markov_params(spec: GeneratorSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-user ``(q01, q11, p_init)``, drawn from the spec's own seed when unset."""
    rng = np.random.default_rng([spec.seed, 1])
    n = spec.n_users

    def per_user(v):
        return rng.uniform(size=n) if v is None else np.broadcast_to(np.asarray(v, float), n).copy()

    q01, q11 = per_user(spec.q01), per_user(spec.q11)
    if spec.p_init is not None:
        p0 = np.full(n, spec.p_init)
    else:
        p0 = stationary(q01, q11, fallback=0.5)
    return q01, q11, p0


def stationary(q01, q11, fallback: float = 0.5) -> np.ndarray:
    """Long-run active fraction ``q01 / (1 - q11 + q01)``; ``fallback`` when undefined."""
    q01, q11 = np.asarray(q01, float), np.asarray(q11, float)
    den = 1.0 - q11 + q01
    with np.errstate(invalid="ignore", divide="ignore"):
        pi = np.where(den > 0, q01 / den, fallback)
    return pi


def _ensure_first_post(act):
    # the exported log must start in window 0 so it slices back from t0
    if not act[0].any():
        act[0, 0] = 1


def _markov(spec, rng):
    q01, q11, p0 = markov_params(spec)
    act = np.zeros((spec.n_slices, spec.n_users), dtype=np.uint8)
    act[0] = rng.random(spec.n_users) < p0
    _ensure_first_post(act)
    for i in range(1, spec.n_slices):
        p = np.where(act[i - 1] > 0, q11, q01)
        act[i] = rng.random(spec.n_users) < p
    users = user_ids(spec.n_users)
    return act, act.copy(), SocialGraph(users, set(), "follower"), {"q01": q01, "q11": q11,
                                                                   "p_init": p0}


def planted_graph(spec: GeneratorSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    """Hub-centred follow graph and its weights ``W[u, v]`` (u follows v)."""
    n, h = spec.n_users, spec.n_hubs
    adj = np.zeros((n, n), dtype=bool)
    for u in range(n):
        pool = np.array([v for v in range(h) if v != u])
        adj[u, rng.choice(pool, size=spec.in_degree, replace=False)] = True
    w = np.where(adj, rng.uniform(spec.weight_low, spec.weight_high, size=(n, n)), 0.0)
    return adj, w


def _neighbor(spec, rng):
    adj, w = planted_graph(spec, rng)
    n = spec.n_users
    bias = np.full(n, spec.bias)
    act = np.zeros((spec.n_slices, n), dtype=np.uint8)
    p0 = 1.0 / (1.0 + np.exp(-bias))
    act[0] = rng.random(n) < p0
    _ensure_first_post(act)
    for i in range(1, spec.n_slices):
        z = w @ act[i - 1] + bias
        act[i] = rng.random(n) < 1.0 / (1.0 + np.exp(-z))
    users = user_ids(n)
    edges = {(users[u], users[v]) for u, v in zip(*np.nonzero(adj))}
    return act, act.copy(), SocialGraph(users, edges, "follower"), {"adjacency": adj,
                                                                   "weights": w, "bias": bias}


def _broadcast(spec, rng):
    n, s = spec.n_users, spec.n_seeds
    k = min(spec.follows, s)
    adj = np.zeros((n, n), dtype=bool)
    for u in range(s, n):
        adj[u, rng.choice(s, size=k, replace=False)] = True
    inputs = np.zeros((spec.n_slices, n), dtype=np.uint8)
    targets = np.zeros_like(inputs)
    reactions = rng.random((spec.n_slices, n, s)) < spec.q
    reactions &= adj[None, :, :s]
    inputs[:, :s] = 1
    targets[:, s:] = reactions[:, s:].any(axis=2)
    inputs |= targets
    users = user_ids(n)
    edges = {(users[u], users[v]) for u, v in zip(*np.nonzero(adj))}
    truth = {"seeds": np.arange(s), "adjacency": adj, "reactions": reactions}
    return inputs, targets, SocialGraph(users, edges, "follower"), truth


def _posts(spec, rng, inputs, targets, graph, truth) -> list[PostRecord]:
    users = graph.users
    n_slices, n = inputs.shape
    follows = [[] for _ in range(n)]
    index = {u: i for i, u in enumerate(users)}
    for u, v in sorted(graph.edges):
        follows[index[u]].append(index[v])
    posts = []
    for i in range(n_slices):
        base = spec.t0 + i * spec.delta_t
        if spec.kind == "broadcast":
            react = truth["reactions"][i]
            for u in range(n):
                if u < spec.n_seeds:
                    posts.append(PostRecord(base, users[u], "tweet"))
                for v in np.flatnonzero(react[u]):
                    ts = base + 1 + int(rng.integers(spec.delta_t - 1))
                    posts.append(PostRecord(ts, users[u], "retweet", users[v]))
            continue
        for u in np.flatnonzero(targets[i]):
            if follows[u]:
                v = follows[u][int(rng.integers(len(follows[u])))]
            else:
                v = int(rng.integers(n - 1))
                v += v >= u
            ts = base + int(rng.integers(spec.delta_t))
            posts.append(PostRecord(ts, users[u], "retweet", users[v]))
    # anchors: the log starts exactly at t0 and covers every window in full
    if not any(p.timestamp == spec.t0 for p in posts):
        first = [p for p in posts if p.timestamp < spec.t0 + spec.delta_t]
        if first:
            p = min(first)
            posts.remove(p)
            posts.append(PostRecord(spec.t0, p.author, p.kind, p.target))
    posts.append(PostRecord(spec.t0 + n_slices * spec.delta_t, users[0], "tweet"))
    posts.sort(key=lambda r: (r.timestamp, r.author, r.kind, r.target or ""))
    return posts


def generate(spec: GeneratorSpec) -> Simulation:
    rng = np.random.default_rng(spec.seed)
    make = {"per_user_markov": _markov, "neighbor_driven": _neighbor, "broadcast": _broadcast}
    inputs, targets, graph, truth = make[spec.kind](spec, rng)
    n = spec.n_slices
    tr, va, _ = split_chronological(n) if n >= 10 else (n, n, n)
    ds = SliceDataset(graph.users, spec.delta_t, inputs, targets, tr, va, spec.t0)
    return Simulation(spec, ds, graph, truth)


def markov_cell_table(q01, q11, pi):
    """Joint probabilities per (user, previous state) cell.

    Returns ``(p_pos, p_cell)``: probability that the cell occurs and the next
    state is active, and probability that the cell occurs, each of length 2D
    (all b=1 cells first, then b=0).
    """
    q01, q11, pi = (np.asarray(x, float) for x in (q01, q11, pi))
    p_pos = np.concatenate([pi * q11, (1 - pi) * q01])
    p_cell = np.concatenate([pi, 1 - pi])
    return p_pos, p_cell


def optimal_f1_from_cells(p_pos: np.ndarray, p_cell: np.ndarray) -> float:
    """Best expected-count F1 over subsets of cells predicted positive.

    F1 = 2 TP / (predicted + actual positives) is maximised by the cells with
    the highest conditional positive rate, so only prefixes of that ordering
    need checking.
    """
    total_pos = p_pos.sum()
    if total_pos <= 0:
        return 0.0
    keep = p_cell > 0
    p_pos, p_cell = p_pos[keep], p_cell[keep]
    rate = p_pos / p_cell
    order = np.lexsort((-p_cell, -rate))
    tp = np.concatenate([[0.0], np.cumsum(p_pos[order])])
    pred = np.concatenate([[0.0], np.cumsum(p_cell[order])])
    return float(np.max(2 * tp / (pred + total_pos)))


def bayes_optimal_f1(spec: GeneratorSpec) -> float:
    """Expected F1 of the best per-user rule (previous state -> prediction), in steady state."""
    if spec.kind != "per_user_markov":
        raise ValueError("closed form only exists for per_user_markov specs")
    q01, q11, p0 = markov_params(spec)
    pi = stationary(q01, q11, fallback=np.nan)
    pi = np.where(np.isnan(pi), p0, pi)
    return optimal_f1_from_cells(*markov_cell_table(q01, q11, pi))
