import itertools

import numpy as np
import pytest

from cascadepred.ingest import broadcasticity, filter_users
from cascadepred.predictors import MlePredictor
from cascadepred.simgen import GeneratorSpec, bayes_optimal_f1, generate, stationary
from cascadepred.slicing import slice_posts


def _enumerate_rules(q01, q11, pi):
    """Brute force over every per-user rule: never, copy, invert, always."""
    q01, q11, pi = map(np.asarray, (q01, q11, pi))
    pos = pi * q11 + (1 - pi) * q01
    best = 0.0
    rules = [(0, 0), (1, 0), (0, 1), (1, 1)]  # (predict when b=1, predict when b=0)
    for combo in itertools.product(rules, repeat=len(q01)):
        tp = pred = 0.0
        for u, (r1, r0) in enumerate(combo):
            tp += r1 * pi[u] * q11[u] + r0 * (1 - pi[u]) * q01[u]
            pred += r1 * pi[u] + r0 * (1 - pi[u])
        denom = pred + pos.sum()
        if denom > 0:
            best = max(best, 2 * tp / denom)
    return best


class TestMarkov:
    def test_absorbing_silence(self):
        sim = generate(GeneratorSpec("per_user_markov", 6, 30, q01=0.0, q11=0.0, p_init=0.7))
        assert sim.dataset.inputs[1:].sum() == 0

    def test_all_active_forever(self):
        sim = generate(GeneratorSpec("per_user_markov", 6, 30, q01=0.0, q11=1.0, p_init=1.0))
        assert sim.dataset.inputs.all()

    def test_deterministic_chain_optimum(self):
        assert bayes_optimal_f1(GeneratorSpec("per_user_markov", 5, 20, q01=0.0, q11=1.0)) == 1.0

    def test_uninformative_chain_optimum(self):
        spec = GeneratorSpec("per_user_markov", 5, 20, q01=0.5, q11=0.5)
        assert abs(bayes_optimal_f1(spec) - 2 / 3) < 1e-12

    @pytest.mark.parametrize("seed", range(6))
    def test_mixed_population_matches_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        q01, q11 = rng.random(5).tolist(), rng.random(5).tolist()
        spec = GeneratorSpec("per_user_markov", 5, 20, q01=q01, q11=q11)
        expected = _enumerate_rules(q01, q11, stationary(q01, q11))
        assert abs(bayes_optimal_f1(spec) - expected) < 1e-12

    def test_other_kinds_rejected(self):
        with pytest.raises(ValueError):
            bayes_optimal_f1(GeneratorSpec("broadcast", 20, 20))

    def test_mle_recovers_parameters(self):
        spec = GeneratorSpec("per_user_markov", 20, 20_000, seed=4)
        sim = generate(spec)
        x, y = sim.dataset.pairs(0, sim.dataset.n_slices)
        p = MlePredictor(20).fit(x, y).probs
        q01, q11 = sim.truth["q01"], sim.truth["q11"]
        # users that almost never leave a state give few samples of the other row
        n1 = x.sum(axis=0)
        n0 = len(x) - n1
        ok1, ok0 = n1 > 2500, n0 > 2500
        assert np.all(np.abs(p[ok1, 1] - q11[ok1]) < 0.02)
        assert np.all(np.abs(p[ok0, 0] - q01[ok0]) < 0.02)
        assert ok1.sum() + ok0.sum() >= 20


class TestNeighbor:
    def test_graph_and_activity(self):
        sim = generate(GeneratorSpec("neighbor_driven", 50, 100, seed=1))
        adj = sim.truth["adjacency"]
        assert np.all(adj.sum(axis=1) == 1) and not adj.diagonal().any()
        assert np.array_equal(sim.dataset.inputs, sim.dataset.targets)
        assert 0 < sim.dataset.inputs.mean() < 0.5


class TestBroadcast:
    def test_full_reaction(self):
        spec = GeneratorSpec("broadcast", 30, 40, seed=2, n_seeds=5, q=1.0)
        sim = generate(spec)
        adj = sim.truth["adjacency"]
        followers = np.flatnonzero(adj.any(axis=1))
        assert sim.dataset.targets[:, followers].all()
        assert sim.dataset.targets[:, :5].sum() == 0
        reacted_to = {v for u, v in sim.graph.edges}
        reactors = {sim.graph.users[u] for u in followers}
        assert broadcasticity(reactors, reacted_to) == 1.0

    def test_filtered_sets_disjoint(self):
        sim = generate(GeneratorSpec("broadcast", 30, 40, seed=2, n_seeds=5, q=1.0))
        f = filter_users(sim.posts(), 30)
        assert broadcasticity(f.active_set, f.popular_set) == 1.0


@pytest.mark.parametrize("kind", ["per_user_markov", "neighbor_driven", "broadcast"])
class TestCommon:
    def test_same_seed_same_data(self, kind):
        a, b = generate(GeneratorSpec(kind, 30, 50, seed=9)), generate(GeneratorSpec(kind, 30, 50,
                                                                                       seed=9))
        assert np.array_equal(a.dataset.inputs, b.dataset.inputs)
        assert a.posts() == b.posts()

    def test_posts_slice_back(self, kind):
        spec = GeneratorSpec(kind, 30, 50, seed=3)
        sim = generate(spec)
        ds = slice_posts(sim.posts(), sim.graph.users, spec.delta_t)
        assert ds.t0 == spec.t0 and ds.n_slices == spec.n_slices
        np.testing.assert_array_equal(ds.inputs, sim.dataset.inputs)
        np.testing.assert_array_equal(ds.targets, sim.dataset.targets)
        assert np.all(ds.targets <= ds.inputs)

    def test_spec_json_round_trip(self, kind, tmp_path):
        spec = GeneratorSpec(kind, 30, 50, seed=3)
        spec.to_json(tmp_path / "s.json")
        assert GeneratorSpec.from_json(tmp_path / "s.json") == spec


def test_invalid_spec():
    with pytest.raises(ValueError):
        GeneratorSpec("per_user_markov", 5, 20, q01=1.5)
    with pytest.raises(ValueError):
        GeneratorSpec("epidemic", 5, 20)
