import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadepred.ingest import PostRecord
from cascadepred.slicing import (
    NoiseEncoding,
    SliceDataset,
    class_density,
    encode_noise,
    export_csv,
    load_dataset,
    save_dataset,
    slice_posts,
    split_chronological,
)


def P(ts, author, kind="tweet", target=None):
    return PostRecord(ts, author, kind, target)


class TestSlicePosts:
    def test_partial_window_dropped(self):
        ds = slice_posts([P(0, "u"), P(10, "u"), P(50, "u")], ["u"], delta_t=20)
        assert ds.n_slices == 2
        assert ds.inputs[:, 0].tolist() == [1, 0]

    def test_tweet_is_not_reaction(self):
        ds = slice_posts([P(0, "u"), P(100, "v")], ["u", "v"], delta_t=10)
        assert ds.inputs[0, 0] == 1 and ds.targets[0, 0] == 0

    def test_retweet_sets_both(self):
        ds = slice_posts([P(0, "u", "retweet", "v"), P(100, "v")], ["u", "v"], delta_t=10)
        assert ds.inputs[0, 0] == 1 and ds.targets[0, 0] == 1

    def test_no_posts(self):
        with pytest.raises(ValueError):
            slice_posts([], ["u"])

    def test_unknown_users_ignored(self):
        ds = slice_posts([P(0, "x"), P(0, "u"), P(30, "u")], ["u"], delta_t=10)
        assert ds.inputs.sum() == 1

    @given(st.lists(st.tuples(st.integers(0, 500), st.integers(0, 3), st.booleans()),
                    min_size=1, max_size=80), st.integers(1, 60))
    @settings(max_examples=80, deadline=None)
    def test_matches_bucket_oracle(self, raw, dt):
        users = ["a", "b", "c", "d"]
        posts = sorted(P(t, users[u], "reply" if r else "tweet", users[(u + 1) % 4] if r else None)
                       for t, u, r in raw)
        t0, last = posts[0].timestamp, posts[-1].timestamp
        n = (last - t0) // dt
        if n < 1:
            with pytest.raises(ValueError):
                slice_posts(posts, users, dt)
            return
        ds = slice_posts(posts, users, dt)
        inputs = np.zeros((n, 4), int)
        targets = np.zeros((n, 4), int)
        for p in posts:
            k = (p.timestamp - t0) // dt
            if k < n:
                inputs[k, users.index(p.author)] = 1
                if p.kind == "reply":
                    targets[k, users.index(p.author)] = 1
        np.testing.assert_array_equal(ds.inputs, inputs)
        np.testing.assert_array_equal(ds.targets, targets)
        assert np.all(ds.targets <= ds.inputs)


class TestSplit:
    @pytest.mark.parametrize("n,expected", [(100, (70, 90, 100)), (87, (60, 78, 87)),
                                            (10, (7, 9, 10))])
    def test_examples(self, n, expected):
        assert split_chronological(n) == expected

    def test_too_short(self):
        with pytest.raises(ValueError):
            split_chronological(9)

    @given(st.integers(10, 10**6))
    def test_floor_arithmetic(self, n):
        tr, va, m = split_chronological(n)
        assert tr == int(n * 7 // 10) and va == int(n * 9 // 10) and m == n
        assert 0 < tr <= va <= m


class TestNoise:
    def test_moments(self):
        v = np.tile([1, 0], 50_000)
        x = encode_noise(v, 0)
        ones, zeros = x[v == 1], x[v == 0]
        assert abs(ones.mean() - 1) < 0.005 and abs(zeros.mean() + 1) < 0.005
        assert abs(ones.var() - 0.01) < 0.001 and abs(zeros.var() - 0.01) < 0.001

    def test_zero_variance(self):
        x = encode_noise(np.array([1, 0, 1]), 0, NoiseEncoding(variance=0.0))
        assert x.tolist() == [1.0, -1.0, 1.0]

    def test_seeded(self):
        v = np.array([1, 0, 0, 1])
        np.testing.assert_array_equal(encode_noise(v, 5), encode_noise(v, 5))

    def test_fresh_draws(self):
        rng = np.random.default_rng(0)
        v = np.ones(4)
        assert not np.array_equal(encode_noise(v, rng), encode_noise(v, rng))


class TestDensity:
    def test_quarter(self):
        assert class_density(np.array([[1, 0], [0, 0]])) == 0.25

    def test_all_ones(self):
        assert class_density(np.ones((3, 3))) == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            class_density(np.zeros((0, 3)))


def _dataset(n=30, d=13, seed=0):
    rng = np.random.default_rng(seed)
    x = (rng.random((n, d)) < 0.3).astype(np.uint8)
    y = x & (rng.random((n, d)) < 0.5)
    return SliceDataset([f"u{i}" for i in range(d)], 60, x, y, *split_chronological(n)[:2], t0=7)


class TestDataset:
    def test_pairs_shift(self):
        ds = _dataset()
        x, y = ds.train_pairs()
        np.testing.assert_array_equal(x, ds.inputs[:21])
        np.testing.assert_array_equal(y, ds.targets[1:22])

    def test_test_range_stops_before_last(self):
        ds = _dataset()
        assert list(ds.test_range) == [27, 28]
        x, y = ds.test_pairs()
        assert len(x) == len(y) == 2

    def test_bad_split(self):
        with pytest.raises(ValueError):
            _dataset().with_split(20, 10)

    def test_round_trip(self, tmp_path):
        ds = _dataset()
        save_dataset(tmp_path / "d.bin", ds)
        back = load_dataset(tmp_path / "d.bin")
        assert back.users == ds.users and back.delta_t == 60 and back.t0 == 7
        assert (back.train_end, back.val_end) == (ds.train_end, ds.val_end)
        np.testing.assert_array_equal(back.inputs, ds.inputs)
        np.testing.assert_array_equal(back.targets, ds.targets)

    def test_rejects_other_files(self, tmp_path):
        (tmp_path / "x").write_bytes(b"CPNT....")
        with pytest.raises(ValueError):
            load_dataset(tmp_path / "x")

    def test_csv_export(self, tmp_path):
        ds = _dataset()
        export_csv(tmp_path / "d.csv", ds)
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert lines[0] == "slice,split,user,active,reacted"
        assert len(lines) - 1 == int((ds.inputs | ds.targets).sum())
