import math

import numpy as np
import pytest

from cascadepred import experiment as ex
from cascadepred.experiment import (
    Confusion,
    EvalReport,
    TrainConfig,
    TrainingError,
    aggregate,
    confusion,
    evaluate,
    extract_influence,
    fit_model,
    load_predictor,
    markdown_table,
    repeat_runs,
    save_predictor,
    search_priors,
    shuffle_rows,
    train,
    write_report_csv,
)
from cascadepred.predictors import RandomPredictor, TwmnModel, TwpnModel, twmn_mask
from cascadepred.slicing import SliceDataset, split_chronological


def _copy_dataset(n=100, d=1, seed=0):
    """Targets of slice i+1 repeat the inputs of slice i."""
    rng = np.random.default_rng(seed)
    x = (rng.random((n, d)) < 0.5).astype(np.uint8)
    y = np.zeros_like(x)
    y[1:] = x[:-1]
    return SliceDataset([f"u{i}" for i in range(d)], 1, x, y, *split_chronological(n)[:2])


class TestTrain:
    def test_twpn_learns_copy(self):
        ds = _copy_dataset()
        m = TwpnModel(1, seed=0)
        res = train(m, ds, TrainConfig(max_epochs=500, batch_size=4), seed=0)
        assert m.weights[0] > 2
        assert res.train_loss[-1] < 0.05
        assert evaluate(m, ds).f1 == 1.0

    def test_patience_restores_first_epoch(self):
        ds = _copy_dataset(n=100)
        # flip validation targets so that learning the copy rule hurts validation
        y = ds.targets.copy()
        tr, va = ds.train_end, ds.val_end
        y[tr + 1:va + 1] = 1 - ds.inputs[tr:va]
        ds = SliceDataset(ds.users, 1, ds.inputs, y, tr, va)
        m = TwpnModel(1, seed=0)
        res = train(m, ds, TrainConfig(max_epochs=500, patience=50), seed=0)
        assert res.epochs == 51 and res.best_epoch == 1
        assert all(b > a for a, b in zip(res.val_loss, res.val_loss[1:]))
        # replaying one epoch from the same initial weights reproduces the restored value
        m2 = TwpnModel(1, seed=0)
        train(m2, ds, TrainConfig(max_epochs=1, patience=50), seed=0)
        np.testing.assert_array_equal(m.weights, m2.weights)

    def test_deterministic(self):
        ds = _copy_dataset(d=4, seed=2)
        a, b = TwpnModel(4, seed=1), TwpnModel(4, seed=1)
        train(a, ds, TrainConfig(max_epochs=30), seed=5)
        train(b, ds, TrainConfig(max_epochs=30), seed=5)
        np.testing.assert_array_equal(a.weights, b.weights)

    def test_never_returns_worse_than_best(self):
        ds = _copy_dataset(d=3, seed=1)
        m = TwpnModel(3, seed=0)
        res = train(m, ds, TrainConfig(max_epochs=40, patience=5, batch_size=2), seed=1)
        from cascadepred.numerics import mse_loss
        from cascadepred.slicing import encode_clean
        xv, yv = ds.val_pairs()
        val, _ = mse_loss(m.forward(encode_clean(xv)), encode_clean(yv))
        assert val == pytest.approx(min(res.val_loss), abs=1e-12)

    def test_non_finite_aborts(self):
        ds = _copy_dataset()
        m = TwpnModel(1)
        m.weights[:] = np.nan
        with pytest.raises(TrainingError):
            train(m, ds, TrainConfig(max_epochs=3))

    def test_loss_csv(self, tmp_path):
        ds = _copy_dataset()
        res = train(TwpnModel(1), ds, TrainConfig(max_epochs=3))
        res.write_csv(tmp_path / "l.csv")
        lines = (tmp_path / "l.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_mse,val_mse" and len(lines) == 4


def test_shuffle_preserves_popcount():
    rng = np.random.default_rng(0)
    x = (rng.random((50, 30)) < 0.2).astype(np.uint8)
    s = shuffle_rows(x, rng)
    np.testing.assert_array_equal(s.sum(axis=1), x.sum(axis=1))
    assert not np.array_equal(s, x)


class TestMetrics:
    def test_formula(self):
        c = Confusion(2, 1, 1, 0)
        assert c.precision == pytest.approx(2 / 3) and c.recall == pytest.approx(2 / 3)
        assert abs(c.f1 - 2 / 3) < 1e-9

    def test_perfect(self):
        t = np.array([[1, 0, 1]])
        assert confusion(t, t).metrics() == {"precision": 1.0, "recall": 1.0, "f1": 1.0}

    def test_zero_guard(self):
        assert confusion(np.zeros(4), np.zeros(4)).f1 == 0.0

    def test_cells_counted_once(self):
        rng = np.random.default_rng(0)
        p, t = rng.random((7, 9)) < 0.5, rng.random((7, 9)) < 0.3
        c = confusion(p, t)
        assert c.tp + c.fp + c.fn + c.tn == 63

    def test_empty_range(self):
        with pytest.raises(ValueError):
            evaluate(RandomPredictor(), _copy_dataset(), range(5, 5))

    def test_rnd_half_pattern(self):
        rng = np.random.default_rng(0)
        x = (rng.random((2000, 100)) < 0.1).astype(np.uint8)
        y = (rng.random((2000, 100)) < 0.1).astype(np.uint8)
        ds = SliceDataset([str(i) for i in range(100)], 1, x, y, *split_chronological(2000)[:2])
        density = y[1801:].mean()
        runs = [evaluate(RandomPredictor("half", seed), ds) for seed in range(5)]
        assert abs(np.mean([c.precision for c in runs]) - density) < 0.02
        assert abs(np.mean([c.recall for c in runs]) - 0.5) < 0.02


class TestAggregate:
    def test_sample_std(self):
        runs = [{"f1": v, "precision": v, "recall": v} for v in [0.5, 0.6, 0.7, 0.6, 0.6]]
        rep = aggregate("m", "d", runs)
        assert rep.mean("f1") == pytest.approx(0.6)
        # n - 1 in the denominator: sqrt(0.02 / 4)
        assert abs(rep.std("f1") - math.sqrt(0.02 / 4)) < 1e-12
        assert round(rep.std("f1"), 4) == 0.0707

    def test_mle_std_zero(self):
        ds = _copy_dataset(d=5)
        rep = repeat_runs("mle", ds, TrainConfig(seeds=(0, 1, 2)))
        assert rep.std("f1") == 0.0 and len(rep.runs) == 3

    def test_rnd_std_positive(self):
        ds = _copy_dataset(d=20, n=200)
        assert repeat_runs("rnd_half", ds, TrainConfig()).std("f1") > 0

    def test_needs_two_seeds(self):
        with pytest.raises(ValueError):
            repeat_runs("mle", _copy_dataset(), TrainConfig(seeds=(0,)))

    def test_partial_report(self, monkeypatch):
        real = ex.train

        def flaky(model, dataset, config, seed=0):
            if seed == 1:
                raise TrainingError("boom")
            return real(model, dataset, config, seed)

        monkeypatch.setattr(ex, "train", flaky)
        rep = repeat_runs("twpn", _copy_dataset(), TrainConfig(max_epochs=2, seeds=(0, 1, 2)))
        assert rep.partial and rep.failed == [1] and len(rep.runs) == 2
        assert "*" in markdown_table([rep])

    def test_report_outputs(self, tmp_path):
        reps = [EvalReport("mle", "toy", [{"precision": 0.5, "f1": 0.4, "recall": 0.3}] * 2),
                EvalReport("twpn", "toy", [{"precision": 0.2, "f1": 0.1, "recall": 0.0},
                                           {"precision": 0.4, "f1": 0.3, "recall": 0.2}])]
        write_report_csv(tmp_path / "r.csv", reps)
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "model,dataset,metric,mean,std,runs" and len(lines) == 7
        md = markdown_table(reps).splitlines()
        assert md[0] == "| Model | toy P | toy F1 | toy R |"
        assert md[2] == "| MLE | 0.50 ± 0.00 | 0.40 ± 0.00 | 0.30 ± 0.00 |"
        assert md[3].startswith("| TWPN | 0.30 ± 0.14 |")


class TestInfluence:
    def _model(self, w):
        mask = twmn_mask(np.array([[0, 1, 1], [0, 0, 0], [0, 0, 0]], bool))
        m = TwmnModel(3, mask)
        m.dense.params["W"][...] = 0
        m.dense.params["W"][0, 1], m.dense.params["W"][0, 2] = w
        return m

    def test_min_max(self):
        a = extract_influence(self._model((1.0, 3.0)))
        assert a[0, 1] == 0.0 and a[0, 2] == 1.0

    def test_constant(self):
        a = extract_influence(self._model((2.0, 2.0)))
        assert a[0, 1] == a[0, 2] == 0.5

    def test_zero_off_mask(self):
        a = extract_influence(self._model((1.0, 3.0)))
        assert a.sum() == 1.0 and np.all(np.diag(a) == 0)

    def test_does_not_mutate_adjacency(self):
        adj = np.ones((3, 3), bool)
        extract_influence(self._model((1.0, 3.0)), adj)
        assert adj.all()


def _planted(d=40, n=300, seed=0):
    rng = np.random.default_rng(seed)
    truth = rng.random(d) < 0.3
    x = (rng.random((n, d)) < 0.3).astype(np.uint8)
    y = np.tile(truth.astype(np.uint8), (n, 1))
    return SliceDataset([str(i) for i in range(d)], 1, x, y, *split_chronological(n)[:2]), truth


class TestSearchPriors:
    def test_planted_recovery(self):
        ds, truth = _planted()
        p = search_priors("alo", ds, np.zeros((40, 40)), budget=500, seed=0)
        assert np.mean((p.beta > 0.5) == truth) >= 0.9

    def test_budget_one(self):
        ds, _ = _planted()
        p = search_priors("lt", ds, np.zeros((40, 40)), budget=1, seed=3)
        rng = np.random.default_rng(3)
        np.testing.assert_array_equal(p.beta, rng.uniform(size=40))
        assert p.a == rng.uniform(*ex.A_RANGE)

    def test_zero_budget_density(self):
        ds, truth = _planted()
        p = search_priors("alo", ds, np.zeros((40, 40)), budget=0)
        np.testing.assert_allclose(p.beta, truth.mean())

    def test_deterministic(self):
        ds, _ = _planted()
        a = search_priors("lt", ds, np.zeros((40, 40)), budget=50, seed=9)
        b = search_priors("lt", ds, np.zeros((40, 40)), budget=50, seed=9)
        np.testing.assert_array_equal(a.beta, b.beta)
        assert (a.a, a.b) == (b.a, b.b)


class TestFitModel:
    def test_unknown_name(self):
        with pytest.raises(ValueError, match="choose from"):
            fit_model("gpt", _copy_dataset(), TrainConfig(), 0)

    def test_epidemic_needs_graph(self):
        with pytest.raises(ValueError):
            fit_model("alo", _copy_dataset(), TrainConfig(), 0)

    @pytest.mark.parametrize("name", ex.MODEL_NAMES)
    def test_every_model_round_trips(self, name, tmp_path):
        ds = _copy_dataset(n=60, d=6, seed=1)
        adj = np.zeros((6, 6), bool)
        adj[np.arange(6), (np.arange(6) + 1) % 6] = True
        cfg = TrainConfig(max_epochs=3, d=4, channels=2, blocks=1, search_budget=5)
        model = fit_model(name, ds, cfg, seed=2, adjacency=adj).model
        save_predictor(tmp_path / "m.ckpt", model, 2)
        back, seed = load_predictor(tmp_path / "m.ckpt")
        assert seed == 2 and back.name == model.name
        if name.startswith("rnd"):
            model = RandomPredictor(model.kind, 2)
        np.testing.assert_array_equal(back.predict(ds.inputs), model.predict(ds.inputs))
