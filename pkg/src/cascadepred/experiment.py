"""Training with early stopping, evaluation, repeated seeded runs and baseline fitting."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .predictors import (
    EpidemicParams,
    EpidemicPredictor,
    MlePredictor,
    NeuralPredictor,
    RandomPredictor,
    TwcrnModel,
    TwmnModel,
    TwpnModel,
    load_neural,
    sigmoid_ab,
    twmn_mask,
)
from .numerics import Adam, load_tensors, mse_loss, save_tensors
from .slicing import NoiseEncoding, class_density, encode_clean, encode_noise

log = logging.getLogger(__name__)

MODEL_NAMES = ("rnd_half", "rnd_prop", "mle", "twpn", "twmn", "twmn_all1", "twcrn",
               "twcrn_shuf", "alo", "lt")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 5000
    patience: int = 50
    batch_size: int | None = None  # None: one full-batch step per epoch
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    shuffle_inputs: bool = False
    lr: float = 0.001
    noise: NoiseEncoding = field(default_factory=NoiseEncoding)
    # model shape knobs
    d: int = 100
    channels: int = 8
    blocks: int = 2
    # baseline prior search
    search_budget: int = 500

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")


@dataclass
class TrainResult:
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int
    epochs: int

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "val_mse"])
            for i, (t, v) in enumerate(zip(self.train_loss, self.val_loss), 1):
                w.writerow([i, repr(t), repr(v)])


def shuffle_rows(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent uniform permutation of the coordinates of every row."""
    out = rng.permuted(x, axis=1)
    if not np.array_equal(out.sum(axis=1), x.sum(axis=1)):
        raise AssertionError("shuffle changed a row's activity count")
    return out


def train(model: NeuralPredictor, dataset, config: TrainConfig, seed: int = 0) -> TrainResult:
    """Adam on MSE between the model output and noise-encoded +-1 targets.

    Inputs and targets get fresh noise every epoch. Validation MSE is measured
    on clean +-1 data after every epoch; the parameters of the best epoch are
    restored when training stops (``patience`` epochs without a strict
    improvement, or ``max_epochs``).
    """
    rng = np.random.default_rng(seed)
    x_tr, y_tr = dataset.train_pairs()
    x_va, y_va = dataset.val_pairs()
    if len(x_tr) == 0:
        raise ValueError("empty training range")
    if len(x_va) == 0:
        log.warning("no validation pairs; early stopping on training loss")
    xv, yv = encode_clean(x_va, config.noise), encode_clean(y_va, config.noise)

    opt = Adam(lr=config.lr)
    params = model.params()
    best_state, best_val, best_epoch = model.get_state(), math.inf, 0
    train_hist, val_hist = [], []
    n = len(x_tr)
    bs = n if not config.batch_size else config.batch_size

    for epoch in range(1, config.max_epochs + 1):
        xb = shuffle_rows(x_tr, rng) if config.shuffle_inputs else x_tr
        xin = encode_noise(xb, rng, config.noise)
        yin = encode_noise(y_tr, rng, config.noise)
        order = rng.permutation(n) if bs < n else np.arange(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            out = model.forward(xin[idx])
            loss, g = mse_loss(out, yin[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            model.backward(g)
            opt.step(params, model.grads())
            total += loss * len(idx)
        train_hist.append(total / n)
        if len(x_va):
            val, _ = mse_loss(model.forward(xv), yv)
        else:
            val = train_hist[-1]
        if not math.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        val_hist.append(val)
        if val < best_val:
            best_val, best_epoch, best_state = val, epoch, model.get_state()
        elif epoch - best_epoch >= config.patience:
            break
    model.set_state(best_state)
    return TrainResult(train_hist, val_hist, best_epoch, len(val_hist))


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def metrics(self) -> dict[str, float]:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


def confusion(pred: np.ndarray, truth: np.ndarray) -> Confusion:
    p = np.asarray(pred).astype(bool)
    t = np.asarray(truth).astype(bool)
    return Confusion(int((p & t).sum()), int((p & ~t).sum()), int((~p & t).sum()),
                     int((~p & ~t).sum()))


def f1_score(pred, truth) -> float:
    return confusion(pred, truth).f1


def evaluate(model, dataset, pair_range: range | None = None) -> Confusion:
    """Micro-averaged confusion over every (slice, user) cell of the pair range."""
    r = dataset.test_range if pair_range is None else pair_range
    x, y = dataset.pairs(r.start, r.stop)
    if len(x) == 0:
        raise ValueError("empty evaluation range")
    return confusion(model.predict(x), y)


METRICS = ("precision", "f1", "recall")


@dataclass
class EvalReport:
    model: str
    dataset: str
    runs: list[dict[str, float]]
    failed: list[int] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.failed)

    def mean(self, metric: str) -> float:
        return float(np.mean([r[metric] for r in self.runs])) if self.runs else float("nan")

    def std(self, metric: str) -> float:
        """Sample standard deviation (n - 1) across runs."""
        vals = [r[metric] for r in self.runs]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0


def aggregate(model: str, dataset: str, runs: list[dict[str, float]]) -> EvalReport:
    return EvalReport(model, dataset, list(runs))


def extract_influence(twmn: TwmnModel, adjacency: np.ndarray | None = None) -> np.ndarray:
    """Min-max rescale the trained weights on the social edges into ``[0, 1]``.

    ``alpha[u, v]`` is the influence of v on u. Edges are ``adjacency`` when
    given, else the model mask without its diagonal. Zero off the edges.
    """
    support = np.array(twmn.mask if adjacency is None else adjacency, dtype=bool)
    np.fill_diagonal(support, False)
    alpha = np.zeros(support.shape)
    if not support.any():
        return alpha
    w = twmn.dense.params["W"][support]
    lo, hi = w.min(), w.max()
    if hi - lo <= 0:
        log.warning("constant influence weights; using 0.5 on every edge")
        alpha[support] = 0.5
    else:
        alpha[support] = (w - lo) / (hi - lo)
    return alpha


class _PriorObjective:
    """Validation F1 of a baseline as a function of (beta, a, b), with alpha fixed."""

    def __init__(self, kind, alpha, gamma, x, y):
        self.kind, self.gamma, self.y = kind, gamma, y.astype(bool)
        act = (x > 0).astype(np.float64)
        ga = gamma * alpha
        if kind == "alo":
            zero = (ga >= 1.0).astype(np.float64)
            with np.errstate(divide="ignore"):
                logf = np.where(ga >= 1.0, 0.0, np.log1p(-np.minimum(ga, 1.0)))
            self.neigh = np.exp(act @ logf.T) * ((act @ zero.T) == 0)
        else:
            self.neigh = act @ ga.T

    def probabilities(self, beta, a, b):
        g = self.gamma
        if self.kind == "alo":
            return 1.0 - (1.0 - g * beta) * self.neigh
        return sigmoid_ab(g * (beta + self.neigh), a, b)

    def __call__(self, beta, a, b) -> float:
        return f1_score(self.probabilities(beta, a, b) > 0.5, self.y)


A_RANGE = (-10.0, 10.0)


def search_priors(kind: str, dataset, alpha: np.ndarray, budget: int = 500, seed: int = 0,
                  gamma: float = 1.0, pair_range: range | None = None,
                  resample_fraction: float = 0.1) -> EpidemicParams:
    """Randomised search over the prior box maximising validation F1.

    The first evaluation is a uniform draw over the whole box. Every later
    one redraws a random ``resample_fraction`` of the coordinates of the best
    point so far (and, for ``lt``, one of ``a``/``b``) uniformly, keeping it
    if F1 does not drop. ``budget`` counts F1 evaluations; with 0 the priors
    default to the training class density.
    """
    D = dataset.n_users
    n_max = float(alpha.sum(axis=1).max()) if alpha.size else 0.0
    b_range = (0.0, gamma * (1.0 + gamma * n_max))
    if budget <= 0:
        x, y = dataset.train_pairs()
        beta = np.full(D, class_density(y))
        return EpidemicParams(beta, alpha, gamma)
    rng = np.random.default_rng(seed)
    r = dataset.val_range if pair_range is None else pair_range
    x, y = dataset.pairs(r.start, r.stop)
    if len(x) == 0:
        x, y = dataset.train_pairs()
    objective = _PriorObjective(kind, alpha, gamma, x, y)

    beta = rng.uniform(size=D)
    a, b = rng.uniform(*A_RANGE), rng.uniform(*b_range)
    best = objective(beta, a, b)
    k = max(1, int(round(resample_fraction * D)))
    for _ in range(budget - 1):
        cand = beta.copy()
        idx = rng.choice(D, size=k, replace=False)
        cand[idx] = rng.uniform(size=k)
        ca, cb = a, b
        if kind == "lt":
            if rng.random() < 0.5:
                ca = rng.uniform(*A_RANGE)
            else:
                cb = rng.uniform(*b_range)
        score = objective(cand, ca, cb)
        if score >= best:
            best, beta, a, b = score, cand, ca, cb
    params = EpidemicParams(beta, alpha, gamma, a, b)
    params.extra["val_f1"] = best
    return params


@dataclass
class FitResult:
    model: object
    history: TrainResult | None = None


def build_neural(name: str, dataset, config: TrainConfig, seed: int, mask=None):
    D = dataset.n_users
    if name == "twpn":
        return TwpnModel(D, seed)
    if name == "twmn":
        if mask is None:
            raise ValueError("twmn needs the social graph mask")
        return TwmnModel(D, mask, seed)
    if name == "twmn_all1":
        return TwmnModel(D, None, seed)
    if name in ("twcrn", "twcrn_shuf"):
        m = TwcrnModel(D, min(config.d, D), config.channels, config.blocks, seed)
        m.name = name
        return m
    raise ValueError(f"not a neural model: {name!r}")


def fit_model(name: str, dataset, config: TrainConfig, seed: int, adjacency=None) -> FitResult:
    """Build and fit one predictor by name.

    ``adjacency`` is the social graph over ``dataset.users`` (``M[u, v]``: u
    follows / reacts to v); it is needed by ``twmn``, ``alo`` and ``lt``.
    """
    if name not in MODEL_NAMES:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
    if name in ("rnd_half", "rnd_prop"):
        return FitResult(RandomPredictor("half" if name == "rnd_half" else "proportional", seed))
    if name == "mle":
        x, y = dataset.pairs(0, dataset.train_end)
        return FitResult(MlePredictor(dataset.n_users).fit(x, y))
    if name in ("alo", "lt"):
        if adjacency is None:
            raise ValueError(f"{name} needs the social graph")
        twmn = build_neural("twmn", dataset, config, seed, twmn_mask(adjacency))
        hist = train(twmn, dataset, config, seed)
        alpha = extract_influence(twmn, adjacency)
        params = search_priors(name, dataset, alpha, config.search_budget, seed)
        return FitResult(EpidemicPredictor(name, params), hist)
    mask = twmn_mask(adjacency) if name == "twmn" and adjacency is not None else None
    model = build_neural(name, dataset, config, seed, mask)
    cfg = config
    if name == "twcrn_shuf" and not config.shuffle_inputs:
        cfg = TrainConfig(**{**config.__dict__, "shuffle_inputs": True})
    hist = train(model, dataset, cfg, seed)
    return FitResult(model, hist)


def repeat_runs(name: str, dataset, config: TrainConfig, adjacency=None,
                dataset_name: str = "dataset", pair_range: range | None = None) -> EvalReport:
    """Fit and evaluate once per seed; failed runs are recorded, not fatal."""
    if len(config.seeds) < 2:
        raise ValueError("need at least two seeds")
    runs, failed = [], []
    for seed in config.seeds:
        try:
            fitted = fit_model(name, dataset, config, seed, adjacency)
        except TrainingError as exc:
            log.error("%s seed %d aborted: %s", name, seed, exc)
            failed.append(seed)
            continue
        runs.append(evaluate(fitted.model, dataset, pair_range).metrics())
    report = aggregate(name, dataset_name, runs)
    report.failed = failed
    return report


def write_report_csv(path, reports: list[EvalReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "dataset", "metric", "mean", "std", "runs"])
        for rep in reports:
            for m in METRICS:
                w.writerow([rep.model, rep.dataset, m, f"{rep.mean(m):.6f}", f"{rep.std(m):.6f}",
                            len(rep.runs)])


DISPLAY = {"rnd_half": "RND_{p=0.5}", "rnd_prop": "RND_{p=pi}", "mle": "MLE", "twpn": "TWPN",
           "twmn": "TWMN", "twmn_all1": "TWMN_{all-1}", "twcrn": "TWCRN",
           "twcrn_shuf": "TWCRN_{SHUF}", "alo": "ALO", "lt": "LT"}


def markdown_table(reports: list[EvalReport]) -> str:
    """One row per model; precision, F1 and recall as ``mean ± std`` per dataset."""
    datasets = list(dict.fromkeys(r.dataset for r in reports))
    models = list(dict.fromkeys(r.model for r in reports))
    by_key = {(r.model, r.dataset): r for r in reports}
    head = "| Model | " + " | ".join(f"{d} P | {d} F1 | {d} R" for d in datasets) + " |"
    sep = "|---|" + "---|" * (3 * len(datasets))
    lines = [head, sep]
    for m in models:
        cells = []
        for d in datasets:
            rep = by_key.get((m, d))
            for metric in METRICS:
                if rep is None or not rep.runs:
                    cells.append("n/a")
                else:
                    flag = "*" if rep.partial else ""
                    cells.append(f"{rep.mean(metric):.2f} ± {rep.std(metric):.2f}{flag}")
        lines.append(f"| {DISPLAY.get(m, m)} | " + " | ".join(cells) + " |")
    if any(r.partial for r in reports):
        lines.append("")
        lines.append("\\* some runs aborted; statistics over the completed runs only.")
    return "\n".join(lines) + "\n"


def save_predictor(path, model, seed: int) -> None:
    """Write any fitted predictor as a tensor container tagged with its name and seed."""
    meta = {"model": model.name, "seed": str(seed)}
    if isinstance(model, NeuralPredictor):
        tensors = dict(model.params())
        if isinstance(model, TwmnModel):
            tensors["mask"] = model.mask
        meta.update(model.config())
    elif isinstance(model, MlePredictor):
        tensors = {"counts": model.counts}
    elif isinstance(model, RandomPredictor):
        tensors = {}
    elif isinstance(model, EpidemicPredictor):
        p = model.params
        tensors = {"beta": p.beta, "alpha": p.alpha}
        meta.update(gamma=repr(p.gamma), a=repr(float(p.a)), b=repr(float(p.b)))
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    save_tensors(path, tensors, meta)


def load_predictor(path):
    """Inverse of :func:`save_predictor`; returns ``(model, seed)``."""
    tensors, meta = load_tensors(path)
    name, seed = meta["model"], int(meta["seed"])
    if name in ("rnd_half", "rnd_prop"):
        return RandomPredictor("half" if name == "rnd_half" else "proportional", seed), seed
    if name == "mle":
        m = MlePredictor(tensors["counts"].shape[0])
        m.counts[...] = tensors["counts"]
        return m, seed
    if name in ("alo", "lt"):
        params = EpidemicParams(tensors["beta"], tensors["alpha"], float(meta["gamma"]),
                                float(meta["a"]), float(meta["b"]))
        return EpidemicPredictor(name, params), seed
    return load_neural(path), seed
