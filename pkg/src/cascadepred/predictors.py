"""Reaction predictors: counting, random, neural (per-user, masked, conv-residual) and
the two epidemic baselines.

Every predictor exposes ``predict(tau)`` mapping a batch of binary activity
vectors ``(n, D)`` to a batch of binary reaction predictions. Neural models
additionally expose ``forward``/``backward`` on +-1 encoded inputs and a flat
``params()`` dict for the optimizer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    Conv3x3,
    Dense,
    Elementwise,
    Inflate,
    Layer,
    ReLU,
    ResidualBlock,
    RowMeanPool,
    Sequential,
    Tanh,
    collect,
    erfc_half_transform,
    load_tensors,
    save_tensors,
    sigmoid_ab,
)
from .slicing import encode_clean


def binarize(outputs: np.ndarray) -> np.ndarray:
    """1 where strictly positive, else 0."""
    return (np.asarray(outputs) > 0).astype(np.uint8)


def _as_batch(tau):
    tau = np.asarray(tau)
    return (tau[None, :], True) if tau.ndim == 1 else (tau, False)


class MlePredictor:
    """Per-user table of ``Pr[reacts next | active now = b]`` from transition counts.

    ``counts[u, b, a]`` counts pairs with input bit b and target bit a.
    Unseen conditions predict 0; a probability of exactly 0.5 predicts 1.
    """

    name = "mle"

    def __init__(self, n_users: int):
        self.counts = np.zeros((n_users, 2, 2), dtype=np.int64)

    @property
    def probs(self) -> np.ndarray:
        tot = self.counts.sum(axis=2)
        with np.errstate(invalid="ignore", divide="ignore"):
            p = self.counts[:, :, 1] / tot
        return np.where(tot > 0, p, 0.0)

    def fit(self, inputs: np.ndarray, targets: np.ndarray) -> "MlePredictor":
        b = np.asarray(inputs, dtype=np.int64)
        a = np.asarray(targets, dtype=np.int64)
        for bb in (0, 1):
            for aa in (0, 1):
                self.counts[:, bb, aa] += ((b == bb) & (a == aa)).sum(axis=0)
        return self

    def predict(self, tau):
        tau, single = _as_batch(tau)
        p = self.probs
        cols = np.arange(p.shape[0])
        out = (p[cols, (tau > 0).astype(np.int64)] >= 0.5).astype(np.uint8)
        return out[0] if single else out

    def to_csv(self, path, users) -> None:
        p = self.probs
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user", "b", "count0", "count1", "p"])
            for u, name in enumerate(users):
                for b in (0, 1):
                    c0, c1 = self.counts[u, b]
                    w.writerow([name, b, int(c0), int(c1), repr(float(p[u, b]))])

    @classmethod
    def from_csv(cls, path, users) -> "MlePredictor":
        index = {u: i for i, u in enumerate(users)}
        m = cls(len(users))
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                m.counts[index[row["user"]], int(row["b"])] = (int(row["count0"]),
                                                               int(row["count1"]))
        return m


def mle_fit(dataset, pair_range: range) -> MlePredictor:
    x, y = dataset.pairs(pair_range.start, pair_range.stop)
    return MlePredictor(dataset.n_users).fit(x, y)


class RandomPredictor:
    """Coin-flip baseline: Bernoulli(0.5), or Bernoulli(mean activity of the input)."""

    def __init__(self, kind: str = "half", seed: int = 0):
        if kind not in ("half", "proportional"):
            raise ValueError(f"unknown random kind {kind!r}")
        self.kind = kind
        self.name = "rnd_half" if kind == "half" else "rnd_prop"
        self.rng = np.random.default_rng(seed)

    def predict(self, tau):
        tau, single = _as_batch(tau)
        if self.kind == "half":
            pi = np.full((tau.shape[0], 1), 0.5)
        else:
            pi = tau.mean(axis=1, keepdims=True)
        out = (self.rng.random(tau.shape) < pi).astype(np.uint8)
        return out[0] if single else out


def rnd_predict(kind: str, tau, seed: int = 0):
    return RandomPredictor(kind, seed).predict(tau)


class NeuralPredictor:
    """Wraps a layer stack; inputs are +-1 encoded, outputs thresholded at 0."""

    name = "neural"

    def __init__(self, net: Layer, n_users: int):
        self.net = net
        self.n_users = n_users

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.n_users:
            raise ValueError(f"expected input width {self.n_users}, got {x.shape[-1]}")
        return self.net.forward(x)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return self.net.backward(grad)

    def params(self) -> dict[str, np.ndarray]:
        return collect(self.net)[0]

    def grads(self) -> dict[str, np.ndarray]:
        return collect(self.net)[1]

    def get_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params().items()}

    def set_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params().items():
            v[...] = state[k]

    def predict(self, tau):
        tau, single = _as_batch(tau)
        out = binarize(self.forward(encode_clean(tau)))
        return out[0] if single else out

    def config(self) -> dict[str, str]:
        return {"model": self.name, "n_users": str(self.n_users)}

    def save(self, path) -> None:
        save_tensors(path, self.params(), self.config())


class TwpnModel(NeuralPredictor):
    """``tanh(w[u] * x[u])``: one weight per user, no cross-user terms."""

    name = "twpn"

    def __init__(self, n_users: int, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        super().__init__(Sequential([Elementwise(n_users, rng, dtype), Tanh()]), n_users)

    @property
    def weights(self) -> np.ndarray:
        return self.net.layers[0].params["w"]


def twmn_mask(adjacency: np.ndarray, include_self: bool = True) -> np.ndarray:
    """Mask for the masked network; row u lists the inputs output u may read."""
    m = np.asarray(adjacency, dtype=bool).copy()
    if include_self:
        np.fill_diagonal(m, True)
    return m


class TwmnModel(NeuralPredictor):
    """``tanh(sum_v M[u, v] W[u, v] x[v])``, no bias.

    ``mask=None`` gives the fully connected (all-ones mask) ablation.
    """

    name = "twmn"

    def __init__(self, n_users: int, mask=None, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        if mask is None:
            mask = np.ones((n_users, n_users), dtype=bool)
            self.name = "twmn_all1"
        self.mask = np.asarray(mask, dtype=bool)
        super().__init__(Sequential([Dense(n_users, n_users, rng, mask=self.mask, bias=False,
                                           dtype=dtype), Tanh()]), n_users)

    @property
    def dense(self) -> Dense:
        return self.net.layers[0]

    @property
    def weights(self) -> np.ndarray:
        return self.dense.effective_weight()

    def save(self, path) -> None:
        save_tensors(path, {**self.params(), "mask": self.mask}, self.config())


def encoder_plan(n_users: int, d: int) -> list[int]:
    """Widths from ``n_users`` down to ``d`` by floor-halving, last width pinned to ``d``."""
    if d < 1 or d > n_users:
        raise ValueError(f"need 1 <= d <= D, got d={d}, D={n_users}")
    widths = [n_users]
    while widths[-1] // 2 > d:
        widths.append(widths[-1] // 2)
    if widths[-1] != d:
        widths.append(d)
    return widths


def decoder_plan(d: int, n_users: int) -> list[int]:
    """Widths from ``d`` up to ``n_users`` by doubling, last width pinned to ``n_users``."""
    widths = [d]
    while widths[-1] * 2 < n_users:
        widths.append(widths[-1] * 2)
    if widths[-1] != n_users:
        widths.append(n_users)
    return widths


def inflate(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    return np.tile(v, (v.shape[-1], 1))


class TwcrnModel(NeuralPredictor):
    """Encoder -> row-copy inflation -> residual conv core -> decoder.

    Encoder and decoder are dense tanh stacks following :func:`encoder_plan` /
    :func:`decoder_plan`; the decoder's last layer is linear. The conv core is a
    3x3 stem to ``channels`` channels, ``blocks`` residual blocks, a mean over
    the (identical) grid rows and a dense map back to ``d``.
    """

    name = "twcrn"

    def __init__(self, n_users: int, d: int = 100, channels: int = 8, blocks: int = 2,
                 seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.d, self.channels, self.blocks = d, channels, blocks
        self.enc_widths = encoder_plan(n_users, d)
        self.dec_widths = decoder_plan(d, n_users)
        enc = []
        for a, b in zip(self.enc_widths, self.enc_widths[1:]):
            enc += [Dense(a, b, rng, dtype=dtype), Tanh()]
        core = [Inflate(), Conv3x3(1, channels, rng, dtype), ReLU()]
        core += [ResidualBlock(channels, rng, dtype) for _ in range(blocks)]
        core += [RowMeanPool(), Dense(channels * d, d, rng, dtype=dtype)]
        dec = []
        for a, b in zip(self.dec_widths, self.dec_widths[1:]):
            dec += [Dense(a, b, rng, dtype=dtype), Tanh()]
        dec.pop()  # linear output
        self.encoder, self.core, self.decoder = Sequential(enc), Sequential(core), Sequential(dec)
        super().__init__(Sequential([self.encoder, self.core, self.decoder]), n_users)
        self._check_plan()

    def stage_shapes(self, x: np.ndarray) -> list[tuple[int, ...]]:
        """Output shape after each of encoder, inflater, conv core, decoder."""
        z = self.encoder.forward(x)
        grid = self.core.layers[0].forward(z)
        c = self.core.forward(z)
        y = self.decoder.forward(c)
        return [z.shape, grid.shape, c.shape, y.shape]

    def _check_plan(self):
        n = 1
        got = self.stage_shapes(np.zeros((n, self.n_users)))
        want = [(n, self.d), (n, 1, self.d, self.d), (n, self.d), (n, self.n_users)]
        if got != want:
            raise ValueError(f"stage shapes {got} do not match plan {want}")

    def config(self):
        return {**super().config(), "d": str(self.d), "channels": str(self.channels),
                "blocks": str(self.blocks)}


def load_neural(path) -> NeuralPredictor:
    tensors, meta = load_tensors(path)
    n = int(meta["n_users"])
    kind = meta["model"]
    if kind == "twpn":
        model = TwpnModel(n)
    elif kind in ("twmn", "twmn_all1"):
        model = TwmnModel(n, tensors.pop("mask"))
        model.name = kind
    elif kind in ("twcrn", "twcrn_shuf"):
        model = TwcrnModel(n, int(meta["d"]), int(meta["channels"]), int(meta["blocks"]))
        model.name = kind
    else:
        raise ValueError(f"{path}: unknown model {kind!r}")
    model.set_state(tensors)
    return model


@dataclass
class EpidemicParams:
    """Parameters shared by the at-least-one and linear-threshold baselines.

    ``alpha[u, v]`` is the influence of v on u. ``temporal`` is ``None`` (the
    temporal factor is 1) or a tuple of per-user arrays ``(mu, sigma, t_post)``.
    """

    beta: np.ndarray
    alpha: np.ndarray
    gamma: float = 1.0
    a: float = 1.0
    b: float = 0.5
    temporal: tuple | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        for name, v in (("beta", self.beta), ("alpha", self.alpha), ("gamma", self.gamma)):
            if np.any(np.asarray(v) < 0) or np.any(np.asarray(v) > 1):
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.alpha.shape != (self.beta.size, self.beta.size):
            raise ValueError("alpha must be D x D")

    def temporal_factor(self) -> np.ndarray:
        if self.temporal is None:
            return np.ones_like(self.beta)
        mu, sigma, t_post = (np.broadcast_to(np.asarray(t, float), self.beta.shape)
                             for t in self.temporal)
        return np.array([erfc_half_transform(t, m, s) for m, s, t in zip(mu, sigma, t_post)])


def alo_probabilities(params: EpidemicParams, tau) -> np.ndarray:
    """``1 - (1 - g beta_u) prod_v (1 - g alpha[u, v] tau[v])`` for every user."""
    tau, single = _as_batch(tau)
    act = (tau > 0).astype(np.float64)
    ga = params.gamma * params.alpha
    # factors equal to zero are tracked separately so the log stays finite
    zero = (ga >= 1.0).astype(np.float64)
    with np.errstate(divide="ignore"):
        logf = np.where(ga >= 1.0, 0.0, np.log1p(-np.minimum(ga, 1.0)))
    prod = np.exp(act @ logf.T) * ((act @ zero.T) == 0)
    p = 1.0 - (1.0 - params.gamma * params.beta) * prod
    p = np.clip(p, 0.0, 1.0)
    return p[0] if single else p


def alo_probability(params: EpidemicParams, u: int, tau) -> float:
    tau = np.asarray(tau)
    prod = 1.0
    for v in np.flatnonzero(params.alpha[u]):
        prod *= 1.0 - params.gamma * params.alpha[u, v] * float(tau[v] > 0)
    return 1.0 - (1.0 - params.gamma * params.beta[u]) * prod


def lt_probabilities(params: EpidemicParams, tau) -> np.ndarray:
    """``sigma_ab(g (beta_u + sum_v g alpha[u, v] tau[v])) * T_u`` for every user."""
    tau, single = _as_batch(tau)
    act = (tau > 0).astype(np.float64)
    g = params.gamma
    arg = g * (params.beta + act @ (g * params.alpha).T)
    p = sigmoid_ab(arg, params.a, params.b) * params.temporal_factor()
    return p[0] if single else p


def lt_probability(params: EpidemicParams, u: int, tau) -> float:
    tau = np.asarray(tau)
    g = params.gamma
    s = sum(g * params.alpha[u, v] * float(tau[v] > 0) for v in np.flatnonzero(params.alpha[u]))
    return float(sigmoid_ab(g * (params.beta[u] + s), params.a, params.b)) * \
        float(params.temporal_factor()[u])


def epidemic_predict(params: EpidemicParams, tau, kind: str) -> np.ndarray:
    """Predict a reaction where the model probability is strictly above 0.5."""
    if kind == "alo":
        p = alo_probabilities(params, tau)
    elif kind == "lt":
        p = lt_probabilities(params, tau)
    else:
        raise ValueError(f"unknown epidemic model {kind!r}")
    return (p > 0.5).astype(np.uint8)


class EpidemicPredictor:
    def __init__(self, kind: str, params: EpidemicParams):
        self.kind = kind
        self.name = kind
        self.params = params

    def predict(self, tau):
        return epidemic_predict(self.params, tau, self.kind)

    def save(self, path) -> None:
        p = self.params
        save_tensors(path, {"beta": p.beta, "alpha": p.alpha},
                     {"model": self.kind, "gamma": repr(p.gamma), "a": repr(p.a),
                      "b": repr(p.b)})

    @classmethod
    def load(cls, path) -> "EpidemicPredictor":
        t, meta = load_tensors(path)
        params = EpidemicParams(t["beta"], t["alpha"], float(meta["gamma"]), float(meta["a"]),
                                float(meta["b"]))
        return cls(meta["model"], params)
