"""Dense layers with hand-written backward passes, MSE, Adam and gradient checking.

Every layer follows the same small contract: ``forward(x)`` caches whatever it
needs, ``backward(grad)`` returns the gradient w.r.t. its input and fills
``layer.grads`` (same keys and shapes as ``layer.params``). Inputs are always
batched along axis 0.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def init_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def named_params(self, prefix: str = ""):
        for k, v in self.params.items():
            yield prefix + k, v, self.grads.get(k)


class Tanh(Layer):
    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, grad):
        return grad * (1.0 - self._y * self._y)


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class Dense(Layer):
    """``y = x @ (W * M).T + b`` with ``W[out, in]``; ``M`` is an optional fixed 0/1 mask.

    The mask zeroes both the forward contribution and the weight gradient, so
    masked weights never move from their initial value (they are also zeroed
    at construction). Masks sparser than ``SPARSE_BELOW`` are evaluated as
    sparse products.
    """

    SPARSE_BELOW = 0.05

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, *, mask=None,
                 bias: bool = True, dtype=np.float64):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        w = init_uniform(rng, (n_out, n_in), n_in, dtype)
        self._support = None
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (n_out, n_in):
                raise ValueError(f"mask shape {mask.shape} != {(n_out, n_in)}")
            w = w * mask
            if mask.mean() < self.SPARSE_BELOW:
                self._support = np.nonzero(mask)
        self.mask = mask
        self.params["W"] = w
        if bias:
            self.params["b"] = init_uniform(rng, (n_out,), n_in, dtype)

    def effective_weight(self) -> np.ndarray:
        w = self.params["W"]
        return w if self.mask is None else w * self.mask

    def _sparse_weight(self):
        from scipy.sparse import csr_matrix

        rows, cols = self._support
        return csr_matrix((self.params["W"][rows, cols], (rows, cols)),
                          shape=(self.n_out, self.n_in))

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Dense expected {self.n_in} inputs, got {x.shape[-1]}")
        self._x = x
        if self._support is not None:
            y = np.asarray((self._sparse_weight() @ x.T).T)
        else:
            y = x @ self.effective_weight().T
        if "b" in self.params:
            y = y + self.params["b"]
        return y

    def backward(self, grad):
        if "b" in self.params:
            self.grads["b"] = grad.sum(axis=0)
        if self._support is not None:
            rows, cols = self._support
            gw = np.zeros_like(self.params["W"])
            gw[rows, cols] = np.einsum("bk,bk->k", grad[:, rows], self._x[:, cols])
            self.grads["W"] = gw
            return np.asarray((self._sparse_weight().T @ grad.T).T)
        gw = grad.T @ self._x
        if self.mask is not None:
            gw = gw * self.mask
        self.grads["W"] = gw
        return grad @ self.effective_weight()


class Elementwise(Layer):
    """One weight per coordinate: ``y[:, u] = w[u] * x[:, u]``."""

    def __init__(self, n: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.params["w"] = init_uniform(rng, (n,), 1, dtype)

    def forward(self, x):
        self._x = x
        return x * self.params["w"]

    def backward(self, grad):
        self.grads["w"] = (grad * self._x).sum(axis=0)
        return grad * self.params["w"]


class Conv3x3(Layer):
    """Stride-1, zero-padded 3x3 convolution on ``(batch, channels, H, W)``."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        fan_in = c_in * 9
        self.params["W"] = init_uniform(rng, (c_out, c_in, 3, 3), fan_in, dtype)
        self.params["b"] = init_uniform(rng, (c_out,), fan_in, dtype)

    @staticmethod
    def _windows(x):
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        # (n, c, h, w, 3, 3)
        return sliding_window_view(xp, (3, 3), axis=(2, 3))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ValueError(f"Conv3x3 expected (n, {self.c_in}, h, w), got {x.shape}")
        self._win = self._windows(x)
        y = np.tensordot(self._win, self.params["W"], axes=([1, 4, 5], [1, 2, 3]))
        # tensordot leaves (n, h, w, c_out)
        return y.transpose(0, 3, 1, 2) + self.params["b"][None, :, None, None]

    def backward(self, grad):
        self.grads["W"] = np.tensordot(grad, self._win, axes=([0, 2, 3], [0, 2, 3]))
        self.grads["b"] = grad.sum(axis=(0, 2, 3))
        # full correlation of grad with the flipped kernel
        flipped = self.params["W"][:, :, ::-1, ::-1]
        gwin = self._windows(grad)
        dx = np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3]))
        return dx.transpose(0, 3, 1, 2)


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_params(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}{i}.")


class ResidualBlock(Layer):
    """conv-relu-conv, identity skip, relu after the sum."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.body = Sequential([Conv3x3(channels, channels, rng, dtype), ReLU(),
                                Conv3x3(channels, channels, rng, dtype)])
        self.out = ReLU()

    def forward(self, x):
        return self.out.forward(self.body.forward(x) + x)

    def backward(self, grad):
        g = self.out.backward(grad)
        return self.body.backward(g) + g

    def named_params(self, prefix=""):
        yield from self.body.named_params(prefix + "body.")


class Inflate(Layer):
    """``(n, d)`` -> ``(n, 1, d, d)``: every row of the grid is a copy of the vector."""

    def forward(self, x):
        self._d = x.shape[1]
        return np.broadcast_to(x[:, None, None, :], (x.shape[0], 1, self._d, self._d)).copy()

    def backward(self, grad):
        return grad[:, 0].sum(axis=1)


class RowMeanPool(Layer):
    """``(n, c, h, w)`` -> ``(n, c * w)`` averaging over the row axis."""

    def forward(self, x):
        self._shape = x.shape
        n, c, h, w = x.shape
        return x.mean(axis=2).reshape(n, c * w)

    def backward(self, grad):
        n, c, h, w = self._shape
        g = grad.reshape(n, c, 1, w) / h
        return np.broadcast_to(g, self._shape).copy()


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def sigmoid_ab(x, a: float, b: float):
    """``1 / (1 + exp(-a (b - x)))``; decreasing in ``x`` when ``a > 0``."""
    z = -a * (b - np.asarray(x, dtype=np.float64))
    # split by sign so large |z| never overflows
    out = np.empty_like(z)
    pos = z >= 0
    ez = np.exp(-z[pos])
    out[pos] = ez / (1.0 + ez)
    out[~pos] = 1.0 / (1.0 + np.exp(z[~pos]))
    return out if out.ndim else float(out)


def erfc_half_transform(t_post: float, mu: float, sigma: float) -> float:
    """Log-normal CDF of ``t_post``: ``0.5 * erfc(-(ln t - mu) / (sigma sqrt 2))``."""
    if t_post <= 0:
        raise ValueError("t_post must be positive")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return 0.5 * math.erfc(-(math.log(t_post) - mu) / (sigma * math.sqrt(2.0)))


@dataclass
class Adam:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {k!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def collect(layer: Layer) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Flatten a layer tree into ``(params, grads)`` dicts keyed by dotted path."""
    params, grads = {}, {}
    for name, p, g in layer.named_params():
        params[name] = p
        if g is not None:
            grads[name] = g
    return params, grads


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    checked: int

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def grad_check(layer: Layer, x: np.ndarray, tolerance: float = 1e-6, *, step: float = 1e-5,
               max_entries: int = 64, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences on the loss ``sum(y * r)``.

    ``r`` is a fixed random projection so every output coordinate contributes.
    At most ``max_entries`` coordinates per tensor are probed (chosen by ``seed``).
    The relative error is ``|a - n| / max(|a| + |n|, 1e-8)``.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    y = layer.forward(x)
    r = rng.standard_normal(y.shape)

    def loss(inp):
        return float(np.sum(layer.forward(inp) * r))

    layer.forward(x)
    dx = layer.backward(r)
    params, grads = collect(layer)
    analytic = dict(grads)
    analytic["<input>"] = dx.copy()
    analytic = {k: v.copy() for k, v in analytic.items()}

    worst, max_err, count = "", 0.0, 0
    targets = list(params.items()) + [("<input>", x)]
    for name, arr in targets:
        flat = arr.reshape(-1)
        n = flat.size
        idx = rng.choice(n, size=min(n, max_entries), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lp = loss(x)
            flat[i] = orig - step
            lm = loss(x)
            flat[i] = orig
            num = (lp - lm) / (2 * step)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - num) / max(abs(a) + abs(num), 1e-8)
            count += 1
            if err > max_err:
                max_err, worst = err, f"{name}[{i}]"
    return GradCheckReport(max_err, worst, count)


_MAGIC = b"CPNT"
_VERSION = 1
_DTYPES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("<i8"): 2, np.dtype("bool"): 3}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    """Write a named-tensor container (little endian, versioned header)."""
    meta = meta or {}
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, len(meta), len(tensors)))
        for k, v in sorted(meta.items()):
            for s in (k, v):
                b = s.encode()
                fh.write(struct.pack("<I", len(b)) + b)
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            dt = arr.dtype.newbyteorder("<") if arr.dtype.kind in "fi" else arr.dtype
            if dt not in _DTYPES:
                raise TypeError(f"unsupported dtype {arr.dtype} for {name!r}")
            b = name.encode()
            fh.write(struct.pack("<I", len(b)) + b)
            fh.write(struct.pack("<BI", _DTYPES[dt], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype(dt).tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a tensor container")
    version, n_meta, n_tensors = struct.unpack_from("<III", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off = 16

    def read_str():
        nonlocal off
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        s = data[off:off + n].decode()
        off += n
        return s

    meta = {}
    for _ in range(n_meta):
        k = read_str()
        meta[k] = read_str()
    tensors = {}
    for _ in range(n_tensors):
        name = read_str()
        code, ndim = struct.unpack_from("<BI", data, off)
        off += 5
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        dt = _DTYPES_INV[code]
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(shape).copy()
        off += count * dt.itemsize
        tensors[name] = arr
    return tensors, meta
