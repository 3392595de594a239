"""Fixed-width time windows, chronological splits and the +-1 noise encoding."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .ingest import PostRecord

DEFAULT_DELTA_T = 12 * 3600


@dataclass
class SliceDataset:
    """Per-window activity matrices over an ordered user list.

    ``inputs[i, u]`` is 1 if user u posted anything in window i, ``targets[i, u]``
    if u reacted (retweet, reply, mention) in window i. Supervised pairs are
    ``(inputs[i], targets[i + 1])``. ``counts`` holds raw post counts per
    window and is only used for statistics.
    """

    users: list[str]
    delta_t: int
    inputs: np.ndarray
    targets: np.ndarray
    train_end: int
    val_end: int
    t0: int = 0
    counts: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.uint8)
        self.targets = np.asarray(self.targets, dtype=np.uint8)
        if self.inputs.shape != self.targets.shape or self.inputs.shape[1] != len(self.users):
            raise ValueError("inputs/targets must both be (n_slices, n_users)")
        if not 0 <= self.train_end <= self.val_end <= self.n_slices:
            raise ValueError(f"bad split ({self.train_end}, {self.val_end}, {self.n_slices})")

    @property
    def n_slices(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_users(self) -> int:
        return self.inputs.shape[1]

    def pairs(self, start: int, stop: int) -> tuple[np.ndarray, np.ndarray]:
        """Input/target arrays for pair indices ``start <= i < stop``.

        Pair i is ``(inputs[i], targets[i + 1])``, so the last usable index is
        ``n_slices - 2``; ``stop`` is clipped to it.
        """
        stop = min(stop, self.n_slices - 1)
        return self.inputs[start:stop], self.targets[start + 1:stop + 1]

    def train_pairs(self):
        return self.pairs(0, self.train_end)

    def val_pairs(self):
        return self.pairs(self.train_end, self.val_end)

    def test_pairs(self):
        return self.pairs(self.val_end, self.n_slices)

    @property
    def train_range(self) -> range:
        return range(0, self.train_end)

    @property
    def val_range(self) -> range:
        return range(self.train_end, self.val_end)

    @property
    def test_range(self) -> range:
        return range(self.val_end, self.n_slices - 1)

    def with_split(self, train_end: int, val_end: int) -> "SliceDataset":
        return SliceDataset(self.users, self.delta_t, self.inputs, self.targets, train_end,
                            val_end, self.t0, self.counts)


def split_chronological(n_slices: int) -> tuple[int, int, int]:
    """70/20/10 split indices ``(train_end, val_end, n)``."""
    if n_slices < 10:
        raise ValueError("need at least 10 slices for a 70/20/10 split")
    return (7 * n_slices) // 10, (9 * n_slices) // 10, n_slices


def slice_posts(posts: list[PostRecord], users: list[str], delta_t: int = DEFAULT_DELTA_T,
                t0: int | None = None) -> SliceDataset:
    """Bucket posts into windows ``[t0 + k dt, t0 + (k + 1) dt)``.

    ``t0`` defaults to the first post's timestamp. The trailing window is
    dropped unless the log reaches its end, so every window is full width.
    Posts by users outside ``users`` are ignored.
    """
    if delta_t <= 0:
        raise ValueError("delta_t must be positive")
    if not posts:
        raise ValueError("no posts to slice")
    if t0 is None:
        t0 = posts[0].timestamp
    last = max(p.timestamp for p in posts)
    n = (last - t0) // delta_t
    if n < 1:
        raise ValueError("log spans less than one full window")
    index = {u: i for i, u in enumerate(users)}
    inputs = np.zeros((n, len(users)), dtype=np.uint8)
    targets = np.zeros((n, len(users)), dtype=np.uint8)
    counts = np.zeros((n, len(users)), dtype=np.int32)
    for p in posts:
        u = index.get(p.author)
        k = (p.timestamp - t0) // delta_t
        if u is None or not 0 <= k < n:
            continue
        inputs[k, u] = 1
        counts[k, u] += 1
        if p.is_reaction:
            targets[k, u] = 1
    # logs shorter than 10 windows stay unsplit (all train); still usable for stats
    train_end, val_end, _ = split_chronological(n) if n >= 10 else (n, n, n)
    return SliceDataset(list(users), delta_t, inputs, targets, train_end, val_end, t0, counts)


@dataclass(frozen=True)
class NoiseEncoding:
    mean_one: float = 1.0
    mean_zero: float = -1.0
    variance: float = 0.01

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be non-negative")


def encode_clean(v: np.ndarray, enc: NoiseEncoding = NoiseEncoding()) -> np.ndarray:
    v = np.asarray(v)
    return np.where(v > 0, enc.mean_one, enc.mean_zero).astype(np.float64)


def encode_noise(v: np.ndarray, rng: np.random.Generator | int,
                 enc: NoiseEncoding = NoiseEncoding()) -> np.ndarray:
    """Replace ones by N(1, var) draws and zeros by N(-1, var) draws."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    base = encode_clean(v, enc)
    if enc.variance == 0:
        return base
    return base + rng.normal(0.0, np.sqrt(enc.variance), size=base.shape)


def class_density(targets: np.ndarray, rows=None) -> float:
    """Fraction of ones among ``targets[rows]``."""
    t = np.asarray(targets)
    if rows is not None:
        t = t[rows]
    if t.size == 0:
        raise ValueError("empty range")
    return float(t.mean())


_MAGIC = b"CPSL"
_VERSION = 1


def save_dataset(path, ds: SliceDataset) -> None:
    """Header (D, N, dt, t0, split, user list) then packed row-major bitsets."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIqqII", _VERSION, ds.n_users, ds.n_slices, ds.delta_t, ds.t0,
                             ds.train_end, ds.val_end))
        for u in ds.users:
            b = u.encode()
            fh.write(struct.pack("<I", len(b)) + b)
        fh.write(np.packbits(ds.inputs, axis=1).tobytes())
        fh.write(np.packbits(ds.targets, axis=1).tobytes())


def load_dataset(path) -> SliceDataset:
    data = open(path, "rb").read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a slice dataset file")
    version, d, n, dt, t0, tr, va = struct.unpack_from("<IIIqqII", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<IIIqqII")
    users = []
    for _ in range(d):
        (k,) = struct.unpack_from("<I", data, off)
        off += 4
        users.append(data[off:off + k].decode())
        off += k
    row = (d + 7) // 8
    size = row * n
    inputs = np.unpackbits(np.frombuffer(data, np.uint8, size, off).reshape(n, row), axis=1,
                           count=d)
    targets = np.unpackbits(np.frombuffer(data, np.uint8, size, off + size).reshape(n, row),
                            axis=1, count=d)
    return SliceDataset(users, dt, inputs, targets, tr, va, t0)


def export_csv(path, ds: SliceDataset) -> None:
    """One row per (slice, user) with a 1 in either matrix."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slice", "split", "user", "active", "reacted"])
        for i in range(ds.n_slices):
            split = "train" if i < ds.train_end else "val" if i < ds.val_end else "test"
            for u in np.flatnonzero(ds.inputs[i] | ds.targets[i]):
                w.writerow([i, split, ds.users[u], int(ds.inputs[i, u]), int(ds.targets[i, u])])
