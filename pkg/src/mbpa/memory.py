"""Fixed-capacity episodic key/value memory with exact k-nearest-neighbour lookup."""
from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMemoryError, FormatError, ShapeError

MEMORY_MAGIC = b"MBPM"
MEMORY_VERSION = 1
_VALUE_KINDS = {"class": 0, "scalar": 1}


@dataclass
class Context:
    """K retrieved neighbours of ``query``, nearest first.

    ``weights`` are the inverse-quadratic kernel values normalised to sum to one;
    ``raw_weights`` keeps the unnormalised kernel values.
    """

    query: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    weights: np.ndarray
    raw_weights: np.ndarray
    distances: np.ndarray  # squared euclidean
    indices: np.ndarray    # insert-indices of the neighbours

    def __len__(self):
        return len(self.weights)


def kernel_weights(sq_dist: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``1/(eps + d^2)`` kernel values and their normalised form.

    With ``epsilon == 0`` exact matches would get infinite weight; in that case
    the exact matches share all of the mass equally.
    """
    sq_dist = np.asarray(sq_dist, dtype=np.float64)
    with np.errstate(divide="ignore"):
        raw = 1.0 / (epsilon + sq_dist)
    inf = np.isinf(raw)
    if inf.any():
        w = inf / inf.sum()
    else:
        w = raw / raw.sum()
    return raw, w


class EpisodicMemory:
    """Circular buffer of ``(key, value)`` pairs; once full the oldest entry is overwritten.

    ``capacity == 0`` gives a disabled memory that silently drops appends and
    always looks empty.  Lookups and appends are serialised by a lock so a
    reader never sees a half-written entry.
    """

    def __init__(self, capacity: int, key_dim: int, epsilon: float = 1e-3, value_kind: str = "class"):
        if capacity < 0:
            raise ValueError("capacity must be nonnegative")
        if key_dim < 1:
            raise ShapeError("key_dim must be positive")
        if epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if value_kind not in _VALUE_KINDS:
            raise ValueError(f"value_kind must be one of {sorted(_VALUE_KINDS)}")
        self.capacity = int(capacity)
        self.key_dim = int(key_dim)
        self.epsilon = float(epsilon)
        self.value_kind = value_kind
        self._keys = np.zeros((self.capacity, self.key_dim))
        self._values = np.zeros(self.capacity, dtype=np.int64 if value_kind == "class" else np.float64)
        self._order = np.zeros(self.capacity, dtype=np.int64)
        self._count = 0
        self._cursor = 0
        self._next_index = 0
        self._lock = threading.Lock()

    def __len__(self):
        return self._count

    @property
    def full(self) -> bool:
        return self._count == self.capacity

    def append(self, key, value) -> None:
        key = np.asarray(key, dtype=np.float64)
        if key.shape != (self.key_dim,):
            raise ShapeError(f"key shape {key.shape} != ({self.key_dim},)")
        self.extend(key[None, :], [value])

    def extend(self, keys, values) -> None:
        """Append rows of ``keys`` with matching ``values`` in order."""
        keys = np.asarray(keys, dtype=np.float64)
        if keys.ndim != 2 or keys.shape[1] != self.key_dim:
            raise ShapeError(f"keys shape {keys.shape} incompatible with key_dim {self.key_dim}")
        values = np.asarray(values, dtype=self._values.dtype).reshape(-1)
        if len(values) != len(keys):
            raise ShapeError(f"{len(keys)} keys but {len(values)} values")
        if self.capacity == 0:
            with self._lock:
                self._next_index += len(keys)
            return
        with self._lock:
            for key, value in zip(keys, values):
                self._keys[self._cursor] = key
                self._values[self._cursor] = value
                self._order[self._cursor] = self._next_index
                self._next_index += 1
                self._cursor = (self._cursor + 1) % self.capacity
                self._count = min(self._count + 1, self.capacity)

    def entries(self):
        """Stored ``(keys, values, insert_indices)`` in insertion order (oldest first)."""
        with self._lock:
            return self._snapshot()

    def _snapshot(self):
        n = self._count
        if n < self.capacity:
            idx = np.arange(n)
        else:
            idx = (self._cursor + np.arange(n)) % self.capacity
        return self._keys[idx].copy(), self._values[idx].copy(), self._order[idx].copy()

    def lookup(self, query, k: int) -> Context:
        """Exact ``min(k, len(self))`` nearest entries by euclidean distance.

        Ties in distance go to the older entry (smaller insert-index).
        """
        query = self._check_query(query, k)
        with self._lock:
            n = self._count
            if n == 0:
                raise EmptyMemoryError("lookup on empty memory")
            keys, values, order = self._keys[:n], self._values[:n], self._order[:n]
            diff = keys - query
            d2 = np.einsum("ij,ij->i", diff, diff)
            kk = min(k, n)
            if kk < n:
                cand = np.argpartition(d2, kk - 1)[:kk]
                # pull in every entry tied with the kth distance so the tie-break sees all of them
                cand = np.flatnonzero(d2 <= d2[cand].max())
            else:
                cand = np.arange(n)
            sel = cand[np.lexsort((order[cand], d2[cand]))][:kk]
            ctx_keys, ctx_values, ctx_order = keys[sel].copy(), values[sel].copy(), order[sel].copy()
            ctx_d2 = d2[sel]
        raw, w = kernel_weights(ctx_d2, self.epsilon)
        return Context(query, ctx_keys, ctx_values, w, raw, ctx_d2, ctx_order)

    def _check_query(self, query, k):
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.key_dim,):
            raise ShapeError(f"query shape {query.shape} != ({self.key_dim},)")
        if k < 1:
            raise ValueError("k must be >= 1")
        return query

    def sample(self, k: int, rng: np.random.Generator, query=None) -> Context:
        """``k`` entries drawn uniformly without replacement, uniform weights."""
        with self._lock:
            n = self._count
            if n == 0:
                raise EmptyMemoryError("sample from empty memory")
            sel = np.sort(rng.choice(n, size=min(k, n), replace=False))
            keys, values, order = self._keys[sel].copy(), self._values[sel].copy(), self._order[sel].copy()
        w = np.full(len(sel), 1.0 / len(sel))
        q = np.zeros(self.key_dim) if query is None else np.asarray(query, dtype=np.float64)
        d2 = np.einsum("ij,ij->i", keys - q, keys - q)
        return Context(q, keys, values, w, np.ones(len(sel)), d2, order)

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        """Binary dump: header then entries oldest-first.

        Header: ``MBPM``, version u32, key_dim u32, capacity u64, count u64,
        epsilon f64, value kind u32 (0 class-id as i64, 1 scalar as f64).
        Entry: key f64 * key_dim, value, insert-index u64.  Little-endian.
        """
        keys, values, order = self.entries()
        vfmt = "<q" if self.value_kind == "class" else "<d"
        with open(path, "wb") as f:
            f.write(MEMORY_MAGIC)
            f.write(struct.pack("<IIQQdI", MEMORY_VERSION, self.key_dim, self.capacity,
                                len(keys), self.epsilon, _VALUE_KINDS[self.value_kind]))
            for key, value, idx in zip(keys, values, order):
                f.write(np.asarray(key, dtype="<f8").tobytes())
                f.write(struct.pack(vfmt, value.item()))
                f.write(struct.pack("<Q", int(idx)))

    @classmethod
    def load(cls, path) -> "EpisodicMemory":
        with open(path, "rb") as f:
            data = f.read()
        if data[:4] != MEMORY_MAGIC:
            raise FormatError(f"bad magic {data[:4]!r}, expected {MEMORY_MAGIC!r}")
        header = struct.Struct("<IIQQdI")
        if len(data) < 4 + header.size:
            raise FormatError("truncated memory header")
        version, key_dim, capacity, count, eps, kind = header.unpack_from(data, 4)
        if version != MEMORY_VERSION:
            raise FormatError(f"unsupported memory file version {version}")
        kinds = {v: k for k, v in _VALUE_KINDS.items()}
        if kind not in kinds or count > capacity:
            raise FormatError("inconsistent memory header")
        rec = 8 * key_dim + 16
        body = data[4 + header.size:]
        if len(body) != rec * count:
            raise FormatError(f"expected {count} entries of {rec} bytes, found {len(body)} bytes")
        mem = cls(capacity, key_dim, eps, kinds[kind])
        vfmt = "<q" if kinds[kind] == "class" else "<d"
        for i in range(count):
            chunk = body[i * rec:(i + 1) * rec]
            key = np.frombuffer(chunk[:8 * key_dim], dtype="<f8")
            (value,) = struct.unpack(vfmt, chunk[8 * key_dim:8 * key_dim + 8])
            (idx,) = struct.unpack("<Q", chunk[-8:])
            mem._keys[i] = key
            mem._values[i] = value
            mem._order[i] = idx
        mem._count = count
        mem._cursor = count % capacity if capacity else 0
        mem._next_index = int(mem._order[:count].max()) + 1 if count else 0
        return mem


def brute_force_knn(memory: EpisodicMemory, query, k: int) -> Context:
    """Reference lookup: plain Python scan and full sort, no numpy vector ops.

    Used as an independent oracle for :meth:`EpisodicMemory.lookup`.
    """
    keys, values, order = memory.entries()
    if len(keys) == 0:
        raise EmptyMemoryError("lookup on empty memory")
    q = [float(v) for v in np.asarray(query, dtype=np.float64)]
    if len(q) != memory.key_dim:
        raise ShapeError(f"query length {len(q)} != {memory.key_dim}")
    if k < 1:
        raise ValueError("k must be >= 1")
    scored = []
    for row, key in enumerate(keys.tolist()):
        d2 = 0.0
        for a, b in zip(key, q):
            d2 += (a - b) * (a - b)
        scored.append((d2, int(order[row]), row))
    scored.sort()
    chosen = scored[:min(k, len(scored))]
    eps = memory.epsilon
    raw = [math.inf if eps + d2 == 0.0 else 1.0 / (eps + d2) for d2, _, _ in chosen]
    if any(math.isinf(r) for r in raw):
        n_inf = sum(math.isinf(r) for r in raw)
        w = [1.0 / n_inf if math.isinf(r) else 0.0 for r in raw]
    else:
        total = math.fsum(raw)
        w = [r / total for r in raw]
    rows = [row for _, _, row in chosen]
    return Context(
        query=np.array(q),
        keys=keys[rows],
        values=values[rows],
        weights=np.array(w),
        raw_weights=np.array(raw),
        distances=np.array([d2 for d2, _, _ in chosen]),
        indices=np.array([idx for _, idx, _ in chosen], dtype=np.int64),
    )
