"""Dense feed-forward networks with hand-written backprop over a flat parameter vector.

Every network keeps all of its weights in one contiguous float64 array.  Layer
tensors are views into that array, described by an immutable :class:`Layout`.
Functions that evaluate the network accept an optional ``params`` argument so
callers can evaluate perturbed parameters (``theta + delta``) without touching
the network itself.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyBatchError, FormatError, NonFiniteError, ShapeError

ACTIVATIONS = ("relu", "tanh")
HEADS = ("softmax", "regression")

PARAMS_MAGIC = b"MBPA"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class Layout:
    """Ordered ``(name, shape)`` descriptors mapping flat ranges to tensors."""

    entries: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        norm = tuple((str(name), tuple(int(d) for d in shape)) for name, shape in self.entries)
        object.__setattr__(self, "entries", norm)

    @property
    def size(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.entries)

    def slices(self) -> dict[str, slice]:
        out, offset = {}, 0
        for name, shape in self.entries:
            n = int(np.prod(shape))
            out[name] = slice(offset, offset + n)
            offset += n
        return out

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        if flat.shape != (self.size,):
            raise ShapeError(f"expected flat vector of length {self.size}, got shape {flat.shape}")
        sl = self.slices()
        return {name: flat[sl[name]].reshape(shape) for name, shape in self.entries}


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z, a, kind):
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / np.sum(e, axis=-1, keepdims=True)


class OutputNet:
    """Multi-layer perceptron with a softmax-classification or scalar-regression head.

    ``widths`` lists every layer width including input and output, e.g.
    ``[784, 100, 10]`` is one hidden layer of 100 units.  A regression head
    requires an output width of 1.
    """

    def __init__(self, widths: Sequence[int], activation: str = "relu", head: str = "softmax",
                 seed: int = 0, params: np.ndarray | None = None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ShapeError(f"need at least input and output widths >= 1, got {widths}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        if head == "regression" and widths[-1] != 1:
            raise ShapeError("regression head needs output width 1")
        self.widths = tuple(widths)
        self.activation = activation
        self.head = head
        self.seed = seed
        entries = []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            entries.append((f"dense{i}.W", (n_out, n_in)))
            entries.append((f"dense{i}.b", (n_out,)))
        self.layout = Layout(tuple(entries))
        if params is None:
            params = self._init_params(seed)
        else:
            params = np.array(params, dtype=np.float64)
            if params.shape != (self.layout.size,):
                raise ShapeError(f"params length {params.shape} != {self.layout.size}")
        self.params = params

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        flat = np.empty(self.layout.size)
        sl = self.layout.slices()
        for name, shape in self.layout.entries:
            fan_in = self.widths[int(name[5:name.index(".")])]
            bound = 1.0 / np.sqrt(fan_in)
            flat[sl[name]] = rng.uniform(-bound, bound, size=int(np.prod(shape)))
        return flat

    # -- structure -----------------------------------------------------------

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def config(self) -> dict:
        return {"widths": list(self.widths), "activation": self.activation,
                "head": self.head, "seed": self.seed}

    def copy(self) -> "OutputNet":
        return OutputNet(self.widths, self.activation, self.head, self.seed, self.params.copy())

    def mask(self, which: str | np.ndarray | None = "all") -> np.ndarray:
        """Boolean mask over the flat parameters: ``"all"``, ``"last_layer"`` or an explicit array."""
        if which is None or (isinstance(which, str) and which == "all"):
            return np.ones(self.layout.size, dtype=bool)
        if isinstance(which, str):
            if which != "last_layer":
                raise ValueError(f"unknown mask {which!r}")
            m = np.zeros(self.layout.size, dtype=bool)
            sl = self.layout.slices()
            last = self.n_layers - 1
            m[sl[f"dense{last}.W"]] = True
            m[sl[f"dense{last}.b"]] = True
            return m
        m = np.asarray(which, dtype=bool)
        if m.shape != (self.layout.size,):
            raise ShapeError(f"mask length {m.shape} != {self.layout.size}")
        return m

    # -- evaluation ----------------------------------------------------------

    def _as_batch(self, h):
        h = np.asarray(h, dtype=np.float64)
        single = h.ndim == 1
        if single:
            h = h[None, :]
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ShapeError(f"input width {h.shape[-1]} != network input width {self.input_dim}")
        return h, single

    def _layers(self, params):
        v = self.layout.views(self.params if params is None else params)
        return [(v[f"dense{i}.W"], v[f"dense{i}.b"]) for i in range(self.n_layers)]

    def _forward_cache(self, h, params, check=False):
        layers = self._layers(params)
        acts, pres = [h], []
        a = h
        for i, (W, b) in enumerate(layers):
            z = a @ W.T + b
            if check and not np.all(np.isfinite(z)):
                raise NonFiniteError(f"dense{i}")
            pres.append(z)
            a = z if i == len(layers) - 1 else _activate(z, self.activation)
            acts.append(a)
        return layers, pres, acts

    def logits(self, h, params=None) -> np.ndarray:
        """Raw output-layer values (logits, or the regression output)."""
        hb, single = self._as_batch(h)
        out = self._forward_cache(hb, params)[2][-1]
        return out[0] if single else out

    def forward(self, h, params=None):
        """Class probabilities (softmax head) or scalar predictions (regression head)."""
        hb, single = self._as_batch(h)
        out = self._forward_cache(hb, params)[2][-1]
        if self.head == "softmax":
            out = softmax(out)
            return out[0] if single else out
        out = out[:, 0]
        return float(out[0]) if single else out

    def per_example_loss(self, inputs, targets, params=None) -> np.ndarray:
        hb, _ = self._as_batch(inputs)
        out = self._forward_cache(hb, params)[2][-1]
        return self._losses(out, targets)

    def _losses(self, out, targets):
        if self.head == "softmax":
            t = np.asarray(targets, dtype=np.int64).reshape(-1)
            return -log_softmax(out)[np.arange(len(t)), t]
        t = np.asarray(targets, dtype=np.float64).reshape(-1)
        return 0.5 * (out[:, 0] - t) ** 2

    def loss_and_grad(self, inputs, targets, weights=None, params=None, mask=None):
        """Weighted loss sum and its gradient with respect to the flat parameters.

        Softmax heads use negative log-likelihood computed from logits via
        log-sum-exp; regression heads use ``0.5 * (y - t)**2``.  The loss is
        ``sum_i weights[i] * loss_i`` (weights default to 1).  Gradient entries
        outside ``mask`` are exactly zero.
        """
        hb, _ = self._as_batch(inputs)
        n = hb.shape[0]
        if n == 0:
            raise EmptyBatchError("loss_and_grad needs at least one example")
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape != (n,):
            raise ShapeError(f"{w.shape[0]} weights for {n} examples")
        if np.any(w < 0):
            raise ValueError("example weights must be nonnegative")
        m = self.mask(mask)

        layers, pres, acts = self._forward_cache(hb, params, check=True)
        out = acts[-1]
        loss = float(np.dot(w, self._losses(out, targets)))

        if self.head == "softmax":
            t = np.asarray(targets, dtype=np.int64).reshape(-1)
            delta = softmax(out)
            delta[np.arange(n), t] -= 1.0
        else:
            t = np.asarray(targets, dtype=np.float64).reshape(-1)
            delta = (out[:, 0] - t)[:, None]
        delta = delta * w[:, None]

        grad = np.zeros(self.layout.size)
        sl = self.layout.slices()
        for i in range(self.n_layers - 1, -1, -1):
            W, _ = layers[i]
            grad[sl[f"dense{i}.W"]] = (delta.T @ acts[i]).ravel()
            grad[sl[f"dense{i}.b"]] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ W) * _activate_grad(pres[i - 1], acts[i], self.activation)
        grad[~m] = 0.0
        return loss, grad

    # -- persistence ---------------------------------------------------------

    def save_params(self, path) -> None:
        save_params(path, self.layout, self.params)

    def load_params(self, path) -> None:
        layout, values = load_params(path)
        if layout != self.layout:
            raise FormatError("parameter file layout does not match this network")
        self.params = values


def finite_diff_grad(loss_fn, params: np.ndarray, mask: np.ndarray | None = None,
                     step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn(params) -> float`` on masked coordinates."""
    if step <= 0:
        raise ValueError("step must be positive")
    params = np.asarray(params, dtype=np.float64)
    m = np.ones(params.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    grad = np.zeros_like(params)
    probe = params.copy()
    for j in np.flatnonzero(m):
        orig = probe[j]
        probe[j] = orig + step
        up = loss_fn(probe)
        probe[j] = orig - step
        down = loss_fn(probe)
        probe[j] = orig
        grad[j] = (up - down) / (2.0 * step)
    return grad


def net_finite_diff_grad(net: OutputNet, inputs, targets, weights=None, mask=None,
                         step: float = 1e-5, params=None) -> np.ndarray:
    """Finite-difference counterpart of :meth:`OutputNet.loss_and_grad`."""
    base = net.params if params is None else params
    w = None if weights is None else np.asarray(weights, dtype=np.float64)

    def f(p):
        losses = net.per_example_loss(inputs, targets, params=p)
        return float(np.sum(losses if w is None else w * losses))

    return finite_diff_grad(f, base, net.mask(mask), step)


class EmbeddingNet:
    """The key/query map f_gamma: identity, or a frozen stack of dense layers.

    A frozen stack applies the nonlinearity after every layer and has no
    trainable state from the point of view of local adaptation.
    """

    def __init__(self, mode: str = "identity", layers: Sequence[tuple[np.ndarray, np.ndarray]] = (),
                 activation: str = "relu"):
        if mode not in ("identity", "frozen"):
            raise ValueError(f"unknown embedding mode {mode!r}")
        if mode == "identity" and layers:
            raise ValueError("identity embedding takes no layers")
        self.mode = mode
        self.activation = activation
        self.layers = [(np.array(W, dtype=np.float64), np.array(b, dtype=np.float64)) for W, b in layers]
        for W, _ in self.layers:
            W.flags.writeable = False

    @classmethod
    def from_hidden_layers(cls, net: OutputNet) -> "EmbeddingNet":
        """Freeze every layer of ``net`` except the last one."""
        layers = net._layers(None)[:-1]
        if not layers:
            return cls("identity")
        return cls("frozen", [(W.copy(), b.copy()) for W, b in layers], net.activation)

    @property
    def params(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0)
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def output_dim(self, input_dim: int) -> int:
        return self.layers[-1][0].shape[0] if self.layers else input_dim

    def __call__(self, x):
        if self.mode == "identity":
            return np.asarray(x, dtype=np.float64)
        a = np.asarray(x, dtype=np.float64)
        for W, b in self.layers:
            if a.shape[-1] != W.shape[1]:
                raise ShapeError(f"embedding input width {a.shape[-1]} != {W.shape[1]}")
            a = _activate(a @ W.T + b, self.activation)
        return a


def save_params(path, layout: Layout, values: np.ndarray) -> None:
    """Write ``MBPA`` header, layout descriptor and little-endian float64 values."""
    values = np.asarray(values, dtype="<f8")
    if values.shape != (layout.size,):
        raise ShapeError("values do not match layout")
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<II", PARAMS_VERSION, len(layout.entries)))
        for name, shape in layout.entries:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", len(shape)))
            f.write(struct.pack(f"<{len(shape)}I", *shape))
        f.write(values.tobytes())


def load_params(path) -> tuple[Layout, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != PARAMS_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {PARAMS_MAGIC!r}")
    try:
        version, n = struct.unpack_from("<II", data, 4)
        if version != PARAMS_VERSION:
            raise FormatError(f"unsupported parameter file version {version}")
        pos, entries = 12, []
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + ln].decode("utf-8")
            pos += 4 + ln
            (ndim,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
            pos += 4 + 4 * ndim
            entries.append((name, tuple(shape)))
    except struct.error as e:
        raise FormatError(f"truncated parameter header: {e}") from None
    layout = Layout(tuple(entries))
    body = data[pos:]
    if len(body) != 8 * layout.size:
        raise FormatError(f"expected {layout.size} float64 values, found {len(body) / 8:g}")
    return layout, np.frombuffer(body, dtype="<f8").astype(np.float64)
