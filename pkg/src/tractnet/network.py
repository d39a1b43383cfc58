"""Feedforward ReLU networks: forward pass, losses, Adam, and the model file.

Hidden layers use ReLU, the output layer is linear.  Datasets are stored
row-wise (``N x n0``); on a tape the batch is laid out column-wise so that each
layer is a single ``W @ X + b``.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

FORMAT_TAG = "tractnet-model"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Malformed model file; ``offset`` is the byte offset of the bad line."""

    def __init__(self, msg: str, offset: int):
        self.offset = offset
        super().__init__(f"{msg} (at byte {offset})")


class Network:
    """Layers ``(W, b)`` for l = 1..L+1, ``W`` of shape ``(n_l, n_{l-1})``."""

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        self.weights = [np.array(W, dtype=np.float64, ndmin=2) for W in weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in biases]
        for l, (W, b) in enumerate(zip(self.weights, self.biases), start=1):
            if W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {l}: W has {W.shape[0]} rows but b has {b.shape[0]} entries")
            if l > 1 and W.shape[1] != self.weights[l - 2].shape[0]:
                raise ValueError(
                    f"layer {l}: W has {W.shape[1]} columns, previous layer has {self.weights[l - 2].shape[0]} neurons"
                )

    @classmethod
    def init(cls, dims: Sequence[int], seed: int = 0) -> "Network":
        """Fan-in uniform init: entries in ``[-sqrt(1/n_{l-1}), sqrt(1/n_{l-1})]``."""
        rng = np.random.default_rng(seed)
        Ws, bs = [], []
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            k = np.sqrt(1.0 / n_in)
            Ws.append(rng.uniform(-k, k, size=(n_out, n_in)))
            bs.append(rng.uniform(-k, k, size=n_out))
        return cls(Ws, bs)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_hidden_layers(self) -> int:
        return len(self.weights) - 1

    @property
    def n_hidden(self) -> int:
        return sum(W.shape[0] for W in self.weights[:-1])

    def params(self) -> list[np.ndarray]:
        """Parameters in the canonical order W1, b1, W2, b2, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "Network":
        return Network([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def forward(self, x) -> "ForwardTrace":
        return forward(self, x)

    def predict(self, X) -> np.ndarray:
        """Outputs for a row-wise batch, shape ``(N, K)``."""
        H = np.atleast_2d(np.asarray(X, dtype=np.float64)).T
        if H.shape[0] != self.dims[0]:
            raise ValueError(f"input has {H.shape[0]} features, network expects {self.dims[0]}")
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            H = np.maximum(W @ H + b[:, None], 0.0)
        return (self.weights[-1] @ H + self.biases[-1][:, None]).T

    def __call__(self, x) -> np.ndarray:
        return self.forward(x).output

    def bind(self, tape: ad.Tape) -> "TapeNet":
        return TapeNet(self, tape)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Network) or self.dims != other.dims:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.params(), other.params()))

    def __repr__(self) -> str:
        return f"Network({'-'.join(map(str, self.dims))})"


@dataclass
class ForwardTrace:
    """Preactivations ``z[l]`` (l = 1..L+1) and post-activations ``xhat[l]`` (l = 0..L).

    Index 0 of ``z`` is unused (None) so that layer numbers match list indices.
    """

    z: list
    xhat: list

    @property
    def output(self) -> np.ndarray:
        return self.z[-1]


def forward(net: Network, x) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != net.dims[0]:
        raise ValueError(f"input has length {x.shape[0]}, network expects {net.dims[0]}")
    z: list = [None]
    xhat = [x]
    L = net.n_hidden_layers
    for l, (W, b) in enumerate(zip(net.weights, net.biases), start=1):
        zl = W @ xhat[-1] + b
        z.append(zl)
        if l <= L:
            xhat.append(np.maximum(zl, 0.0))
    return ForwardTrace(z, xhat)


class TapeNet:
    """A network's parameters recorded as tape leaves."""

    def __init__(self, net: Network, tape: ad.Tape):
        self.net = net
        self.tape = tape
        self.W = [tape.leaf(W) for W in net.weights]
        self.b = [tape.leaf(b.reshape(-1, 1)) for b in net.biases]

    @property
    def params(self) -> list[ad.Var]:
        out = []
        for W, b in zip(self.W, self.b):
            out += [W, b]
        return out

    def forward(self, X) -> ad.Var:
        """Output Var of shape ``(K, N)`` for row-wise inputs ``X`` (N x n0)."""
        H = self.tape.const(np.atleast_2d(np.asarray(X, dtype=np.float64)).T)
        if H.shape[0] != self.net.dims[0]:
            raise ad.ShapeError("forward", H.shape, self.W[0].shape)
        for W, b in zip(self.W[:-1], self.b[:-1]):
            H = ad.relu(ad.affine(W, H, b))
        return ad.affine(self.W[-1], H, self.b[-1])

    def grads_to_arrays(self, grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Reshape tape gradients (biases as columns) to match ``net.params()``."""
        return [g.reshape(p.shape) for g, p in zip(grads, self.net.params())]


# -------------------------------------------------------------------- losses


def mse_loss(tnet: TapeNet, X, Y) -> ad.Var:
    """Mean over samples (and outputs) of the squared prediction error."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("mse_loss: empty batch")
    pred = tnet.forward(X)
    Y = np.asarray(Y, dtype=np.float64).reshape(X.shape[0], -1).T
    return ad.mean(ad.square(ad.sub(pred, tnet.tape.const(Y))))


def check_taus(taus) -> np.ndarray:
    taus = np.asarray(taus, dtype=np.float64).reshape(-1)
    if taus.size == 0 or np.any(taus <= 0.0) or np.any(taus >= 1.0):
        raise ValueError("quantile levels must lie strictly inside (0, 1)")
    if np.any(np.diff(taus) <= 0.0):
        raise ValueError("quantile levels must be strictly increasing")
    return taus


def pinball_loss(preds: ad.Var, targets, taus) -> ad.Var:
    """Quantile loss averaged over the N samples and K levels.

    ``preds`` is ``(K, N)`` on a tape, ``targets`` holds N scalars.
    """
    taus = check_taus(taus)
    K, N = preds.shape
    if taus.size != K:
        raise ad.ShapeError("pinball_loss", preds.shape, taus.shape)
    tape = preds.tape
    v = np.broadcast_to(np.asarray(targets, dtype=np.float64).reshape(1, N), (K, N))
    err = ad.sub(tape.const(v), preds)
    T = np.broadcast_to(taus[:, None], (K, N))
    return ad.mean(ad.maximum(ad.mul(err, tape.const(T)), ad.mul(err, tape.const(T - 1.0))))


def pinball_np(preds: np.ndarray, targets, taus) -> float:
    """Plain-numpy pinball loss; ``preds`` is ``(N, K)``."""
    taus = check_taus(taus)
    e = np.asarray(targets, dtype=np.float64).reshape(-1, 1) - preds
    return float(np.mean(np.maximum(taus * e, (taus - 1.0) * e)))


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_network(cls, net: Network, **hyper) -> "AdamState":
        ps = net.params()
        return cls(m=[np.zeros_like(p) for p in ps], v=[np.zeros_like(p) for p in ps], **hyper)


def adam_step(net: Network, grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update of ``net`` in place."""
    params = net.params()
    if len(grads) != len(params):
        raise ValueError(f"expected {len(params)} gradients, got {len(grads)}")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(g) != p.shape:
            raise ad.ShapeError("adam_step", p.shape, np.shape(g))
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------- model file


def dumps(net: Network) -> str:
    out = io.StringIO()
    out.write(f"{FORMAT_TAG} v{FORMAT_VERSION}\n")
    out.write("dims " + " ".join(map(str, net.dims)) + "\n")
    for l, (W, b) in enumerate(zip(net.weights, net.biases), start=1):
        out.write(f"W {l} {W.shape[0]} {W.shape[1]}\n")
        for row in W:
            out.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        out.write(f"b {l} {b.shape[0]}\n")
        out.write(" ".join(f"{v:.17g}" for v in b) + "\n")
    return out.getvalue()


def loads(text: str) -> Network:
    lines = []
    offset = 0
    for raw in text.encode().splitlines(keepends=True):
        lines.append((offset, raw.decode().strip()))
        offset += len(raw)
    end = offset
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise ModelFormatError("unexpected end of file", end)
        pos += 1
        return lines[pos - 1]

    def numbers(off, line, n, what):
        try:
            vals = [float(t) for t in line.split()]
        except ValueError:
            raise ModelFormatError(f"{what}: non-numeric entry", off) from None
        if len(vals) != n:
            raise ModelFormatError(f"{what}: expected {n} values, found {len(vals)}", off)
        return vals

    off, head = take()
    if head != f"{FORMAT_TAG} v{FORMAT_VERSION}":
        raise ModelFormatError(f"bad header {head!r}", off)
    off, line = take()
    parts = line.split()
    if not parts or parts[0] != "dims":
        raise ModelFormatError("expected 'dims' line", off)
    try:
        dims = [int(t) for t in parts[1:]]
    except ValueError:
        raise ModelFormatError("dims must be integers", off) from None
    if len(dims) < 2 or min(dims) < 1:
        raise ModelFormatError("need at least two positive dims", off)

    Ws, bs = [], []
    for l in range(1, len(dims)):
        off, line = take()
        parts = line.split()
        if len(parts) != 4 or parts[0] != "W" or parts[1] != str(l) or not (parts[2] + parts[3]).isdigit():
            raise ModelFormatError(f"layer {l}: expected 'W {l} rows cols'", off)
        rows, cols = int(parts[2]), int(parts[3])
        if (rows, cols) != (dims[l], dims[l - 1]):
            raise ModelFormatError(
                f"layer {l}: W is {rows}x{cols} but dims header implies {dims[l]}x{dims[l - 1]}", off
            )
        W = np.array([numbers(*take(), cols, f"layer {l} W") for _ in range(rows)]).reshape(rows, cols)
        off, line = take()
        parts = line.split()
        if len(parts) != 3 or parts[0] != "b" or parts[1] != str(l) or not parts[2].isdigit():
            raise ModelFormatError(f"layer {l}: expected 'b {l} n'", off)
        if int(parts[2]) != dims[l]:
            raise ModelFormatError(f"layer {l}: b has {parts[2]} entries but dims header implies {dims[l]}", off)
        b = np.array(numbers(*take(), dims[l], f"layer {l} b"))
        Ws.append(W)
        bs.append(b)
    if pos != len(lines) and any(t for _, t in lines[pos:]):
        raise ModelFormatError("trailing content", lines[pos][0])
    return Network(Ws, bs)


def save(net: Network, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(net))


def load(path: str | os.PathLike) -> Network:
    with open(path) as fh:
        return loads(fh.read())
