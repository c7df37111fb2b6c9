"""Small reverse-mode autodiff on numpy arrays, MLPs, diagonal Gaussians and Adam.

Everything runs in float64. A :class:`Tensor` records the operation that made it
whenever one of its inputs requires a gradient; :func:`backward` walks that
record in reverse topological order and then discards it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


# --------------------------------------------------------------------------- #
# Tensor and tape
# --------------------------------------------------------------------------- #


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense float64 array that can take part in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to the Tensor side

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    # arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        out = Tensor(data, True, tuple(parents))
        out._backward = lambda: backward_fn(out.grad)
        return out
    return Tensor(data)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: a._accumulate(-g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(a.data / b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T, (a,), lambda g: a._accumulate(g.T))


def power(a: Tensor, exponent: float) -> Tensor:
    return _node(a.data**exponent, (a,), lambda g: a._accumulate(g * exponent * a.data ** (exponent - 1)))


def texp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _node(out_data, (a,), lambda g: a._accumulate(g * out_data))


def tlog(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))


def tsqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    return _node(out_data, (a,), lambda g: a._accumulate(g * 0.5 / out_data))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: a._accumulate(g * mask))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is passed only where no clamping happened."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: a._accumulate(g * inside))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * pick_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~pick_a, b.shape))

    return _node(np.where(pick_a, a.data, b.data), (a, b), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / count)


def take(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _node(a.data[idx], (a,), bw)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The recorded graph is consumed: afterwards intermediate nodes hold no
    parents, so calling backward twice on the same loss is an error.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or (loss._backward is None and not loss._parents):
        raise ContractError("loss is not connected to any parameter (empty or consumed tape)")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()
    for node in order:
        if node._parents:
            node._parents = ()
            node._backward = None
            node.grad = None


# --------------------------------------------------------------------------- #
# MLP
# --------------------------------------------------------------------------- #


class Mlp:
    """Fully connected network, ReLU on hidden layers, identity output.

    Weights are stored as ``(fan_in, fan_out)`` so that ``y = x @ W + b``.
    """

    def __init__(self, layer_sizes: Sequence[int], rng: np.random.Generator | None = None,
                 out_scale: float = 1.0):
        if len(layer_sizes) < 2 or any(int(n) < 1 for n in layer_sizes):
            raise ContractError(f"invalid layer sizes {list(layer_sizes)}")
        self.layer_sizes = [int(n) for n in layer_sizes]
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        n_layers = len(self.layer_sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            if i == n_layers - 1:
                w, b = w * out_scale, b * out_scale
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(b, requires_grad=True))

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> list[Tensor]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, x) -> Tensor:
        return forward(self, x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Tape-free forward pass."""
        h = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for p in self.parameters():
            n = p.data.size
            p.data = np.array(flat[offset:offset + n], dtype=np.float64).reshape(p.data.shape)
            offset += n
        if offset != flat.size:
            raise DimensionError(f"flat vector has {flat.size} entries, network has {offset}")

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def copy(self) -> Mlp:
        clone = Mlp.__new__(Mlp)
        clone.layer_sizes = list(self.layer_sizes)
        clone.weights = [Tensor(w.data.copy(), requires_grad=True) for w in self.weights]
        clone.biases = [Tensor(b.data.copy(), requires_grad=True) for b in self.biases]
        return clone


def make_mlp(in_dim: int, out_dim: int, hidden: int = 64, depth: int = 3,
             rng: np.random.Generator | None = None, out_scale: float = 1.0) -> Mlp:
    """The repo's standard architecture: ``depth`` hidden ReLU layers of width ``hidden``."""
    return Mlp([in_dim] + [hidden] * depth + [out_dim], rng=rng, out_scale=out_scale)


def forward(net: Mlp, x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim == 0 or x.shape[-1] != net.in_dim:
        raise DimensionError(f"input shape {x.shape} does not match network input size {net.in_dim} "
                             f"(layer sizes {net.layer_sizes})")
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = relu(h)
    return h


def input_gradient(net: Mlp, x, create_graph: bool = False) -> Tensor:
    """d net(x) / d x for a scalar-output network, one row per input row.

    For a ReLU network the Jacobian is ``W_1 D_1 W_2 D_2 ... w_out`` with the
    activation masks ``D_k`` held fixed, which is exact almost everywhere. With
    ``create_graph`` the result stays on the tape as a function of the weights,
    which is what a gradient penalty needs.
    """
    if net.out_dim != 1:
        raise ContractError(f"input_gradient needs a scalar head, network outputs {net.out_dim}")
    x_arr = as_tensor(x).data
    squeeze = x_arr.ndim == 1
    xb = x_arr[None, :] if squeeze else x_arr
    if xb.shape[-1] != net.in_dim:
        raise DimensionError(f"input shape {x_arr.shape} does not match network input size {net.in_dim}")

    masks = []
    h = xb
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        z = h @ w.data + b.data
        masks.append((z > 0).astype(np.float64))
        h = np.maximum(z, 0.0)

    weights = net.weights if create_graph else [Tensor(w.data) for w in net.weights]
    g = Tensor(np.ones((xb.shape[0], 1))) @ weights[-1].T
    for w, m in zip(reversed(weights[:-1]), reversed(masks)):
        g = (g * m) @ w.T
    if squeeze:
        g = g[0]
    return g


# --------------------------------------------------------------------------- #
# Diagonal Gaussians
# --------------------------------------------------------------------------- #


@dataclass
class DiagGaussian:
    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.log_std = np.clip(np.atleast_1d(np.asarray(self.log_std, dtype=np.float64)),
                               LOG_STD_MIN, LOG_STD_MAX)
        if self.log_std.shape != self.mean.shape:
            raise DimensionError(f"mean shape {self.mean.shape} vs log_std shape {self.log_std.shape}")

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(self.mean.shape)


def gaussian_log_prob(d: DiagGaussian, a) -> float:
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    if a.shape != d.mean.shape:
        raise DimensionError(f"action shape {a.shape} vs distribution shape {d.mean.shape}")
    z = (a - d.mean) / d.std
    return float(np.sum(-0.5 * z * z - d.log_std - _HALF_LOG_2PI))


def gaussian_kl(p: DiagGaussian, q: DiagGaussian) -> float:
    """KL(p || q) for diagonal Gaussians."""
    if p.mean.shape != q.mean.shape:
        raise DimensionError(f"KL between shapes {p.mean.shape} and {q.mean.shape}")
    var_p, var_q = np.exp(2 * p.log_std), np.exp(2 * q.log_std)
    kl = q.log_std - p.log_std + (var_p + (p.mean - q.mean) ** 2) / (2 * var_q) - 0.5
    return float(np.sum(kl))


def log_prob_tensor(mean: Tensor, log_std: Tensor, actions: np.ndarray) -> Tensor:
    """Per-row log density of ``actions`` under N(mean, exp(log_std)^2), on the tape."""
    log_std = clip(as_tensor(log_std), LOG_STD_MIN, LOG_STD_MAX)
    z = (as_tensor(actions) - mean) * texp(-log_std)
    return (z * z * (-0.5) - log_std - _HALF_LOG_2PI).sum(axis=-1)


def kl_tensor(mean_p: Tensor, log_std_p: Tensor, mean_q: np.ndarray, log_std_q: np.ndarray) -> Tensor:
    """Per-row KL(p || q) with p on the tape and q a fixed target."""
    log_std_p = clip(as_tensor(log_std_p), LOG_STD_MIN, LOG_STD_MAX)
    log_std_q = np.clip(np.asarray(log_std_q, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX)
    inv_var_q = np.exp(-2.0 * log_std_q)
    diff = mean_p - mean_q
    kl = (log_std_q - log_std_p) + (texp(log_std_p * 2.0) + diff * diff) * (0.5 * inv_var_q) - 0.5
    return kl.sum(axis=-1)


def kl_numpy(mean_p, log_std_p, mean_q, log_std_q) -> np.ndarray:
    log_std_p = np.clip(log_std_p, LOG_STD_MIN, LOG_STD_MAX)
    log_std_q = np.clip(log_std_q, LOG_STD_MIN, LOG_STD_MAX)
    kl = (log_std_q - log_std_p) + (np.exp(2 * log_std_p) + (mean_p - mean_q) ** 2) / (2 * np.exp(2 * log_std_q)) - 0.5
    return np.sum(kl, axis=-1)


# --------------------------------------------------------------------------- #
# Adam
# --------------------------------------------------------------------------- #


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Rejects the whole step on a non-finite gradient."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameter arrays but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise DimensionError(f"parameter {i} has shape {np.shape(p)}, gradient {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {i}; update rejected")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.second_moment = [np.zeros_like(p, dtype=np.float64) for p in params]

    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g
        v = state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g
        state.first_moment[i], state.second_moment[i] = m, v
        new_params.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon))
    return new_params, state


class Adam:
    """Adam over a list of leaf tensors, reading their ``.grad``."""

    def __init__(self, params: Iterable[Tensor], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, _ = adam_step([p.data for p in self.params], grads, self.state)
        for p, d in zip(self.params, new):
            p.data = d


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #

CHECKPOINT_TAG = "sail-lab-checkpoint-v1"


def _fmt_row(values: np.ndarray) -> str:
    return " ".join(format(float(v), ".17g") for v in values)


def write_checkpoint(path, nets: dict[str, Mlp], arrays: dict[str, np.ndarray] | None = None) -> None:
    """Plain-text checkpoint.

    Layout: a tag line, then per network ``net <name>`` and ``layer_sizes ...``
    followed by ``W<i> rows cols`` with one row-major line per row and
    ``b<i> n`` with one line of values; loose vectors follow as
    ``array <name> n`` plus one line. Floats carry 17 significant digits.
    """
    lines = [CHECKPOINT_TAG]
    for name, net in nets.items():
        lines.append(f"net {name}")
        lines.append("layer_sizes " + " ".join(str(n) for n in net.layer_sizes))
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            rows, cols = w.data.shape
            lines.append(f"W{i} {rows} {cols}")
            lines.extend(_fmt_row(row) for row in w.data)
            lines.append(f"b{i} {b.data.size}")
            lines.append(_fmt_row(b.data))
    for name, arr in (arrays or {}).items():
        arr = np.atleast_1d(np.asarray(arr, dtype=np.float64))
        lines.append(f"array {name} {arr.size}")
        lines.append(_fmt_row(arr))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def read_checkpoint(path) -> tuple[dict[str, Mlp], dict[str, np.ndarray]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_TAG:
        raise ContractError(f"{path}: not a {CHECKPOINT_TAG} file")
    nets: dict[str, Mlp] = {}
    arrays: dict[str, np.ndarray] = {}
    pos = 1

    def floats(line: str) -> np.ndarray:
        return np.array([float(t) for t in line.split()], dtype=np.float64)

    while pos < len(lines) and lines[pos] != "end":
        head = lines[pos].split()
        if head[0] == "net":
            name = head[1]
            sizes = [int(t) for t in lines[pos + 1].split()[1:]]
            net = Mlp(sizes)
            pos += 2
            for i in range(len(sizes) - 1):
                _, rows, cols = lines[pos].split()
                w = np.stack([floats(lines[pos + 1 + r]) for r in range(int(rows))])
                pos += 1 + int(rows)
                b = floats(lines[pos + 1])
                pos += 2
                net.weights[i].data = w.reshape(int(rows), int(cols))
                net.biases[i].data = b
            nets[name] = net
        elif head[0] == "array":
            arrays[head[1]] = floats(lines[pos + 1]) if int(head[2]) else np.zeros(0)
            pos += 2
        else:
            raise ContractError(f"{path}:{pos + 1}: unexpected record {head[0]!r}")
    return nets, arrays
