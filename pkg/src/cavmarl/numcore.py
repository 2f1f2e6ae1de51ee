"""Small dense numerical core: a reverse-mode tape over numpy arrays.

Only the operations the agent, mixing and policy networks need are provided.
Every op accepts batched inputs (leading axes are treated as batch axes) so a
whole minibatch of episodes flows through one node per layer per timestep.

Usage::

    tape = Tape()
    W = tape.param("fc.weight", params["fc.weight"])
    b = tape.param("fc.bias", params["fc.bias"])
    x = tape.const(inputs)
    loss = mean(square(linear_forward(W, b, x, tape)))
    grads = backward(tape)          # {"fc.weight": ..., "fc.bias": ...}
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

Matrix = np.ndarray
Params = Dict[str, np.ndarray]


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class ContractViolation(RuntimeError):
    """Raised when a caller breaks an operation's precondition."""


# --------------------------------------------------------------------------
# tape


class Node:
    __slots__ = ("value", "parents", "vjp", "name", "needs_grad", "index")

    def __init__(self, value, parents=(), vjp=None, name=None, needs_grad=False):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.needs_grad = needs_grad
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, name={self.name!r})"


def _as_float(value) -> np.ndarray:
    """Float arrays keep their precision (extended precision is handy for
    gradient checks); anything else becomes float64."""
    arr = np.asarray(value)
    return arr if arr.dtype.kind == "f" else arr.astype(np.float64)


class Tape:
    """Ordered record of primitive operations.

    A tape built with ``grad=False`` records nothing; ops still evaluate, which
    is how rollouts and target networks run forward passes.
    """

    def __init__(self, grad: bool = True):
        self.grad = grad
        self.nodes: List[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, node: Node) -> Node:
        if self.grad:
            node.index = len(self.nodes)
            self.nodes.append(node)
        return node

    def param(self, name: str, value: np.ndarray) -> Node:
        return self._push(Node(_as_float(value), name=name, needs_grad=self.grad))

    def const(self, value) -> Node:
        return self._push(Node(_as_float(value)))

    def record(self, value, parents: Sequence[Node], vjp: Callable) -> Node:
        if not self.grad:
            return Node(value)
        needs = any(p.needs_grad for p in parents)
        return self._push(Node(value, tuple(parents), vjp if needs else None, needs_grad=needs))


def backward(tape: Tape, loss_grad: float = 1.0,
             on_visit: Optional[Callable[[Node], None]] = None) -> Dict[str, np.ndarray]:
    """Propagate ``loss_grad`` from the tape's final node back to its parameters.

    Gradients of parameters registered more than once under the same name are
    summed. The tape itself is not mutated, so repeated calls agree exactly.
    """
    if not tape.nodes:
        raise ContractViolation("empty tape")
    out = tape.nodes[-1]
    if out.value.size != 1:
        raise ContractViolation(f"tape does not end in a scalar (shape {out.value.shape})")
    grads: List[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[-1] = np.full(out.value.shape, float(loss_grad))
    named: Dict[str, np.ndarray] = {}
    for node in reversed(tape.nodes):
        if on_visit is not None:
            on_visit(node)
        g = grads[node.index]
        if g is None:
            continue
        if node.name is not None:
            named[node.name] = named[node.name] + g if node.name in named else g
            continue
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.needs_grad:
                continue
            i = parent.index
            grads[i] = pg if grads[i] is None else grads[i] + pg
    for node in tape.nodes:
        if node.name is not None and node.name not in named:
            named[node.name] = np.zeros_like(node.value)
    return named


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Node, b: Node, tape: Tape) -> Node:
    sa, sb = a.shape, b.shape
    return tape.record(a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Node, b: Node, tape: Tape) -> Node:
    sa, sb = a.shape, b.shape
    return tape.record(a.value - b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Node, b: Node, tape: Tape) -> Node:
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Node, c: float, tape: Tape) -> Node:
    return tape.record(a.value * c, (a,), lambda g: (g * c,))


def square(a: Node, tape: Tape) -> Node:
    av = a.value
    return tape.record(av * av, (a,), lambda g: (2.0 * av * g,))


def relu(x: Node, tape: Tape) -> Node:
    """Elementwise ``max(0, x)``; the subgradient at 0 is taken as 0."""
    pos = x.value > 0
    return tape.record(np.where(pos, x.value, 0.0), (x,), lambda g: (g * pos,))


def tanh(x: Node, tape: Tape) -> Node:
    y = np.tanh(x.value)
    return tape.record(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Node, tape: Tape) -> Node:
    y = _sigmoid(x.value)
    return tape.record(y, (x,), lambda g: (g * y * (1.0 - y),))


def absolute(x: Node, tape: Tape) -> Node:
    sign = np.sign(x.value)
    return tape.record(np.abs(x.value), (x,), lambda g: (g * sign,))


def exp(x: Node, tape: Tape) -> Node:
    y = np.exp(x.value)
    return tape.record(y, (x,), lambda g: (g * y,))


def clip(x: Node, lo: float, hi: float, tape: Tape) -> Node:
    inside = (x.value > lo) & (x.value < hi)
    return tape.record(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,))


def minimum(a: Node, b: Node, tape: Tape) -> Node:
    """Elementwise minimum; ties send the gradient to ``a``."""
    take_a = a.value <= b.value
    return tape.record(np.where(take_a, a.value, b.value), (a, b),
                       lambda g: (g * take_a, g * ~take_a))


def reshape(x: Node, shape, tape: Tape) -> Node:
    old = x.shape
    return tape.record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def sum_(x: Node, tape: Tape, axis: Optional[int] = None) -> Node:
    shape = x.shape
    if axis is None:
        return tape.record(np.asarray(x.value.sum()), (x,),
                           lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % len(shape)
    return tape.record(x.value.sum(axis=ax), (x,),
                       lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(x: Node, tape: Tape) -> Node:
    return scale(sum_(x, tape), 1.0 / x.value.size, tape)


def stack(nodes: Sequence[Node], tape: Tape, axis: int = 0) -> Node:
    value = np.stack([n.value for n in nodes], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(nodes)))

    return tape.record(value, tuple(nodes), vjp)


def gather(x: Node, index: np.ndarray, tape: Tape) -> Node:
    """Pick ``x[..., index[...]]`` along the last axis."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"gather index shape {idx.shape} vs values {x.shape}")
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return (out,)

    value = np.take_along_axis(x.value, idx[..., None], axis=-1)[..., 0]
    return tape.record(value, (x,), vjp)


def vecmat(q: Node, w: Node, tape: Tape) -> Node:
    """Batched row-vector times matrix: ``(B, n) x (B, n, E) -> (B, E)``."""
    qv, wv = q.value, w.value
    if wv.ndim != 3 or qv.shape != wv.shape[:2]:
        raise ShapeError(f"vecmat shapes {qv.shape} and {wv.shape}")

    def vjp(g):
        return (np.einsum("be,bne->bn", g, wv), qv[:, :, None] * g[:, None, :])

    return tape.record(np.einsum("bn,bne->be", qv, wv), (q, w), vjp)


def masked_log_softmax(logits: Node, mask: np.ndarray, tape: Tape) -> Node:
    """Log-probabilities renormalised over legal entries; illegal entries read 0."""
    m = np.asarray(mask, dtype=bool)
    if not m.any(axis=-1).all():
        raise ContractViolation("a row of the action mask has no legal entry")
    z = np.where(m, logits.value, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    logp = np.where(m, logits.value - lse, 0.0)
    p = np.where(m, np.exp(logp), 0.0)

    def vjp(g):
        g = np.where(m, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return tape.record(logp, (logits,), vjp)


def linear_forward(W: Node, b: Node, x: Node, tape: Tape) -> Node:
    """Fully connected layer ``x @ W.T + b`` over any leading batch axes."""
    wv, bv, xv = W.value, b.value, x.value
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[1] or bv.shape != (wv.shape[0],):
        raise ShapeError(f"linear: W{wv.shape} b{bv.shape} x{xv.shape}")
    out = xv @ wv.T + bv

    def vjp(g):
        g2 = g.reshape(-1, wv.shape[0])
        x2 = xv.reshape(-1, wv.shape[1])
        return (g2.T @ x2, g2.sum(axis=0), g @ wv)

    return tape.record(out, (W, b, x), vjp)


# --------------------------------------------------------------------------
# gated recurrent unit


@dataclass
class GruParams:
    """Gate blocks are stacked in the order (reset, update, candidate).

    ``w_ih`` is ``(3H, in)``, ``w_hh`` is ``(3H, H)``; ``b_ih`` and ``b_hh``
    are the input-side and hidden-side biases, each of length ``3H``.
    """

    w_ih: np.ndarray
    w_hh: np.ndarray
    b_ih: np.ndarray
    b_hh: np.ndarray

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_step(w_ih: Node, w_hh: Node, b_ih: Node, b_hh: Node, x: Node, h: Node,
             tape: Tape) -> Node:
    """One GRU update ``h' = (1 - z) * n + z * h``.

    ``r = sigmoid(Wx_r + Wh_r)``, ``z = sigmoid(Wx_z + Wh_z)`` and
    ``n = tanh(Wx_n + r * Wh_n)``, with each ``W*`` including its bias.
    """
    wi, wh, bi, bh, xv, hv = w_ih.value, w_hh.value, b_ih.value, b_hh.value, x.value, h.value
    H = wh.shape[1]
    if (wh.shape != (3 * H, H) or wi.shape[0] != 3 * H or xv.shape[-1] != wi.shape[1]
            or hv.shape[-1] != H or bi.shape != (3 * H,) or bh.shape != (3 * H,)
            or xv.shape[:-1] != hv.shape[:-1]):
        raise ShapeError(f"gru: w_ih{wi.shape} w_hh{wh.shape} x{xv.shape} h{hv.shape}")
    gi = xv @ wi.T + bi
    gh = hv @ wh.T + bh
    r = _sigmoid(gi[..., :H] + gh[..., :H])
    z = _sigmoid(gi[..., H:2 * H] + gh[..., H:2 * H])
    hn = gh[..., 2 * H:]
    n = np.tanh(gi[..., 2 * H:] + r * hn)
    out = (1.0 - z) * n + z * hv

    def vjp(g):
        dn = g * (1.0 - z) * (1.0 - n * n)
        dz = g * (hv - n) * z * (1.0 - z)
        dr = dn * hn * r * (1.0 - r)
        d_gi = np.concatenate([dr, dz, dn], axis=-1)
        d_gh = np.concatenate([dr, dz, dn * r], axis=-1)
        gi2 = d_gi.reshape(-1, 3 * H)
        gh2 = d_gh.reshape(-1, 3 * H)
        return (gi2.T @ xv.reshape(-1, wi.shape[1]),
                gh2.T @ hv.reshape(-1, H),
                gi2.sum(axis=0),
                gh2.sum(axis=0),
                d_gi @ wi,
                d_gh @ wh + g * z)

    return tape.record(out, (w_ih, w_hh, b_ih, b_hh, x, h), vjp)


# --------------------------------------------------------------------------
# initialisers


def _check_dims(rows: int, cols: int) -> None:
    if rows < 1 or cols < 1:
        raise ShapeError(f"invalid shape ({rows}, {cols})")


def xavier_normal_init(rows: int, cols: int, rng: np.random.Generator) -> Matrix:
    _check_dims(rows, cols)
    return rng.normal(0.0, np.sqrt(2.0 / (rows + cols)), size=(rows, cols))


def orthogonal_init(rows: int, cols: int, rng: np.random.Generator, gain: float = 1.0) -> Matrix:
    """Orthogonalise a Gaussian sample (QR with a positive-diagonal R).

    For ``rows >= cols`` the columns are orthonormal, otherwise the rows are.
    """
    _check_dims(rows, cols)
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q


def uniform_fan_in_init(rows: int, cols: int, rng: np.random.Generator) -> Matrix:
    """``U(-1/sqrt(cols), 1/sqrt(cols))``, the common framework default."""
    _check_dims(rows, cols)
    bound = 1.0 / np.sqrt(cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


# --------------------------------------------------------------------------
# optimisers


@dataclass
class AdamState:
    m: Params
    v: Params
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def fresh(cls, params: Params, lr: float, **kw) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, lr=lr, **kw)


def adam_step(state: AdamState, params: Params, grads: Params):
    """Bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    for k, p in params.items():
        if grads[k].shape != p.shape:
            raise ShapeError(f"gradient for {k!r} has shape {grads[k].shape}, param {p.shape}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_params[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(m_new, v_new, state.lr, b1, b2, state.eps, t)


def decay_lr(state, factor: float, events: int = 1):
    """Multiply the optimiser learning rate by ``factor ** events``."""
    state.lr = state.lr * factor ** events
    return state


@dataclass
class RmsPropState:
    sq: Params
    lr: float
    alpha: float = 0.99
    eps: float = 1e-5
    step: int = 0

    @classmethod
    def fresh(cls, params: Params, lr: float, **kw) -> "RmsPropState":
        return cls(sq={k: np.zeros_like(p) for k, p in params.items()}, lr=lr, **kw)


def rmsprop_step(state: RmsPropState, params: Params, grads: Params):
    new_params, sq_new = {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k!r} has shape {g.shape}, param {p.shape}")
        sq = state.alpha * state.sq[k] + (1.0 - state.alpha) * g * g
        new_params[k] = p - state.lr * g / (np.sqrt(sq) + state.eps)
        sq_new[k] = sq
    return new_params, RmsPropState(sq_new, state.lr, state.alpha, state.eps, state.step + 1)


def clip_grad_norm(grads: Params, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return total


# --------------------------------------------------------------------------
# checkpoint container

MAGIC = b"CAVMARL\x00"
FORMAT_VERSION = 1


def encode_arrays(arrays: Dict[str, np.ndarray]) -> bytes:
    """Serialise named arrays: magic, version, count, then per array
    name (u32 length + UTF-8), rank, dims and float32 little-endian data."""
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes(order="C"))
    return b"".join(out)


def decode_arrays(blob: bytes) -> Dict[str, np.ndarray]:
    if blob[:len(MAGIC)] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=size, offset=pos)
        pos += 4 * size
        arrays[name] = data.reshape(dims).astype(np.float64)
    if pos != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return arrays


def save_checkpoint(path, arrays: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_arrays(arrays))
    tmp.replace(path)
    return path


def load_checkpoint(path, expected: Optional[Dict[str, tuple]] = None) -> Dict[str, np.ndarray]:
    """Read a checkpoint; with ``expected`` (name -> shape) verify it matches."""
    arrays = decode_arrays(Path(path).read_bytes())
    if expected is not None:
        for name, shape in expected.items():
            if name not in arrays:
                raise ShapeError(f"checkpoint {path} is missing array {name!r}")
            if tuple(arrays[name].shape) != tuple(shape):
                raise ShapeError(f"array {name!r} in {path} has shape "
                                 f"{tuple(arrays[name].shape)}, expected {tuple(shape)}")
    return arrays
