"""A small define-by-run reverse-mode autodiff engine over numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping its output gradient to parent gradients. :func:`backward`
walks the tape in reverse topological order. Tensors support arbitrary leading batch axes; a
batch of patches is just one more axis in front.
"""

from __future__ import annotations

import contextlib
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

_DTYPES = {"single": np.float32, "double": np.float64}
_state = {"dtype": np.float32}
# when not None, kink-prone ops append their activation pattern here
_kinks: list | None = None


def set_precision(mode: str) -> None:
    """Select the default dtype for new tensors: "single" or "double"."""
    _state["dtype"] = _DTYPES[mode]


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(mode: str):
    old = _state["dtype"]
    _state["dtype"] = _DTYPES[mode]
    try:
        yield
    finally:
        _state["dtype"] = old


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None,
                 dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or get_dtype())
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (),
                  _backward=backward if req else None, dtype=data.dtype)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# Each op's backward closure maps the upstream gradient to a tuple of
# gradients aligned with its parents.

# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "subtract")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "multiply")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = _t(a)
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = _t(x)
    mask = x.data > 0
    if _kinks is not None:
        _kinks.append(np.packbits(mask))
    return _make(np.maximum(x.data, 0).astype(x.data.dtype), (x,),
                 lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = _t(x)
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    return _make(s, (x,), lambda g: (g * s * (1 - s),))


# -- shape ops ---------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _t(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def broadcast_to(x, shape) -> Tensor:
    """Duplicate ``x`` along size-1 (or missing leading) axes."""
    x = _t(x)
    old = x.shape
    return _make(np.ascontiguousarray(np.broadcast_to(x.data, shape)), (x,),
                 lambda g: (_unbroadcast(g, old),))


def concat(xs, axis=-1) -> Tensor:
    xs = tuple(_t(x) for x in xs)
    ref = xs[0]
    ax = axis % ref.ndim
    for x in xs:
        if x.ndim != ref.ndim or x.shape[:ax] + x.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}")
    cuts = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=ax), xs,
                 lambda g: tuple(np.split(g, cuts, axis=ax)))


def gather_rows(x, idx) -> Tensor:
    """Neighbour gather: ``x`` (..., N, C), ``idx`` (..., N, k) -> (..., N, k, C).

    ``out[..., r, j, :] = x[..., idx[..., r, j], :]``; leading axes of ``x``
    and ``idx`` must match.
    """
    x = _t(x)
    idx = np.asarray(idx)
    if x.ndim < 2 or idx.ndim != x.ndim or idx.shape[:-1] != x.shape[:-1]:
        raise ValueError(f"gather_rows: incompatible shapes x{x.shape} idx{idx.shape}")
    N = x.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= N):
        raise IndexError(f"gather_rows: index out of range for {N} rows")
    lead = x.shape[:-2]
    B = int(np.prod(lead)) if lead else 1
    C = x.shape[-1]
    k = idx.shape[-1]
    flat = (idx.reshape(B, N * k) + (np.arange(B) * N)[:, None]).ravel()

    def bw(g):
        acc = np.zeros((B * N, C), dtype=g.dtype)
        np.add.at(acc, flat, g.reshape(-1, C))
        return (acc.reshape(x.shape),)
    return _make(x.data.reshape(B * N, C)[flat].reshape(*lead, N, k, C), (x,), bw)


# -- reductions ----------------------------------------------------------------

def reduce_max(x, axis) -> Tensor:
    """Max over one axis; gradient goes to the first (smallest-index) maximiser."""
    x = _t(x)
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    if _kinks is not None:
        _kinks.append(arg.tobytes())

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)
    return _make(np.squeeze(np.take_along_axis(x.data, arg, axis=axis), axis=axis), (x,), bw)


def reduce_mean(x, axis=None) -> Tensor:
    x = _t(x)
    n = x.data.size if axis is None else x.shape[axis]

    def bw(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, x.shape),)
    return _make(np.asarray(x.data.mean(axis=axis), dtype=x.data.dtype), (x,), bw)


def reduce_sum(x, axis=None) -> Tensor:
    x = _t(x)

    def bw(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape),)
    return _make(np.asarray(x.data.sum(axis=axis), dtype=x.data.dtype), (x,), bw)


def sum_of_squares(x, axis=None) -> Tensor:
    x = _t(x)

    def bw(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        return (2 * gg * x.data,)
    return _make(np.asarray(np.sum(x.data * x.data, axis=axis), dtype=x.data.dtype), (x,), bw)


# -- layers --------------------------------------------------------------------

def linear(x, W, b=None) -> Tensor:
    """``x @ W + b`` over the last axis: (..., Cin) x (Cin, Cout) -> (..., Cout)."""
    x, W = _t(x), _t(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    cin, cout = W.shape
    y = x.data @ W.data
    if b is None:
        parents = (x, W)
    else:
        b = _t(b)
        if b.shape != (cout,):
            raise ValueError(f"linear: bias {b.shape} does not match weight {W.shape}")
        y = y + b.data
        parents = (x, W, b)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = g @ W.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, cin).T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    return _make(y, parents, bw)


def row_normalize(x, eps=1e-12) -> Tensor:
    """Divide each last-axis vector by ``max(||v||, eps)``."""
    x = _t(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    big = norm > eps
    if _kinks is not None:
        _kinks.append(np.packbits(big))
    den = np.where(big, norm, eps).astype(x.data.dtype)
    y = x.data / den

    def bw(g):
        proj = np.where(big, y * np.sum(y * g, axis=-1, keepdims=True), 0)
        return ((g - proj) / den,)
    return _make(y, (x,), bw)


# -- backward ------------------------------------------------------------------

def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked leaf reachable from scalar ``loss``.

    Gradients accumulate across calls; the tape is released afterwards, so a
    second call on the same graph raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is _CONSUMED:
        raise GraphError("graph already consumed")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node._accum(g)
            continue
        if g is not None:
            for p, gp in zip(node._parents, node._backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = gp if k not in grads else grads[k] + gp
        node._backward = _CONSUMED
        node._parents = ()


def _CONSUMED(g):  # sentinel for released tape entries
    raise GraphError("graph already consumed")


# -- optimiser -----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, state: AdamState, grads=None) -> None:
    """One bias-corrected Adam update, in place. ``grads`` defaults to ``p.grad``."""
    grads = [p.grad for p in params] if grads is None else list(grads)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("Adam state does not match parameter list")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"Adam: gradient {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, self.state)


# -- verification --------------------------------------------------------------

def _pattern(f):
    global _kinks
    _kinks = []
    try:
        val = float(f().data)
        return val, _kinks
    finally:
        _kinks = None


def _same(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) if isinstance(x, np.ndarray) else x == y
                                   for x, y in zip(a, b))


@dataclass
class GradCheck:
    max_rel_error: float
    checked: int
    excluded: int
    worst: tuple = ()


def finite_difference_check(f, params, h=1e-5, mode="double", floor=1e-5,
                            max_entries=None, rng=None) -> GradCheck:
    """Compare backward gradients of scalar ``f()`` to central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``. Entries
    whose +-h perturbation flips a relu mask, a max-pool argmax or the
    normalisation branch sit at a non-differentiable point and are excluded.
    ``max_entries`` caps the number of probed entries per parameter (random
    subset from ``rng``).
    """
    rng = np.random.default_rng(rng)
    with precision(mode):
        for p in params:
            p.data = p.data.astype(get_dtype())
            p.grad = None
        global _kinks
        base, ref = _pattern(f)
        _kinks = None
        loss = f()
        backward(loss)
        worst, checked, excluded = 0.0, 0, 0
        where = ()
        for pi, p in enumerate(params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            entries = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                entries = rng.choice(flat.size, max_entries, replace=False)
            for e in entries:
                old = flat[e]
                flat[e] = old + h
                fp, kp = _pattern(f)
                flat[e] = old - h
                fm, km = _pattern(f)
                flat[e] = old
                if not (_same(kp, ref) and _same(km, ref)):
                    excluded += 1
                    continue
                num = (fp - fm) / (2 * h)
                ana = float(g.reshape(-1)[e])
                rel = abs(ana - num) / max(abs(ana), abs(num), floor)
                checked += 1
                if rel > worst:
                    worst, where = rel, (pi, int(e), ana, num)
    return GradCheck(worst, checked, excluded, where)


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"DNFCKPT1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, named_params: dict, header: bytes = b"") -> None:
    """Write ``{name: array}`` as little-endian float32 with a CRC32 trailer."""
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(header)), header,
             struct.pack("<I", len(named_params))]
    for name, arr in named_params.items():
        a = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.astype("<f4").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path):
    """Return ``(header_bytes, {name: float32 array})``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CKPT_MAGIC) + 16 or blob[:8] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    off = 8
    version, hlen = struct.unpack_from("<II", body, off)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off += 8
    header = body[off:off + hlen]
    off += hlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
    return header, params
