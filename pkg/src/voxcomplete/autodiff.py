"""Dense-array reverse-mode automatic differentiation on a recorded tape.

Everything is 64-bit. A :class:`ValueGraph` records each operation as an
append-only node holding its output; :func:`backward` walks the tape in
reverse and accumulates gradients into the owning :class:`ParamStore`.
Arrays are immutable once recorded, so a tape stays valid until the
parameters it captured are replaced (``adam_step`` assigns fresh arrays
instead of mutating in place).
"""

from __future__ import annotations

import struct

import numpy as np

CHECKPOINT_MAGIC = b"TBRG"
CHECKPOINT_VERSION = 1
# Optimizer state is serialized under this reserved name prefix.
OPT_PREFIX = "opt."


class ShapeError(ValueError):
    """Raised when operand dimensions do not line up."""


class CheckpointError(IOError):
    """Raised on malformed or incompatible checkpoint files."""


def _freeze(values, dims=None) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    if dims is not None:
        a = a.reshape(tuple(dims))
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite values rejected")
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class DenseArray:
    """Immutable row-major float64 array; NaN/Inf rejected at construction."""

    __slots__ = ("_a",)

    def __init__(self, values, dims=None):
        self._a = _freeze(values, dims)

    @property
    def dims(self) -> tuple:
        return self._a.shape

    @property
    def data(self) -> np.ndarray:
        """Read-only ndarray view of the row-major payload."""
        return self._a

    def __repr__(self):
        return f"DenseArray(dims={self.dims})"


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class ParamStore:
    """Named float64 parameters keyed by dotted path, with gradient slots.

    Gradients start unset (``None``); :func:`backward` fills every slot
    (zeros for untouched parameters) and accumulates across calls until
    :meth:`zero_grads`.
    """

    def __init__(self, seed: int = 0):
        self._params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray | None] = {}
        self.opt_state: dict[str, np.ndarray] = {}
        self.opt_step: int = 0
        self._rng = np.random.default_rng(seed)

    def register(self, name: str, dims, init="xavier", fan=None) -> None:
        """Register a parameter. init: "xavier", "zeros", "ones", or an array."""
        if name in self._params:
            raise ValueError(f"parameter '{name}' already registered")
        if name.startswith(OPT_PREFIX):
            raise ValueError(f"parameter name '{name}' uses reserved prefix '{OPT_PREFIX}'")
        dims = tuple(int(d) for d in dims)
        if isinstance(init, str):
            if init == "zeros":
                value = np.zeros(dims)
            elif init == "ones":
                value = np.ones(dims)
            elif init == "xavier":
                if fan is None:
                    if len(dims) < 2:
                        fan = (dims[0] if dims else 1, dims[0] if dims else 1)
                    else:
                        fan = (int(np.prod(dims[:-1])), dims[-1])
                a = xavier_bound(*fan)
                value = self._rng.uniform(-a, a, size=dims)
            else:
                raise ValueError(f"unknown init '{init}'")
        else:
            value = np.asarray(init, dtype=np.float64).reshape(dims)
        self._params[name] = _freeze(value)
        self.grads[name] = None

    def register_linear(self, name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
        """Register weight `name.w` [fan_in, fan_out] and optionally bias `name.b`."""
        self.register(name + ".w", (fan_in, fan_out))
        if bias:
            self.register(name + ".b", (fan_out,), init="zeros")

    def register_norm(self, name: str, channels: int) -> None:
        self.register(name + ".g", (channels,), init="ones")
        self.register(name + ".b", (channels,), init="zeros")

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def value(self, name: str) -> np.ndarray:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"unknown parameter '{name}'") from None

    def set_value(self, name: str, values) -> None:
        old = self.value(name)
        new = _freeze(values)
        if new.shape != old.shape:
            raise ShapeError(f"parameter '{name}': got dims {new.shape}, expected {old.shape}")
        self._params[name] = new

    def accumulate_grad(self, name: str, g: np.ndarray) -> None:
        slot = self.grads.get(name)
        if slot is None:
            self.grads[name] = np.array(g, dtype=np.float64)
        else:
            self.grads[name] = slot + g

    def zero_grads(self) -> None:
        for name in self.grads:
            self.grads[name] = np.zeros_like(self._params[name])


class _Node:
    __slots__ = ("tag", "inputs", "out", "vjp")

    def __init__(self, tag, inputs, out, vjp):
        self.tag = tag
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class Var:
    """Handle to one node on a ValueGraph tape."""

    __slots__ = ("graph", "nid")

    def __init__(self, graph: "ValueGraph", nid: int):
        self.graph = graph
        self.nid = nid

    @property
    def out(self) -> DenseArray:
        return self.graph.node(self.nid).out

    @property
    def array(self) -> np.ndarray:
        return self.out.data

    @property
    def shape(self) -> tuple:
        return self.out.dims

    def __repr__(self):
        return f"Var(nid={self.nid}, dims={self.shape})"


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient `g` down to `shape` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


class ValueGraph:
    """Append-only computation tape over DenseArrays.

    A vjp callback receives the upstream gradient and returns
    ``(input_grads, param_grads)`` where input_grads aligns with the node's
    inputs (None for no flow) and param_grads maps parameter names to
    gradient arrays. :meth:`record` is the extension point used by modules
    that contribute fused ops (e.g. sparse convolution).
    """

    def __init__(self, params: ParamStore):
        self.params = params
        self._nodes: list[_Node] = []

    def node(self, nid: int) -> _Node:
        return self._nodes[nid]

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, tag: str, inputs: tuple, out_values, vjp) -> Var:
        out = out_values if isinstance(out_values, DenseArray) else DenseArray(out_values)
        self._nodes.append(_Node(tag, tuple(v.nid for v in inputs), out, vjp))
        return Var(self, len(self._nodes) - 1)

    # ---- leaves ----

    def constant(self, values) -> Var:
        return self.record("const", (), values, None)

    def param(self, name: str) -> Var:
        value = self.params.value(name)

        def vjp(g):
            return (), {name: g}

        return self.record("param", (), value, vjp)

    # ---- arithmetic ----

    def add(self, a: Var, b: Var) -> Var:
        ash, bsh = a.shape, b.shape
        out = a.array + b.array

        def vjp(g):
            return (_unbroadcast(g, ash), _unbroadcast(g, bsh)), {}

        return self.record("add", (a, b), out, vjp)

    def mul(self, a: Var, b: Var) -> Var:
        ash, bsh = a.shape, b.shape
        av, bv = a.array, b.array
        out = av * bv

        def vjp(g):
            return (_unbroadcast(g * bv, ash), _unbroadcast(g * av, bsh)), {}

        return self.record("mul", (a, b), out, vjp)

    def scale(self, a: Var, s: float) -> Var:
        s = float(s)

        def vjp(g):
            return (g * s,), {}

        return self.record("scale", (a,), a.array * s, vjp)

    def matmul(self, a: Var, b: Var) -> Var:
        av, bv = a.array, b.array
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: got {av.shape} @ {bv.shape}")
        out = av @ bv

        def vjp(g):
            return (g @ bv.T, av.T @ g), {}

        return self.record("matmul", (a, b), out, vjp)

    def linear(self, x: Var, name: str) -> Var:
        """Affine map y = xW + b over the trailing axis of x.

        `name.w` [in, out] must be registered; `name.b` is used when present.
        """
        w = self.params.value(name + ".w")
        has_bias = (name + ".b") in self.params
        b = self.params.value(name + ".b") if has_bias else None
        xv = x.array
        if xv.ndim < 1 or xv.shape[-1] != w.shape[0]:
            raise ShapeError(
                f"linear '{name}': input trailing dim {xv.shape[-1] if xv.ndim else 0} "
                f"!= weight input dim {w.shape[0]}"
            )
        lead = xv.shape[:-1]
        n = int(np.prod(lead)) if lead else 1
        x2 = xv.reshape(n, w.shape[0])
        y2 = x2 @ w
        if has_bias:
            y2 = y2 + b
        out = y2.reshape(lead + (w.shape[1],))

        def vjp(g):
            g2 = g.reshape(n, w.shape[1])
            grads = {name + ".w": x2.T @ g2}
            if has_bias:
                grads[name + ".b"] = g2.sum(axis=0)
            return (g2 @ w.T).reshape(xv.shape), grads

        def vjp_wrap(g):
            dx, grads = vjp(g)
            return (dx,), grads

        return self.record("linear", (x,), out, vjp_wrap)

    # ---- shape ----

    def reshape(self, x: Var, dims) -> Var:
        dims = tuple(int(d) for d in dims)
        xv = x.array
        out = xv.reshape(dims)

        def vjp(g):
            return (g.reshape(xv.shape),), {}

        return self.record("reshape", (x,), out, vjp)

    def concat(self, xs: list, axis: int = 0) -> Var:
        arrays = [x.array for x in xs]
        out = np.concatenate(arrays, axis=axis)
        sizes = [a.shape[axis] for a in arrays]
        splits = np.cumsum(sizes)[:-1]

        def vjp(g):
            return tuple(np.split(g, splits, axis=axis)), {}

        return self.record("concat", tuple(xs), out, vjp)

    def take_rows(self, x: Var, rows) -> Var:
        """Gather rows along axis 0; rows may repeat."""
        rows = np.asarray(rows, dtype=np.int64)
        xv = x.array
        out = xv[rows]

        def vjp(g):
            dx = np.zeros_like(xv)
            np.add.at(dx, rows, g)
            return (dx,), {}

        return self.record("take_rows", (x,), out, vjp)

    def scatter_rows(self, x: Var, rows, n_out: int) -> Var:
        """Place rows of x into a zero array of n_out rows; rows must be unique."""
        rows = np.asarray(rows, dtype=np.int64)
        xv = x.array
        out = np.zeros((n_out,) + xv.shape[1:])
        out[rows] = xv

        def vjp(g):
            return (g[rows],), {}

        return self.record("scatter_rows", (x,), out, vjp)

    # ---- nonlinearities ----

    def relu(self, x: Var) -> Var:
        xv = x.array
        out = np.maximum(xv, 0.0)

        def vjp(g):
            return (g * (xv > 0.0),), {}

        return self.record("relu", (x,), out, vjp)

    def sigmoid(self, x: Var) -> Var:
        xv = x.array
        out = np.empty_like(xv)
        pos = xv >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
        ex = np.exp(xv[~pos])
        out[~pos] = ex / (1.0 + ex)

        def vjp(g):
            return (g * out * (1.0 - out),), {}

        return self.record("sigmoid", (x,), out, vjp)

    def softmax(self, x: Var, axis: int) -> Var:
        xv = x.array
        if not -xv.ndim <= axis < xv.ndim:
            raise ShapeError(f"softmax: axis {axis} invalid for dims {xv.shape}")
        shifted = xv - xv.max(axis=axis, keepdims=True)
        ex = np.exp(shifted)
        out = ex / ex.sum(axis=axis, keepdims=True)

        def vjp(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            return (out * (g - dot),), {}

        return self.record("softmax", (x,), out, vjp)

    def layer_norm(self, x: Var, gain_name: str, bias_name: str,
                   axis: int = -1, eps: float = 1e-5) -> Var:
        """Zero-mean/unit-variance over `axis`, then per-channel affine."""
        gv = self.params.value(gain_name)
        bv = self.params.value(bias_name)
        xv = x.array
        m = xv.shape[axis]
        if m < 1:
            raise ShapeError("layer_norm: axis length must be >= 1")
        mu = xv.mean(axis=axis, keepdims=True)
        var = ((xv - mu) ** 2).mean(axis=axis, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mu) * inv
        out = gv * xhat + bv

        def vjp(g):
            # reduce over all axes except the normalized one for param grads
            red = tuple(i for i in range(g.ndim) if i != (axis % g.ndim))
            dgain = (g * xhat).sum(axis=red)
            dbias = g.sum(axis=red)
            h = g * gv
            dx = inv * (h - h.mean(axis=axis, keepdims=True)
                        - xhat * (h * xhat).mean(axis=axis, keepdims=True))
            return (dx,), {gain_name: dgain, bias_name: dbias}

        return self.record("layer_norm", (x,), out, vjp)

    # ---- reductions & losses ----

    def sum(self, x: Var) -> Var:
        xv = x.array

        def vjp(g):
            return (np.full(xv.shape, float(g)),), {}

        return self.record("sum", (x,), np.asarray(xv.sum()), vjp)

    def mean(self, x: Var) -> Var:
        xv = x.array
        n = xv.size
        if n == 0:
            return self.constant(np.asarray(0.0))

        def vjp(g):
            return (np.full(xv.shape, float(g) / n),), {}

        return self.record("mean", (x,), np.asarray(xv.mean()), vjp)

    def smooth_l1(self, pred: Var, target: Var, delta: float = 1.0) -> Var:
        """Mean Huber-style loss: 0.5 d^2/delta inside the kink, |d|-0.5 delta outside."""
        if delta <= 0:
            raise ValueError("smooth_l1: delta must be positive")
        pv, tv = pred.array, target.array
        if pv.shape != tv.shape:
            raise ShapeError(f"smooth_l1: dims {pv.shape} != {tv.shape}")
        n = pv.size
        if n == 0:
            return self.constant(np.asarray(0.0))
        d = pv - tv
        ad = np.abs(d)
        quad = ad < delta
        per = np.where(quad, 0.5 * d * d / delta, ad - 0.5 * delta)
        out = np.asarray(per.mean())

        def vjp(g):
            dd = np.where(quad, d / delta, np.sign(d)) * (float(g) / n)
            return (dd, -dd), {}

        return self.record("smooth_l1", (pred, target), out, vjp)

    def bce_with_logits(self, logits: Var, targets: Var) -> Var:
        """Mean binary cross-entropy on logits (overflow-safe)."""
        zv, yv = logits.array, targets.array
        if zv.shape != yv.shape:
            raise ShapeError(f"bce_with_logits: dims {zv.shape} != {yv.shape}")
        n = zv.size
        if n == 0:
            return self.constant(np.asarray(0.0))
        per = np.maximum(zv, 0.0) - zv * yv + np.log1p(np.exp(-np.abs(zv)))
        out = np.asarray(per.mean())
        sig = 1.0 / (1.0 + np.exp(-np.abs(zv)))
        sig = np.where(zv >= 0, sig, 1.0 - sig)

        def vjp(g):
            return ((sig - yv) * (float(g) / n), None), {}

        return self.record("bce_with_logits", (logits, targets), out, vjp)

    def add_n(self, xs: list) -> Var:
        acc = xs[0]
        for x in xs[1:]:
            acc = self.add(acc, x)
        return acc


def backward(graph: ValueGraph, loss: Var) -> None:
    """Reverse accumulation from a scalar loss into graph.params.grads.

    Every registered parameter ends up with a gradient array (zeros if the
    loss never touched it); repeated calls without zeroing accumulate.
    """
    store = graph.params
    root = graph.node(loss.nid)
    if root.out.dims != ():
        raise ShapeError(f"backward: loss must be scalar, got dims {root.out.dims}")
    adjoint: dict[int, np.ndarray] = {loss.nid: np.ones(())}
    for nid in range(loss.nid, -1, -1):
        g = adjoint.pop(nid, None)
        if g is None:
            continue
        node = graph.node(nid)
        if node.vjp is None:
            continue
        in_grads, p_grads = node.vjp(g)
        for iid, ig in zip(node.inputs, in_grads):
            if ig is None:
                continue
            if iid in adjoint:
                adjoint[iid] = adjoint[iid] + ig
            else:
                adjoint[iid] = ig
        for pname, pg in p_grads.items():
            store.accumulate_grad(pname, pg)
    for name in store.names():
        if store.grads[name] is None:
            store.grads[name] = np.zeros_like(store.value(name))


def adam_step(store: ParamStore, lr: float = 1e-3,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One Adam update over every parameter; moment state lives in the store."""
    b1, b2 = betas
    store.opt_step += 1
    t = store.opt_step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in store.names():
        g = store.grads[name]
        if g is None:
            raise ValueError(f"adam_step: no gradient for parameter '{name}'")
        p = store.value(name)
        m = store.opt_state.get("m." + name)
        v = store.opt_state.get("v." + name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        store.opt_state["m." + name] = m
        store.opt_state["v." + name] = v
        store._params[name] = _freeze(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))


# ---- checkpoint serialization ----

def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<BB", 0, arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(store: ParamStore, path) -> None:
    """Write parameters plus optimizer moments in the TBRG binary format."""
    entries = [(n, store.value(n)) for n in sorted(store.names())]
    entries += [(OPT_PREFIX + k, v) for k, v in sorted(store.opt_state.items())]
    entries.append((OPT_PREFIX + "t", np.asarray([float(store.opt_step)])))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name, arr in entries:
            _write_entry(fh, name, arr)


def load_checkpoint(path) -> ParamStore:
    """Read a TBRG checkpoint into a fresh ParamStore (bit-exact round trip)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} != supported {CHECKPOINT_VERSION}"
        )
    store = ParamStore()
    off = 12
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        dtype, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        if dtype != 0:
            raise CheckpointError(f"{path}: unknown dtype code {dtype}")
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        if name == OPT_PREFIX + "t":
            store.opt_step = int(arr[0])
        elif name.startswith(OPT_PREFIX):
            store.opt_state[name[len(OPT_PREFIX):]] = arr.copy()
        else:
            store._params[name] = _freeze(arr)
            store.grads[name] = None
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return store
