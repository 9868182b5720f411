"""Minimal dense-tensor reverse-mode differentiation.

Everything the embedding network and its losses need is covered by a fixed
vocabulary of operations, each with a hand-written backward rule.  Ops are
recorded on a ``Tape`` in execution order, so the reverse pass is a single
walk over the node list from back to front.  There is no graph compiler,
no broadcasting cleverness beyond what the ops document, and no support
for higher-order derivatives.

Float64 is the default dtype because central-difference gradient checking
is unreliable in float32; training can switch to float32 for speed.
"""

from __future__ import annotations

import numpy as np

OP_KINDS = (
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d",
    "prelu",
    "flatten",
    "l2_normalize",
    "dot",
    "sum",
    "scale",
)


class ShapeError(ValueError):
    """Raised when an op receives incompatibly shaped inputs."""


class Tensor:
    """A dense n-d array bound to a position on a tape.

    ``data`` is always a numpy array owned by this node; ``node_id`` is the
    index of the node on its tape.  Tensors are created through ``Tape``
    methods, never directly.
    """

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data: np.ndarray, tape: "Tape", node_id: int):
        self.data = data
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node_id})"


class _Node:
    """One recorded operation: which inputs fed it and how to push gradients back."""

    __slots__ = ("kind", "input_ids", "backward_fn")

    def __init__(self, kind, input_ids, backward_fn):
        self.kind = kind
        self.input_ids = input_ids
        self.backward_fn = backward_fn  # (grad_out, grads) -> None, accumulates in-place


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _conv_windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Sliding conv windows of a padded NCHW array, shape (N, C, Ho, Wo, kh, kw)."""
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


class Tape:
    """Ordered record of operations for one forward computation.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction.  ``backward`` walks it once in reverse.
    Tapes are single-threaded objects; build one per forward pass.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[_Node] = []
        self._values: list[np.ndarray] = []
        self.parameters: list[int] = []  # node ids of trainable leaves

    # ------------------------------------------------------------------ leaves

    def leaf(self, data, trainable: bool = False) -> Tensor:
        """Record an input tensor.  Trainable leaves receive gradients."""
        # np.array keeps 0-d scalars 0-d (ascontiguousarray would promote them)
        arr = np.array(data, dtype=self.dtype, order="C", copy=True)
        node_id = self._record("leaf", (), None, arr)
        if trainable:
            self.parameters.append(node_id)
        return Tensor(arr, self, node_id)

    def _record(self, kind, input_ids, backward_fn, value: np.ndarray) -> int:
        node_id = len(self.nodes)
        self.nodes.append(_Node(kind, input_ids, backward_fn))
        self._values.append(value)
        return node_id

    def _out(self, kind, inputs, backward_fn, value: np.ndarray) -> Tensor:
        value = np.asarray(value, dtype=self.dtype)
        node_id = self._record(kind, tuple(t.node_id for t in inputs), backward_fn, value)
        return Tensor(value, self, node_id)

    def _check(self, t: Tensor) -> Tensor:
        if t.tape is not self:
            raise ValueError("tensor belongs to a different tape")
        return t

    # -------------------------------------------------------------- arithmetic

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise sum; numpy broadcasting allowed (e.g. bias over a batch)."""
        return self._broadcast_op("add", a, b, np.add, lambda g, av, bv: (g, g))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self._broadcast_op("sub", a, b, np.subtract, lambda g, av, bv: (g, -g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        return self._broadcast_op("mul", a, b, np.multiply,
                                  lambda g, av, bv: (g * bv, g * av))

    def _broadcast_op(self, kind, a, b, fwd, bwd):
        self._check(a), self._check(b)
        try:
            value = fwd(a.data, b.data)
        except ValueError:
            raise ShapeError(
                f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None
        a_shape, b_shape = a.shape, b.shape
        av, bv = a.data, b.data

        def backward(g, grads):
            ga, gb = bwd(g, av, bv)
            grads[a.node_id] += _unbroadcast(ga, a_shape)
            grads[b.node_id] += _unbroadcast(gb, b_shape)

        return self._out(kind, (a, b), backward, value)

    def scale(self, x: Tensor, c: float) -> Tensor:
        """Multiply by a python constant (not a differentiable input)."""
        self._check(x)
        c = float(c)

        def backward(g, grads):
            grads[x.node_id] += c * g

        return self._out("scale", (x,), backward, c * x.data)

    # ------------------------------------------------------------variant linear

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """2-D matrix product (m,k) @ (k,n) -> (m,n)."""
        self._check(a), self._check(b)
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        av, bv = a.data, b.data

        def backward(g, grads):
            grads[a.node_id] += g @ bv.T
            grads[b.node_id] += av.T @ g

        return self._out("matmul", (a, b), backward, av @ bv)

    def dot(self, a: Tensor, b: Tensor) -> Tensor:
        """Inner product of two 1-D vectors -> scalar."""
        self._check(a), self._check(b)
        if a.data.ndim != 1 or a.shape != b.shape:
            raise ShapeError(f"dot: need equal 1-d shapes, got {a.shape} and {b.shape}")
        av, bv = a.data, b.data

        def backward(g, grads):
            grads[a.node_id] += g * bv
            grads[b.node_id] += g * av

        return self._out("dot", (a, b), backward, av @ bv)

    def sum(self, x: Tensor) -> Tensor:
        """Sum of all elements -> scalar."""
        self._check(x)
        shape = x.shape

        def backward(g, grads):
            grads[x.node_id] += np.broadcast_to(g, shape)

        return self._out("sum", (x,), backward, x.data.sum())

    def flatten(self, x: Tensor) -> Tensor:
        """(N, ...) -> (N, prod(...)), keeping the batch axis."""
        self._check(x)
        if x.data.ndim < 2:
            raise ShapeError(f"flatten: need a batch dimension, got {x.shape}")
        shape = x.shape
        n = shape[0]

        def backward(g, grads):
            grads[x.node_id] += g.reshape(shape)

        return self._out("flatten", (x,), backward, x.data.reshape(n, -1))

    # -------------------------------------------------------------- nonlinear

    def prelu(self, x: Tensor, slope: Tensor) -> Tensor:
        """Parametric ReLU with a single trainable scalar slope."""
        self._check(x), self._check(slope)
        if slope.data.size != 1:
            raise ShapeError(f"prelu: slope must be scalar, got shape {slope.shape}")
        xv = x.data
        a = float(slope.data.reshape(()))
        pos = xv > 0
        value = np.where(pos, xv, a * xv)

        def backward(g, grads):
            grads[x.node_id] += g * np.where(pos, 1.0, a)
            grads[slope.node_id] += np.sum(g * np.where(pos, 0.0, xv)).reshape(
                slope.data.shape)

        return self._out("prelu", (x, slope), backward, value)

    def l2_normalize(self, x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
        """Divide by the euclidean norm along ``axis`` (rows by default)."""
        self._check(x)
        norm = np.sqrt(np.sum(x.data**2, axis=axis, keepdims=True))
        if np.any(norm <= eps):
            raise ValueError(f"l2_normalize: vector norm below {eps}")
        y = x.data / norm

        def backward(g, grads):
            inner = np.sum(g * y, axis=axis, keepdims=True)
            grads[x.node_id] += (g - y * inner) / norm

        return self._out("l2_normalize", (x,), backward, y)

    def conv2d(self, x: Tensor, weight: Tensor, stride: int = 1,
               padding: int = 0) -> Tensor:
        """2-D convolution, NCHW input against an OIHW kernel, zero padding.

        Implemented by im2col: forward and both backward contractions are
        einsums over strided sliding windows.
        """
        self._check(x), self._check(weight)
        if x.data.ndim != 4 or weight.data.ndim != 4:
            raise ShapeError(
                f"conv2d: need NCHW input and OIHW kernel, got {x.shape} and "
                f"{weight.shape}")
        n, c, h, w = x.shape
        co, ci, kh, kw = weight.shape
        if ci != c:
            raise ShapeError(
                f"conv2d: input has {c} channels but kernel expects {ci} "
                f"(shapes {x.shape} and {weight.shape})")
        if h + 2 * padding < kh or w + 2 * padding < kw:
            raise ShapeError(
                f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = _conv_windows(xp, kh, kw, stride)
        value = np.einsum("nchwij,ocij->nohw", windows, weight.data, optimize=True)
        wv = weight.data

        def backward(g, grads):
            grads[weight.node_id] += np.einsum("nchwij,nohw->ocij", windows, g,
                                               optimize=True)
            # scatter g * W back onto the padded input, then crop the padding
            gx = np.zeros_like(xp)
            contrib = np.einsum("nohw,ocij->nchwij", g, wv, optimize=True)
            ho, wo = g.shape[2], g.shape[3]
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                        contrib[:, :, :, :, i, j]
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
            grads[x.node_id] += gx

        return self._out("conv2d", (x, weight), backward, value)

    # ------------------------------------------------------------- fused rules

    def custom(self, kind: str, inputs: tuple[Tensor, ...], value: np.ndarray,
               backward_fn) -> Tensor:
        """Record an operation with a caller-supplied backward rule.

        Used by the loss suite for numerically fused constructions
        (log-sum-exp cross-entropy, the angular-margin transform) whose
        gradients are hand-derived rather than composed from primitives.
        """
        for t in inputs:
            self._check(t)
        return self._out(kind, inputs, backward_fn, value)

    # -------------------------------------------------------------- dispatch

    def apply(self, kind: str, *inputs: Tensor, **kwargs) -> Tensor:
        """Dispatch by op name over the fixed vocabulary."""
        if kind not in OP_KINDS:
            raise ValueError(f"unknown op kind {kind!r}; known: {OP_KINDS}")
        return getattr(self, kind)(*inputs, **kwargs)

    # -------------------------------------------------------------- backward

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradient of a scalar loss w.r.t. every trainable leaf.

        Visits each node exactly once in reverse recording order, so the
        result is deterministic and bit-identical across repeated runs.
        """
        self._check(loss)
        if loss.data.size != 1:
            raise ValueError(
                f"backward: loss must be scalar, got shape {loss.shape}")
        grads: list[np.ndarray] = [
            np.zeros_like(self._values[i]) for i in range(len(self.nodes))
        ]
        grads[loss.node_id] = np.ones_like(self._values[loss.node_id])
        for node_id in range(loss.node_id, -1, -1):
            node = self.nodes[node_id]
            if node.backward_fn is not None:
                node.backward_fn(grads[node_id], grads)
        return {pid: grads[pid] for pid in self.parameters}


def grad_check(build_fn, inputs: list[np.ndarray], h: float = 1e-5,
               dtype=np.float64) -> float:
    """Max relative error between tape gradients and central differences.

    ``build_fn(tape, *tensors)`` must construct a scalar loss from trainable
    leaves created out of ``inputs``.  The relative error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`` maximised
    over every element of every input.  Probe points must sit away from
    non-smooth regions (prelu kinks, margin fallback boundaries); that is
    the caller's responsibility.
    """
    tape = Tape(dtype=dtype)
    tensors = [tape.leaf(x, trainable=True) for x in inputs]
    loss = build_fn(tape, *tensors)
    analytic = tape.backward(loss)

    def eval_at(point_arrays):
        t = Tape(dtype=dtype)
        ts = [t.leaf(x) for x in point_arrays]
        return float(build_fn(t, *ts).data)

    worst = 0.0
    for k, x in enumerate(inputs):
        an = analytic[tensors[k].node_id]
        flat = np.asarray(x, dtype=np.float64).ravel()
        for idx in range(flat.size):
            plus = [np.array(v, dtype=np.float64) for v in inputs]
            minus = [np.array(v, dtype=np.float64) for v in inputs]
            plus[k].ravel()[idx] += h
            minus[k].ravel()[idx] -= h
            numeric = (eval_at(plus) - eval_at(minus)) / (2 * h)
            a = float(an.ravel()[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
