"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable op returns a new :class:`Tensor` that remembers its inputs
and a backward rule, and is stamped with a global sequence number. ``backward``
collects the graph reachable from the output and replays the rules in exactly
the reverse of execution order. Gradients accumulate (``+=``), so a tensor used
by two consumers receives both contributions.

There is no broadcasting except bias addition in :func:`linear` and
:func:`conv2d`.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import XorShift64Star

_seq = itertools.count()
_state = threading.local()


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN or infinite."""


class ShapeError(ValueError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording backward rules (inference)."""
    old = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], rule) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("forward produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._seq = next(_seq)
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = rule
    else:
        out._parents = ()
        out._backward = None
    return out


def graph_nodes(output: Tensor) -> list[Tensor]:
    """Recorded op outputs reachable from ``output``, in execution order."""
    seen = set()
    nodes = []
    stack = [output]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._backward is not None:
            nodes.append(t)
            stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def backward(output: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` on every tensor that requires it.

    ``grad`` defaults to 1 and may only be omitted for scalar outputs.
    """
    if grad is None:
        if output.data.size != 1:
            raise ShapeError("backward without a seed gradient needs a scalar output")
        grad = np.ones_like(output.data)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != output.shape:
        raise ShapeError(f"seed gradient {grad.shape} does not match output {output.shape}")
    nodes = graph_nodes(output)
    # intermediate gradients start fresh each pass; leaves keep accumulating
    for n in nodes:
        n.grad = None
    output._accumulate(grad)
    for node in reversed(nodes):
        if node.grad is None:
            continue
        if not np.all(np.isfinite(node.grad)):
            raise NonFiniteError("non-finite gradient during backward")
        node._backward(node.grad)


def _check_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in {p.name or 'parameter'}")


# ---------------------------------------------------------------- ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")

    def rule(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), rule)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def rule(g):
        x._accumulate(g * pos)

    return _result(np.where(pos, x.data, 0.0), (x,), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for x (N, D), weight (D, M), bias (M,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot multiply {x.shape} by {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match {weight.shape[1]} outputs")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def rule(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _result(out, parents, rule)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def rule(g):
        x._accumulate(g.reshape(x.shape))

    return _result(out, (x,), rule)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def rule(g):
        x._accumulate(g.transpose(inverse))

    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].data.ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def rule(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, rule)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(
    x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """2-D cross-correlation of x (N, C, H, W) with kernels (F, C, kh, kw)."""
    if x.data.ndim != 4 or kernels.data.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    n, c, h, w = x.shape
    f, _, kh, kw = kernels.shape
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {f} filters")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernels.data.reshape(f, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def rule(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        if kernels.requires_grad:
            kernels._accumulate((g2.T @ cols).reshape(kernels.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            x._accumulate(dxp[:, :, padding : padding + h, padding : padding + w])

    return _result(np.ascontiguousarray(out), parents, rule)


def maxpool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Max over ``window`` x ``window`` patches; ties pick the first in row-major order."""
    stride = stride or window
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, window, stride, 0), _conv_out(w, window, stride, 0)
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: window {window} larger than input {h}x{w}")
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        di, dj = np.divmod(arg, window)
        rows = np.arange(ho)[None, None, :, None] * stride + di
        cols = np.arange(wo)[None, None, None, :] * stride + dj
        plane = (np.arange(n * c).reshape(n, c, 1, 1)) * (h * w)
        idx = (plane + rows * w + cols).ravel()
        dx = np.bincount(idx, weights=g.ravel(), minlength=n * c * h * w)
        x._accumulate(dx.reshape(x.shape))

    return _result(np.ascontiguousarray(out), (x,), rule)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if x.data.ndim != 4 or factor < 1:
        raise ShapeError("upsample_nearest expects (N, C, H, W) and factor >= 1")
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def rule(g):
        x._accumulate(g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _result(out, (x,), rule)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if n == 0:
        raise ShapeError("softmax_cross_entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"labels must lie in 0..{k - 1}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(lse - z[np.arange(n), labels])

    def rule(g):
        p = softmax(logits.data)
        p[np.arange(n), labels] -= 1.0
        logits._accumulate(p * (g / n))

    return _result(np.array(loss), (logits,), rule)


def pixel_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Cross-entropy over every pixel of (N, K, H, W) logits and (N, H, W) labels."""
    n, k, h, w = logits.shape
    flat = reshape(transpose(logits, (0, 2, 3, 1)), (n * h * w, k))
    return softmax_cross_entropy(flat, np.asarray(labels).reshape(-1))


# ---------------------------------------------------------------- training


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Iterable[Tensor], learning_rate: float) -> None:
    """Plain gradient descent: ``p -= lr * grad``."""
    params = list(params)
    _check_grads(params)
    for p in params:
        if p.grad is not None:
            p.data -= learning_rate * p.grad


class SGD:
    """Gradient descent with optional classical momentum."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        if not self.momentum:
            sgd_step(self.params, self.lr)
            return
        _check_grads(self.params)
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v


def glorot_uniform(shape: Sequence[int], fan_in: int, fan_out: int, rng: XorShift64Star) -> np.ndarray:
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    count = int(np.prod(shape))
    return rng.uniform_array(-limit, limit, count).reshape(shape)


# ---------------------------------------------------------------- checking


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-5,
    seed: int = 0,
) -> float:
    """Worst relative disagreement between backprop and central differences.

    The output is reduced to a scalar by a fixed random projection. For each
    input the error is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|)``; the largest over all inputs is returned.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    proj = np.random.default_rng(seed).uniform(-1.0, 1.0, size=out.shape)
    backward(out, proj)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                up = float(np.sum(fn(*inputs).data * proj))
                flat[i] = orig - epsilon
                down = float(np.sum(fn(*inputs).data * proj))
                flat[i] = orig
                numeric.reshape(-1)[i] = (up - down) / (2 * epsilon)
        scale = max(np.abs(analytic).max(), np.abs(numeric).max())
        if scale == 0.0:
            continue
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    return worst


# ---------------------------------------------------------------- checkpoints

MAGIC = b"DMK1"


def save_checkpoint(params: dict[str, Tensor | np.ndarray], path: str | Path) -> None:
    """Little-endian records: name length, name, rank, dims, float64 payload."""
    chunks = [MAGIC]
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a DMK1 checkpoint")
    out = {}
    pos = 4
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = 8 * count
            if pos + nbytes > len(blob):
                raise ValueError("truncated payload")
            out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out
