"""Minimal dense-tensor engine with reverse-mode differentiation.

All data is float64. Broadcasting is deliberately restricted: element-wise
ops require identical shapes, except for Python scalars and the explicit
`add_bias` op. Matmul follows numpy batched-matmul semantics (a trailing
2-D operand is shared across leading axes, with the gradient summed back).
"""
from __future__ import annotations

import ctypes
from typing import Callable, Sequence

import numpy as np


def _tune_allocator() -> None:
    """Keep multi-megabyte temporaries on the malloc heap.

    glibc serves large allocations from fresh mmap regions by default, so
    every big numpy temporary in the training loop pays page-fault and
    zeroing costs. Raising the mmap and trim thresholds lets freed blocks
    be reused. Best effort; silently skipped on non-glibc platforms.
    """
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 512 * 1024 * 1024)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 512 * 1024 * 1024)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()

try:
    from scipy.linalg.blas import dgemm as _dgemm
except ImportError:  # pragma: no cover - scipy is optional, numpy fallback
    _dgemm = None

# below this many mixing channels the interleaved single-GEMM path wins
_CHEB_NARROW_LIMIT = 32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


def _require_same_shape(a: "Tensor", b: "Tensor", op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


class Tensor:
    """Dense float64 array participating in reverse-mode differentiation.

    A tensor created by an op keeps references to its parents and a closure
    that propagates the output gradient; `backward` replays these closures
    in reverse topological order.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"],
              backward_fn: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray, own: bool = False) -> None:
        # own=True marks arrays freshly allocated for this tensor alone,
        # which may be adopted without copying
        if self.grad is None:
            self.grad = g if own else np.array(g)
        else:
            self.grad += g

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            def back(g, a=self):
                a._accumulate(g)
            return Tensor._make(self.data + other, [self], lambda g: back(g))
        _require_same_shape(self, other, "add")

        def back(g, a=self, b=other):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)
        return Tensor._make(self.data + other.data, [self, other], back)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def back(g, a=self):
            a._accumulate(-g)
        return Tensor._make(-self.data, [self], back)

    def __sub__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return self + (-other)
        _require_same_shape(self, other, "sub")

        def back(g, a=self, b=other):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(-g)
        return Tensor._make(self.data - other.data, [self, other], back)

    def __rsub__(self, other) -> "Tensor":
        return (-self) + other

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            def back(g, a=self, c=float(other)):
                a._accumulate(g * c)
            return Tensor._make(self.data * other, [self], back)
        _require_same_shape(self, other, "mul")

        def back(g, a=self, b=other):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)
        return Tensor._make(self.data * other.data, [self, other], back)

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        a, b = self, other
        if a.data.ndim < 1 or b.data.ndim < 1:
            raise ShapeError("matmul: operands must be at least 1-D")
        if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
            raise ShapeError(
                f"matmul: inner extents differ, {a.data.shape} vs {b.data.shape}")
        if b.data.ndim == 2 and a.data.ndim >= 2:
            # stack-of-rows x shared matrix: run as one large GEMM
            lead = a.data.shape[:-1]
            k, n = b.data.shape
            a2 = np.ascontiguousarray(a.data).reshape(-1, k)
            out_data = (a2 @ b.data).reshape(*lead, n)

            def back(g, a=a, b=b, a2=a2, lead=lead, k=k, n=n):
                g2 = np.ascontiguousarray(g).reshape(-1, n)
                if a.requires_grad:
                    a._accumulate((g2 @ b.data.T).reshape(*lead, k), own=True)
                if b.requires_grad:
                    b._accumulate(a2.T @ g2, own=True)
            return Tensor._make(out_data, [a, b], back)
        out_data = a.data @ b.data

        def back(g, a=a, b=b):
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 \
                    else np.multiply.outer(g, b.data)
                a._accumulate(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b._accumulate(_unbroadcast(gb, b.data.shape))
        return Tensor._make(out_data, [a, b], back)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape

        def back(g, a=self):
            a._accumulate(g.reshape(old))
        return Tensor._make(self.data.reshape(shape), [self], back)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))

        def back(g, a=self):
            a._accumulate(g.transpose(inv))
        return Tensor._make(self.data.transpose(axes), [self], back)

    def __getitem__(self, key) -> "Tensor":
        def back(g, a=self, key=key):
            buf = np.zeros_like(a.data)
            buf[key] = g
            a._accumulate(buf)
        return Tensor._make(self.data[key], [self], back)

    # -- reductions -----------------------------------------------------------

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        axes_t = _norm_axes(axes, self.data.ndim)
        out_data = self.data.sum(axis=axes_t, keepdims=keepdims)

        def back(g, a=self):
            gg = g
            if not keepdims and axes_t is not None:
                gg = np.expand_dims(g, axes_t)
            a._accumulate(np.broadcast_to(gg, a.data.shape).copy()
                          if np.ndim(gg) else np.full_like(a.data, gg))
        return Tensor._make(out_data, [self], back)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        axes_t = _norm_axes(axes, self.data.ndim)
        n = self.data.size if axes_t is None else \
            int(np.prod([self.data.shape[ax] for ax in axes_t]))
        return self.sum(axes=axes, keepdims=keepdims) * (1.0 / n)

    def l2_norm(self, axes=None) -> "Tensor":
        """sqrt of the sum of squares over `axes` (all axes by default)."""
        sq = (self * self).sum(axes=axes)
        out_data = np.sqrt(sq.data)

        def back(g, a=self, sq=sq, out=out_data):
            # d||x||/dx = x/||x||; zero vector gets zero gradient
            with np.errstate(invalid="ignore", divide="ignore"):
                scale = np.where(out > 0.0, g / np.where(out > 0.0, out, 1.0), 0.0)
            axes_t = _norm_axes(axes, a.data.ndim)
            gg = scale if axes_t is None else np.expand_dims(scale, axes_t)
            a._accumulate(a.data * gg)
        return Tensor._make(out_data, [self], back)

    # -- nonlinearities -------------------------------------------------------

    def relu(self) -> "Tensor":
        mask = self.data > 0.0

        def back(g, a=self, mask=mask):
            a._accumulate(g * mask)
        return Tensor._make(self.data * mask, [self], back)

    def sigmoid(self) -> "Tensor":
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def back(g, a=self, y=out_data):
            a._accumulate(g * y * (1.0 - y))
        return Tensor._make(out_data, [self], back)

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def back(g, a=self, y=out_data):
            a._accumulate(g * (1.0 - y * y))
        return Tensor._make(out_data, [self], back)

    def softmax(self, axis: int) -> "Tensor":
        if not -self.data.ndim <= axis < self.data.ndim:
            raise ShapeError(f"softmax: axis {axis} invalid for shape {self.shape}")
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def back(g, a=self, y=out_data, axis=axis):
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate(y * (g - dot))
        return Tensor._make(out_data, [self], back)

    # -- backward pass --------------------------------------------------------

    def backward(self) -> None:
        """Populate .grad on every requires_grad tensor reachable from here.

        Accumulates into existing grads; callers zero leaf grads between
        optimization steps.
        """
        if self.data.ndim != 0 and self.data.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)


def _norm_axes(axes, ndim: int):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if g.shape[ax] != n:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def back(g, tensors=tuple(tensors), axis=axis, splits=splits):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)
    return Tensor._make(out_data, list(tensors), back)


def mul_const(x: Tensor, arr: np.ndarray) -> Tensor:
    """Element-wise product with a non-differentiated constant array.

    The constant may broadcast against x; x's gradient is reduced back to
    its own shape.
    """
    arr = np.asarray(arr, dtype=np.float64)
    out_data = x.data * arr

    def back(g, x=x, arr=arr):
        x._accumulate(_unbroadcast(g * arr, x.data.shape))
    return Tensor._make(out_data, [x], back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast over all leading axes (b is 1-D, trailing axis)."""
    if b.data.ndim != 1 or b.data.shape[0] != x.data.shape[-1]:
        raise ShapeError(
            f"add_bias: bias {b.data.shape} does not match trailing axis of {x.shape}")

    def back(g, x=x, b=b):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
    return Tensor._make(x.data + b.data, [x, b], back)


def channel_scale(x: Tensor, v: Tensor) -> Tensor:
    """x * v with v a 1-D vector broadcast over all leading axes."""
    if v.data.ndim != 1 or v.data.shape[0] != x.data.shape[-1]:
        raise ShapeError(
            f"channel_scale: vector {v.data.shape} does not match trailing axis "
            f"of {x.shape}")

    def back(g, x=x, v=v):
        if x.requires_grad:
            x._accumulate(g * v.data, own=True)
        if v.requires_grad:
            v._accumulate((g * x.data).reshape(-1, g.shape[-1]).sum(axis=0),
                          own=True)
    return Tensor._make(x.data * v.data, [x, v], back)


def cheb_mix(basis: np.ndarray, x: Tensor, theta: Tensor,
             attention: Tensor | None = None) -> Tensor:
    """Fused spectral graph convolution sum_k T_k x Theta_k over the joint axis.

    x is joint-major (B, J, W, C); basis is the constant (K, J, J) Chebyshev
    stack; theta is (K, C, D); attention, when given, is a (B, J, J) matrix
    modulating every T_k element-wise. The joint-major layout keeps every
    contraction a GEMM on contiguous views, with no transposed copies.
    """
    K, J, _ = basis.shape
    B, _, W, C = x.shape
    if theta.shape[:2] != (K, C) or x.data.shape[1] != J:
        raise ShapeError(f"cheb_mix: basis {basis.shape}, x {x.shape}, "
                         f"theta {theta.shape} are inconsistent")
    D = theta.shape[2]
    xv = np.ascontiguousarray(x.data).reshape(B, J, W * C)
    theta_d = theta.data
    att_d = attention.data if attention is not None else None
    if K * C <= _CHEB_NARROW_LIMIT:
        return _cheb_mix_narrow(basis, x, theta, attention, xv, B, K, J, W, C, D)
    mixed: list[np.ndarray] = []
    out2 = None
    tmp = None
    for k in range(K):
        if att_d is not None:
            mixed_k = (att_d * basis[k]) @ xv
        else:
            mixed_k = basis[k] @ xv
        mixed.append(mixed_k)
        m2 = mixed_k.reshape(B * J * W, C)
        if out2 is None:
            out2 = m2 @ theta_d[0]
            if _dgemm is None:
                tmp = np.empty_like(out2)
        elif _dgemm is not None:
            # BLAS accumulation (beta=1) on the Fortran-order transposed view
            _dgemm(1.0, theta_d[k].T, m2.T, 1.0, out2.T, overwrite_c=1)
        else:
            np.matmul(m2, theta_d[k], out=tmp)
            out2 += tmp
    out_data = out2.reshape(B, J, W, D)

    def back(g, x=x, theta=theta, attention=attention, mixed=mixed, xv=xv):
        g2 = np.ascontiguousarray(g).reshape(B * J * W, D)
        need_x = x.requires_grad
        need_att = attention is not None and attention.requires_grad
        gtheta = np.empty((K, C, D)) if theta.requires_grad else None
        gmixed_k = np.empty((B, J, W * C)) if need_x or need_att else None
        gm2 = gmixed_k.reshape(B * J * W, C) if gmixed_k is not None else None
        gxv = None
        gtmp = None
        gatt = np.zeros((B, J, J)) if need_att else None
        xvT = np.swapaxes(xv, -1, -2) if need_att else None
        if need_x and att_d is not None:
            attT = np.ascontiguousarray(np.swapaxes(att_d, -1, -2))
            basisT = np.ascontiguousarray(np.swapaxes(basis, -1, -2))
            mkT = np.empty_like(att_d)
        jj = np.empty((B, J, J)) if need_att else None
        for k in range(K):
            if gtheta is not None:
                np.matmul(mixed[k].reshape(B * J * W, C).T, g2, out=gtheta[k])
            if need_x or need_att:
                np.matmul(g2, theta.data[k].T, out=gm2)
                if need_x:
                    if att_d is not None:
                        np.multiply(attT, basisT[k], out=mkT)
                        mk = mkT
                    else:
                        mk = basis[k].T
                    if gxv is None:
                        gxv = mk @ gmixed_k
                        gtmp = np.empty_like(gxv)
                    else:
                        np.matmul(mk, gmixed_k, out=gtmp)
                        gxv += gtmp
                if need_att:
                    np.matmul(gmixed_k, xvT, out=jj)
                    jj *= basis[k]
                    gatt += jj
        if gtheta is not None:
            theta._accumulate(gtheta, own=True)
        if need_x:
            x._accumulate(gxv.reshape(B, J, W, C), own=True)
        if need_att:
            attention._accumulate(gatt, own=True)
    return Tensor._make(out_data, [x, theta] +
                        ([attention] if attention is not None else []), back)


def _cheb_mix_narrow(basis, x, theta, attention, xv, B, K, J, W, C, D) -> Tensor:
    """cheb_mix path for narrow inputs (small K*C): one interleaved GEMM.

    The (b, j, w) x (k, c) transposed copies are cheap at this size and one
    wide GEMM beats K skinny ones.
    """
    att_d = attention.data if attention is not None else None
    if att_d is not None:
        mod = (att_d[:, None] * basis[None]).reshape(B, K * J, J)
        mixed = mod @ xv
    else:
        mod = None
        mixed = basis.reshape(K * J, J) @ xv
    mixed2 = np.ascontiguousarray(
        mixed.reshape(B, K, J, W, C).transpose(0, 2, 3, 1, 4)
    ).reshape(B * J * W, K * C)
    theta2 = theta.data.reshape(K * C, D)
    out_data = (mixed2 @ theta2).reshape(B, J, W, D)

    def back(g, x=x, theta=theta, attention=attention, mixed2=mixed2,
             theta2=theta2, mod=mod, xv=xv):
        g2 = np.ascontiguousarray(g).reshape(B * J * W, D)
        if theta.requires_grad:
            theta._accumulate((mixed2.T @ g2).reshape(K, C, D), own=True)
        need_x = x.requires_grad
        need_att = attention is not None and attention.requires_grad
        if need_x or need_att:
            gmixed = np.ascontiguousarray(
                (g2 @ theta2.T).reshape(B, J, W, K, C).transpose(0, 3, 1, 2, 4)
            ).reshape(B, K * J, W * C)
            if need_x:
                if mod is not None:
                    gxv = np.swapaxes(mod, -1, -2) @ gmixed
                else:
                    gxv = basis.reshape(K * J, J).T @ gmixed
                x._accumulate(gxv.reshape(B, J, W, C), own=True)
            if need_att:
                gmod = (gmixed @ np.swapaxes(xv, -1, -2)).reshape(B, K, J, J)
                attention._accumulate((gmod * basis[None]).sum(axis=1),
                                      own=True)
    return Tensor._make(out_data, [x, theta] +
                        ([attention] if attention is not None else []), back)


def lowrank_row_attention(feats: Tensor, query_w: Tensor, key_w: Tensor) -> Tensor:
    """Fused row-stochastic attention: softmax(sigmoid((F Q)(F K)^T)) per row.

    feats is (B, N, M); query_w and key_w are (M, R) low-rank factors. One
    tape node for the whole score/squash/normalize pipeline.
    """
    if feats.data.ndim != 3:
        raise ShapeError(f"lowrank_row_attention: feats must be 3-D, "
                         f"got {feats.shape}")
    B, N, M = feats.data.shape
    if query_w.shape != key_w.shape or query_w.data.ndim != 2 \
            or query_w.shape[0] != M:
        raise ShapeError(f"lowrank_row_attention: factors {query_w.shape} / "
                         f"{key_w.shape} do not match feature width {M}")
    f2 = np.ascontiguousarray(feats.data).reshape(B * N, M)
    a = (f2 @ query_w.data).reshape(B, N, -1)
    b = (f2 @ key_w.data).reshape(B, N, -1)
    scores = a @ np.swapaxes(b, -1, -2)
    sig = 1.0 / (1.0 + np.exp(-scores))
    e = np.exp(sig - sig.max(axis=-1, keepdims=True))
    out_data = e / e.sum(axis=-1, keepdims=True)

    def back(g, feats=feats, query_w=query_w, key_w=key_w, f2=f2, a=a, b=b,
             sig=sig, p=out_data):
        gsig = p * (g - (g * p).sum(axis=-1, keepdims=True))
        gs = gsig * sig * (1.0 - sig)
        ga = (gs @ b).reshape(B * N, -1)
        gb = (np.swapaxes(gs, -1, -2) @ a).reshape(B * N, -1)
        if query_w.requires_grad:
            query_w._accumulate(f2.T @ ga, own=True)
        if key_w.requires_grad:
            key_w._accumulate(f2.T @ gb, own=True)
        if feats.requires_grad:
            gf = ga @ query_w.data.T
            gf += gb @ key_w.data.T
            feats._accumulate(gf.reshape(B, N, M), own=True)
    return Tensor._make(out_data, [feats, query_w, key_w], back)


def depthwise_tconv(x: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise same-padded convolution over axis 2 of a (B, J, W, D) tensor.

    kernel is (taps, D) with odd taps; channel d of every joint is filtered
    independently along the window axis with zero padding.
    """
    taps = kernel.shape[0]
    if taps % 2 != 1:
        raise ShapeError("depthwise_tconv: tap count must be odd")
    B, J, W, D = x.data.shape
    if kernel.shape != (taps, D):
        raise ShapeError(f"depthwise_tconv: kernel {kernel.shape} vs D={D}")
    pad = taps // 2
    xpad = np.zeros((B, J, W + taps - 1, D))
    xpad[:, :, pad:pad + W] = x.data
    out_data = xpad[:, :, 0:W] * kernel.data[0]
    tmp = np.empty_like(out_data)
    for t in range(1, taps):
        np.multiply(xpad[:, :, t:t + W], kernel.data[t], out=tmp)
        out_data += tmp

    def back(g, x=x, kernel=kernel, xpad=xpad):
        if kernel.requires_grad:
            gk = np.empty((taps, D))
            prod = np.empty((B, J, W, D))
            for t in range(taps):
                np.multiply(g, xpad[:, :, t:t + W], out=prod)
                gk[t] = prod.reshape(-1, D).sum(axis=0)
            kernel._accumulate(gk, own=True)
        if x.requires_grad:
            gpad = np.zeros_like(xpad)
            tmp = np.empty((B, J, W, D))
            for t in range(taps):
                np.multiply(g, kernel.data[t], out=tmp)
                gpad[:, :, t:t + W] += tmp
            x._accumulate(gpad[:, :, pad:pad + W], own=True)
    return Tensor._make(out_data, [x, kernel], back)


def block_tail(h: Tensor, bias: Tensor, kernel: Tensor, x: Tensor,
               resid_w: Tensor) -> Tensor:
    """Fused encoder-block tail: relu(tconv(h + bias)) + x @ resid_w.

    h and x are joint-major (B, J, W, .); bias is (D,), kernel (taps, D),
    resid_w (C_in, D). One tape node instead of five keeps per-step autodiff
    overhead off the training hot path.
    """
    taps = kernel.shape[0]
    if taps % 2 != 1:
        raise ShapeError("block_tail: tap count must be odd")
    B, J, W, D = h.data.shape
    if bias.shape != (D,) or kernel.shape != (taps, D):
        raise ShapeError(f"block_tail: bias {bias.shape} / kernel "
                         f"{kernel.shape} do not match D={D}")
    C = x.data.shape[-1]
    if x.data.shape[:3] != (B, J, W) or resid_w.shape != (C, D):
        raise ShapeError(f"block_tail: x {x.shape} / resid_w {resid_w.shape} "
                         f"do not match h {h.shape}")
    pad = taps // 2
    kd = kernel.data
    hb = h.data + bias.data
    conv = hb * kd[pad]
    tmp = np.empty_like(conv)
    for t in range(taps):
        off = t - pad  # zero padding: out[w] += hb[w + off] * k[t]
        if off > 0:
            np.multiply(hb[:, :, off:], kd[t], out=tmp[:, :, :W - off])
            conv[:, :, :W - off] += tmp[:, :, :W - off]
        elif off < 0:
            np.multiply(hb[:, :, :W + off], kd[t], out=tmp[:, :, -off:])
            conv[:, :, -off:] += tmp[:, :, -off:]
    mask = conv > 0.0
    x2 = x.data.reshape(B * J * W, C)
    out_data = (x2 @ resid_w.data).reshape(B, J, W, D)
    np.add(out_data, conv, out=out_data, where=mask)

    def back(g, h=h, bias=bias, kernel=kernel, x=x, resid_w=resid_w,
             hb=hb, mask=mask, x2=x2):
        g2 = np.ascontiguousarray(g).reshape(B * J * W, D)
        if resid_w.requires_grad:
            resid_w._accumulate(x2.T @ g2, own=True)
        if x.requires_grad:
            x._accumulate((g2 @ resid_w.data.T).reshape(B, J, W, C), own=True)
        gc = g * mask
        kd = kernel.data
        if kernel.requires_grad:
            gk = np.empty((taps, D))
            prod = np.empty_like(gc)
            for t in range(taps):
                off = t - pad
                if off > 0:
                    np.multiply(gc[:, :, :W - off], hb[:, :, off:],
                                out=prod[:, :, :W - off])
                    gk[t] = prod[:, :, :W - off].sum(axis=(0, 1, 2))
                elif off < 0:
                    np.multiply(gc[:, :, -off:], hb[:, :, :W + off],
                                out=prod[:, :, -off:])
                    gk[t] = prod[:, :, -off:].sum(axis=(0, 1, 2))
                else:
                    np.multiply(gc, hb, out=prod)
                    gk[t] = prod.reshape(-1, D).sum(axis=0)
            kernel._accumulate(gk, own=True)
        if h.requires_grad or bias.requires_grad:
            gh = gc * kd[pad]
            tmp = np.empty_like(gh)
            for t in range(taps):
                off = t - pad
                if off > 0:
                    np.multiply(gc[:, :, :W - off], kd[t],
                                out=tmp[:, :, off:])
                    gh[:, :, off:] += tmp[:, :, off:]
                elif off < 0:
                    np.multiply(gc[:, :, -off:], kd[t],
                                out=tmp[:, :, :W + off])
                    gh[:, :, :W + off] += tmp[:, :, :W + off]
            if bias.requires_grad:
                bias._accumulate(gh.reshape(-1, D).sum(axis=0), own=True)
            if h.requires_grad:
                h._accumulate(gh, own=True)
    return Tensor._make(out_data, [h, bias, kernel, x, resid_w], back)


def time_mix(e: Tensor, x: Tensor) -> Tensor:
    """Window-axis mixing of a joint-major (B, J, W, C) tensor.

    out[b,j,u,c] = sum_w e[b,u,w] x[b,j,w,c] with e of shape (B, W, W).
    """
    B, J, W, C = x.data.shape
    out_data = np.matmul(e.data[:, None], x.data)

    def back(g, e=e, x=x):
        if e.requires_grad:
            ge = np.matmul(g, np.swapaxes(x.data, -1, -2)).sum(axis=1)
            e._accumulate(ge, own=True)
        if x.requires_grad:
            gx = np.matmul(np.swapaxes(e.data, -1, -2)[:, None], g)
            x._accumulate(gx, own=True)
    return Tensor._make(out_data, [e, x], back)


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                           h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, element by element."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    if f(x) != f(x):  # also traps NaN
        raise ValueError("finite_difference_grad: f is not deterministic at x")
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
