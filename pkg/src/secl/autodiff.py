"""Dense-tensor reverse-mode automatic differentiation on numpy arrays.

Tensors wrap an ndarray and record the op that produced them; calling
``backward()`` on a scalar walks the graph in reverse topological order and
accumulates gradients on every tensor created with ``requires_grad=True``.
Tensors are treated as immutable after creation.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GradCheckReport:
    """Per-coordinate relative errors from a finite-difference comparison."""

    def __init__(self, rel_errors):
        self.rel_errors = np.asarray(rel_errors, dtype=np.float64)

    @property
    def max_rel_error(self):
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    @property
    def mean_rel_error(self):
        return float(self.rel_errors.mean()) if self.rel_errors.size else 0.0

    def __repr__(self):
        return (f"GradCheckReport(n={self.rel_errors.size}, "
                f"max={self.max_rel_error:.3e}, mean={self.mean_rel_error:.3e})")


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (inference mode).

    Forward numerics are unchanged; only the backward bookkeeping is skipped,
    so wrapped code runs faster and retains no intermediate buffers.
    """

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _corr3d(x, w, padding, stride):
    """Raw im2col cross-correlation on ndarrays, channels-last.

    x: (N,D,H,W,Ci); w: (k,k,k,Ci,Co). Returns (out, cols, wmat, xp) so the
    caller can reuse the column matrix for the weight gradient.
    """
    n = x.shape[0]
    ci = x.shape[-1]
    k, _, _, _, co = w.shape
    xp = np.pad(x, ((0, 0),) + ((padding, padding),) * 3 + ((0, 0),)) \
        if padding else x
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]  # (N,Do,Ho,Wo,Ci,k,k,k)
    do, ho, wo = win.shape[1:4]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4))
    cols = cols.reshape(n * do * ho * wo, k ** 3 * ci)
    wmat = w.reshape(k ** 3 * ci, co)
    out = (cols @ wmat).reshape(n, do, ho, wo, co)
    return out, cols, wmat, xp


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "op")

    def __init__(self, data, requires_grad=False, dtype=None, op="leaf"):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()
        self.op = op

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _lift(x, like):
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=like.data.dtype))

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _init_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    def _make(self, data, parents, backward, op):
        out = Tensor(data, op=op)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- elementwise arithmetic (broadcasting) --------------------------------

    def __add__(self, other):
        other = Tensor._lift(other, self)
        out_data = self.data + other.data

        def backward(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))

        return self._make(out_data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        return self._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        other = Tensor._lift(other, self)
        out_data = self.data - other.data

        def backward(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape))

        return self._make(out_data, (self, other), backward, "sub")

    def __rsub__(self, other):
        return Tensor._lift(other, self) - self

    def __mul__(self, other):
        other = Tensor._lift(other, self)
        out_data = self.data * other.data

        def backward(g):
            return (_unbroadcast(g * other.data, self.shape),
                    _unbroadcast(g * self.data, other.shape))

        return self._make(out_data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other, self)
        out_data = self.data / other.data

        def backward(g):
            return (_unbroadcast(g / other.data, self.shape),
                    _unbroadcast(-g * self.data / (other.data ** 2), other.shape))

        return self._make(out_data, (self, other), backward, "div")

    def __rtruediv__(self, other):
        return Tensor._lift(other, self) / self

    def __pow__(self, exponent):
        assert isinstance(exponent, (int, float))
        out_data = self.data ** exponent

        def backward(g):
            return (g * exponent * self.data ** (exponent - 1),)

        return self._make(out_data, (self,), backward, f"pow{exponent}")

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            return (g * out_data,)

        return self._make(out_data, (self,), backward, "exp")

    def log(self):
        out_data = np.log(self.data)

        def backward(g):
            return (g / self.data,)

        return self._make(out_data, (self,), backward, "log")

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(g):
            return (g * 0.5 / out_data,)

        return self._make(out_data, (self,), backward, "sqrt")

    def relu(self):
        mask = self.data > 0
        out_data = np.where(mask, self.data, 0)

        def backward(g):
            return (g * mask,)

        return self._make(out_data, (self,), backward, "relu")

    def clamp_min(self, floor):
        """max(x, floor) for a scalar floor; gradient passes where x > floor."""
        mask = self.data > floor
        out_data = np.where(mask, self.data, floor)

        def backward(g):
            return (g * mask,)

        return self._make(out_data, (self,), backward, "clamp_min")

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape, ndim = self.shape, self.data.ndim

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(a % ndim for a in axes)
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape).copy(),)

        return self._make(out_data, (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for a in axes:
                n *= self.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def norm(self, axis=None, keepdims=False, eps=0.0):
        """L2 norm; `eps` floors the norm inside the backward pass only."""
        out_data = np.sqrt((self.data ** 2).sum(axis=axis, keepdims=keepdims))
        shape, ndim = self.shape, self.data.ndim

        def backward(g):
            denom = np.maximum(out_data, eps) if eps else out_data
            if axis is None:
                return (np.broadcast_to(g / denom, shape) * self.data,)
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(a % ndim for a in axes)
            gg, dd = g, denom
            if not keepdims:
                gg = np.expand_dims(g, axes)
                dd = np.expand_dims(denom, axes)
            return (np.broadcast_to(gg / dd, shape) * self.data,)

        return self._make(out_data, (self,), backward, "norm")

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out_data = self.data.reshape(shape)

        def backward(g):
            return (g.reshape(old),)

        return self._make(out_data, (self,), backward, "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out_data = self.data.transpose(axes)

        def backward(g):
            return (g.transpose(inv),)

        return self._make(out_data, (self,), backward, "transpose")

    @property
    def T(self):
        return self.transpose(tuple(range(self.data.ndim))[::-1])

    def take(self, indices):
        """Gather elements of the flattened tensor; backward scatter-adds."""
        indices = np.asarray(indices)
        out_data = self.data.reshape(-1)[indices]
        shape = self.shape

        def backward(g):
            gx = np.zeros(self.size, dtype=g.dtype)
            np.add.at(gx, indices.reshape(-1), g.reshape(-1))
            return (gx.reshape(shape),)

        return self._make(out_data, (self,), backward, "take")

    # -- linear algebra ------------------------------------------------------------

    def matmul(self, other):
        other = Tensor._lift(other, self)
        out_data = self.data @ other.data

        def backward(g):
            return (g @ other.data.T, self.data.T @ g)

        return self._make(out_data, (self, other), backward, "matmul")

    __matmul__ = matmul

    # -- neural-net primitives -------------------------------------------------------

    def log_softmax(self, axis=-1):
        m = self.data.max(axis=axis, keepdims=True)
        shifted = self.data - m
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out_data = shifted - lse

        def backward(g):
            return (g - np.exp(out_data) * g.sum(axis=axis, keepdims=True),)

        return self._make(out_data, (self,), backward, "log_softmax")

    def conv3d(self, weight, bias=None, stride=1, padding=1):
        """3-D cross-correlation, channels-last.

        self: (N,D,H,W,Ci); weight: (k,k,k,Ci,Co). The layout keeps im2col
        and its transpose contiguous, which dominates CPU conv time.
        """
        x, w = self.data, weight.data
        n, d, h, wd, ci = x.shape
        k, _, _, ci_w, co = w.shape
        if ci != ci_w:
            raise ValueError(f"conv3d channel mismatch: input {ci}, weight {ci_w}")
        out_data, cols, wmat, xp = _corr3d(x, w, padding, stride)
        do, ho, wo = out_data.shape[1:4]
        if bias is not None:
            out_data = out_data + bias.data
        parents = (self, weight) + ((bias,) if bias is not None else ())

        needs_gx = self.requires_grad or self._parents

        def backward(g):
            gout = g.reshape(n * do * ho * wo, co)
            gw = (cols.T @ gout).reshape(w.shape)
            gx = None
            if needs_gx and stride == 1 and k - 1 - padding >= 0:
                # input gradient = correlation of gout with the flipped,
                # channel-transposed kernel (transposed convolution)
                wflip = w[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3)
                gx = _corr3d(g, np.ascontiguousarray(wflip),
                             k - 1 - padding, 1)[0]
            elif needs_gx:
                gcols = (gout @ wmat.T).reshape(n, do, ho, wo, k, k, k, ci)
                gxp = np.zeros_like(xp)
                for a in range(k):
                    for b in range(k):
                        for c in range(k):
                            gxp[:,
                                a:a + do * stride:stride,
                                b:b + ho * stride:stride,
                                c:c + wo * stride:stride] += gcols[:, :, :, :, a, b, c]
                gx = gxp[:, padding:padding + d, padding:padding + h,
                         padding:padding + wd] if padding else gxp
            if gx is None:
                gx = np.zeros_like(x)
            grads = (gx, gw)
            if bias is not None:
                grads = grads + (gout.sum(axis=0),)
            return grads

        return self._make(out_data, parents, backward, "conv3d")

    def max_pool3d(self, k=2):
        """Non-overlapping max pooling (channels-last); extents must divide."""
        n, d, h, w, c = self.shape
        if d % k or h % k or w % k:
            raise ValueError(f"max_pool3d: extents {(d, h, w)} not divisible by {k}")
        do, ho, wo = d // k, h // k, w // k
        v = self.data.reshape(n, do, k, ho, k, wo, k, c)
        v = v.transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(n, do, ho, wo, c, k ** 3)
        idx = v.argmax(axis=-1)
        out_data = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]

        def backward(g):
            gv = np.zeros((n, do, ho, wo, c, k ** 3), dtype=g.dtype)
            np.put_along_axis(gv, idx[..., None], g[..., None], axis=-1)
            gv = gv.reshape(n, do, ho, wo, c, k, k, k)
            gv = gv.transpose(0, 1, 5, 2, 6, 3, 7, 4)
            return (gv.reshape(n, d, h, w, c),)

        return self._make(out_data, (self,), backward, "max_pool3d")

    def upsample_nearest3d(self, k=2):
        """Nearest-neighbor spatial upsampling by integer factor k."""
        n, d, h, w, c = self.shape
        out_data = (self.data
                    .repeat(k, axis=1).repeat(k, axis=2).repeat(k, axis=3))

        def backward(g):
            gv = g.reshape(n, d, k, h, k, w, k, c)
            return (gv.sum(axis=(2, 4, 6)),)

        return self._make(out_data, (self,), backward, "upsample_nearest3d")

    # -- graph traversal -----------------------------------------------------------

    def _topo(self):
        order, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order

    def backward(self):
        if self.size != 1:
            raise ValueError(f"backward() requires a scalar loss; got shape {self.shape}")
        if np.isnan(self.data):
            raise FloatingPointError(f"NaN loss produced by op '{self.op}'")
        order = self._topo()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if not parent.requires_grad and parent._backward is None:
                    continue
                if np.isnan(g).any():
                    raise FloatingPointError(
                        f"NaN gradient flowing into op '{parent.op}' from '{node.op}'")
                parent._init_grad()
                parent.grad += g


def concat(tensors, axis=0):
    """Concatenate tensors along `axis`; backward splits the gradient."""
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    out = Tensor(out_data, op="concat")
    if _grad_enabled and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        out._parents = tuple(tensors)
        out._backward = backward
    return out


def stack(tensors, axis=0):
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + axis + 1, 1)
        expanded.append(t.reshape(shape))
    return concat(expanded, axis=axis)


def cosine_similarity(u, v, eps=1e-12):
    """u.v / max(|u||v|, eps) for 1-D tensors; differentiable."""
    dot = (u * v).sum()
    denom = (u.norm(eps=eps) * v.norm(eps=eps)).clamp_min(eps)
    return dot / denom


def eval_with_gradients(loss, leaves):
    """Backward from a scalar loss; returns (value, per-leaf gradient arrays).

    Leaves not on the path to the loss get exactly-zero gradients.
    """
    for leaf in leaves:
        leaf.zero_grad()
    loss.backward()
    grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
             for leaf in leaves]
    return loss.item(), grads


def grad_check(fn, params, h=1e-3, max_coords_per_param=None, seed=0,
               skip_nonsmooth=False):
    """Compare autodiff gradients of scalar `fn(params)` to central differences.

    `params` is a list of f64 leaf Tensors. When a tensor has more coordinates
    than `max_coords_per_param`, a random subset is probed.

    With `skip_nonsmooth`, every probed coordinate must first pass a
    step-halving consistency check: the central differences at h and h/2 must
    agree to 1e-5 relative. A coordinate that fails sits within h of a
    non-differentiable point (a relu kink or pooling argmax switch), where the
    finite-difference oracle itself is invalid; another coordinate is drawn in
    its place. The check uses only finite-difference data, so it cannot mask a
    wrong analytic gradient.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters")
        p.zero_grad()
    loss = fn(params)
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    rel_errors = []
    for p, ga in zip(params, analytic):
        n = p.size
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)

        def central(i, hh):
            orig = flat[i]
            flat[i] = orig + hh
            fp = fn(params).item()
            flat[i] = orig - hh
            fm = fn(params).item()
            flat[i] = orig
            return (fp - fm) / (2 * hh)

        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = list(rng.choice(n, size=max_coords_per_param,
                                     replace=False))
            spare = ([i for i in rng.permutation(n) if i not in set(coords)]
                     if skip_nonsmooth else [])
        else:
            coords = list(range(n))
            spare = []
        while coords:
            i = coords.pop(0)
            numeric = central(i, h)
            if skip_nonsmooth:
                half = central(i, h / 2)
                scale = max(abs(numeric), abs(half), 1e-8)
                if abs(numeric - half) / scale > 1e-5:
                    if spare:
                        coords.append(spare.pop(0))
                    continue
            a = gflat[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            rel_errors.append(abs(a - numeric) / denom)
    return GradCheckReport(rel_errors)
