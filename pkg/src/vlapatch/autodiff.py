"""Recorded-graph reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every primitive applied to its tensors.  Calling
:meth:`Tape.backprop` on a scalar output walks the record backwards once and
returns exact gradients for the requested inputs.

    tape = Tape()
    x = tape.input(np.array([1.0, 2.0]))
    y = tape.sum(tape.mul(x, x))
    (gx,) = tape.backprop(y, [x])      # -> [2., 4.]

Only tensors that (transitively) depend on a ``requires_grad`` input are
recorded, so constant sub-graphs such as frozen model weights cost nothing on
the backward pass.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Raised when an operator receives operands of incompatible shapes."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        shape_txt = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shape_txt}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tensor:
    """A node in a :class:`Tape`.  ``value`` is a float64 ndarray."""

    __slots__ = ("value", "tape", "index", "requires_grad", "name")

    def __init__(self, value, tape, index, requires_grad, name=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _im2col(xp, k, stride, ho, wo):
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    view = as_strided(
        xp,
        shape=(n, ho, wo, k, k, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return view.reshape(n * ho * wo, k * k * c)


class Tape:
    """Computation record: an ordered list of primitive applications."""

    def __init__(self):
        self._count = 0
        # (output index, parents, backward fn); appended in evaluation order
        self._records = []

    # -- leaves -----------------------------------------------------------
    def _new(self, value, requires_grad, name=None):
        t = Tensor(value, self, self._count, requires_grad, name)
        self._count += 1
        return t

    def input(self, value, name=None, requires_grad=True):
        """Declare a differentiable input."""
        return self._new(np.array(value, dtype=np.float64), requires_grad, name)

    def constant(self, value, name=None):
        return self._new(np.asarray(value, dtype=np.float64), False, name)

    def _lift(self, x):
        if isinstance(x, Tensor):
            if x.tape is not self:
                raise ValueError("tensor belongs to a different tape")
            return x
        return self.constant(x)

    def _record(self, value, parents, backward, name=None):
        needs = tuple(p.requires_grad for p in parents)
        out = self._new(value, any(needs), name)
        if out.requires_grad:
            self._records.append((out.index, parents, needs, backward))
        return out

    # -- elementwise ------------------------------------------------------
    def add(self, a, b):
        a, b = self._lift(a), self._lift(b)
        _broadcast_shape("add", a, b)

        def back(g, needs):
            return (_unbroadcast(g, a.shape) if needs[0] else None,
                    _unbroadcast(g, b.shape) if needs[1] else None)

        return self._record(a.value + b.value, (a, b), back)

    def sub(self, a, b):
        a, b = self._lift(a), self._lift(b)
        _broadcast_shape("sub", a, b)

        def back(g, needs):
            return (_unbroadcast(g, a.shape) if needs[0] else None,
                    _unbroadcast(-g, b.shape) if needs[1] else None)

        return self._record(a.value - b.value, (a, b), back)

    def mul(self, a, b):
        a, b = self._lift(a), self._lift(b)
        _broadcast_shape("mul", a, b)

        def back(g, needs):
            return (_unbroadcast(g * b.value, a.shape) if needs[0] else None,
                    _unbroadcast(g * a.value, b.shape) if needs[1] else None)

        return self._record(a.value * b.value, (a, b), back)

    def scale(self, a, c):
        """Multiply by a python/numpy scalar constant."""
        c = float(c)
        return self._record(a.value * c, (a,), lambda g, needs: (g * c,))

    def abs(self, a):
        sign = np.sign(a.value)
        return self._record(np.abs(a.value), (a,), lambda g, needs: (g * sign,))

    def reciprocal(self, a):
        out = 1.0 / a.value
        return self._record(out, (a,), lambda g, needs: (-g * out * out,))

    def maximum(self, a, floor):
        """Elementwise ``max(a, floor)`` against a constant floor."""
        keep = ~(a.value <= floor)  # NaN passes through
        out = np.where(keep, a.value, floor)
        return self._record(out, (a,), lambda g, needs: (g * keep,))

    def relu(self, a):
        keep = a.value > 0
        return self._record(a.value * keep, (a,), lambda g, needs: (g * keep,))

    def tanh(self, a):
        out = np.tanh(a.value)
        return self._record(out, (a,), lambda g, needs: (g * (1.0 - out * out),))

    # -- reductions -------------------------------------------------------
    def sum(self, a, axis=None, keepdims=False):
        out = np.sum(a.value, axis=axis, keepdims=keepdims)

        def back(g, needs):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return self._record(np.asarray(out, dtype=np.float64), (a,), back)

    def mean(self, a, axis=None, keepdims=False):
        if axis is None:
            count = a.size
        else:
            axes = (axis,) if np.isscalar(axis) else axis
            count = int(np.prod([a.shape[i] for i in axes]))
        return self.scale(self.sum(a, axis=axis, keepdims=keepdims), 1.0 / count)

    def dot(self, a, b):
        """Inner product along the last axis."""
        a, b = self._lift(a), self._lift(b)
        if a.shape != b.shape:
            raise ShapeError("dot", a.shape, b.shape)
        out = np.sum(a.value * b.value, axis=-1)

        def back(g, needs):
            g = g[..., None]
            return (g * b.value if needs[0] else None,
                    g * a.value if needs[1] else None)

        return self._record(out, (a, b), back)

    def l2norm(self, a):
        """Euclidean norm along the last axis; gradient at the origin is zero."""
        norm = np.sqrt(np.sum(a.value * a.value, axis=-1))
        safe = np.where(norm > 0, norm, 1.0)

        def back(g, needs):
            return ((g / safe)[..., None] * a.value * (norm > 0)[..., None],)

        return self._record(norm, (a,), back)

    # -- linear maps ------------------------------------------------------
    def dense(self, x, w, b=None):
        """Affine map ``x @ w + b`` for ``x`` of shape (N, in)."""
        x, w = self._lift(x), self._lift(w)
        if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError("dense", x.shape, w.shape)
        out = x.value @ w.value
        parents = (x, w)
        if b is not None:
            b = self._lift(b)
            if b.shape != (w.shape[1],):
                raise ShapeError("dense", x.shape, w.shape, b.shape, detail="bias")
            out = out + b.value
            parents = (x, w, b)

        def back(g, needs):
            gx = g @ w.value.T if needs[0] else None
            gw = x.value.T @ g if needs[1] else None
            if len(needs) == 3:
                return gx, gw, (g.sum(axis=0) if needs[2] else None)
            return gx, gw

        return self._record(out, parents, back)

    def conv2d(self, x, w, b=None, stride=1, padding=0):
        """2-D convolution, NHWC input and (k, k, Cin, Cout) kernel, zero padding."""
        x, w = self._lift(x), self._lift(w)
        if stride not in (1, 2):
            raise ShapeError("conv2d", x.shape, w.shape, detail=f"stride {stride}")
        if (x.value.ndim != 4 or w.value.ndim != 4 or w.shape[0] != w.shape[1]
                or x.shape[3] != w.shape[2]):
            raise ShapeError("conv2d", x.shape, w.shape)
        n, h, wd, cin = x.shape
        k, cout = w.shape[0], w.shape[3]
        ho = (h + 2 * padding - k) // stride + 1
        wo = (wd + 2 * padding - k) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than input")
        xp = x.value
        if padding:
            xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        cols = _im2col(xp, k, stride, ho, wo)
        wmat = w.value.reshape(k * k * cin, cout)
        out = cols @ wmat
        parents = (x, w)
        if b is not None:
            b = self._lift(b)
            if b.shape != (cout,):
                raise ShapeError("conv2d", x.shape, w.shape, b.shape, detail="bias")
            out += b.value
            parents = (x, w, b)
        out = out.reshape(n, ho, wo, cout)

        def back(g, needs):
            g2 = g.reshape(n * ho * wo, cout)
            gx = gw = gb = None
            if needs[0]:
                dcols = (g2 @ wmat.T).reshape(n, ho, wo, k, k, cin)
                dxp = np.zeros(xp.shape)
                for i in range(k):
                    for j in range(k):
                        dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
                gx = dxp[:, padding:padding + h, padding:padding + wd, :] if padding else dxp
            if needs[1]:
                gw = (cols.T @ g2).reshape(w.shape)
            if len(needs) == 3 and needs[2]:
                gb = g2.sum(axis=0)
            return (gx, gw, gb) if len(needs) == 3 else (gx, gw)

        return self._record(out, parents, back)

    # -- softmax family ---------------------------------------------------
    def softmax(self, a):
        """Row-wise softmax over the last axis (log-sum-exp shifted)."""
        z = a.value - a.value.max(axis=-1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=-1, keepdims=True)

        def back(g, needs):
            return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

        return self._record(s, (a,), back)

    def log_softmax(self, a):
        z = a.value - a.value.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out = z - lse

        def back(g, needs):
            return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

        return self._record(out, (a,), back)

    # -- indexing and layout ----------------------------------------------
    def embedding(self, table, ids):
        table = self._lift(table)
        ids = np.asarray(ids, dtype=np.int64)
        if table.value.ndim != 2 or (ids.size and (ids.min() < 0 or ids.max() >= table.shape[0])):
            raise ShapeError("embedding", table.shape, ids.shape, detail="id out of range")

        def back(g, needs):
            gt = np.zeros(table.shape)
            np.add.at(gt, ids, g)
            return (gt,)

        return self._record(table.value[ids], (table,), back)

    def pick(self, a, idx):
        """Select ``a[..., idx[...]]`` along the last axis (one entry per row)."""
        idx = np.asarray(idx, dtype=np.int64)
        if idx.shape != a.shape[:-1]:
            raise ShapeError("pick", a.shape, idx.shape)
        out = np.take_along_axis(a.value, idx[..., None], axis=-1)[..., 0]

        def back(g, needs):
            ga = np.zeros(a.shape)
            np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
            return (ga,)

        return self._record(out, (a,), back)

    def take(self, a, indices, axis):
        indices = np.asarray(indices, dtype=np.int64)
        out = np.take(a.value, indices, axis=axis)

        def back(g, needs):
            ga = np.zeros(a.shape)
            np.add.at(np.moveaxis(ga, axis, 0), indices, np.moveaxis(g, axis, 0))
            return (ga,)

        return self._record(out, (a,), back)

    def reshape(self, a, shape):
        try:
            out = a.value.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", a.shape, shape) from None
        return self._record(out, (a,), lambda g, needs: (g.reshape(a.shape),))

    def concat(self, parts, axis=-1):
        parts = [self._lift(p) for p in parts]
        try:
            out = np.concatenate([p.value for p in parts], axis=axis)
        except ValueError:
            raise ShapeError("concat", *[p.shape for p in parts]) from None
        bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

        def back(g, needs):
            return tuple(np.split(g, bounds, axis=axis))

        return self._record(out, tuple(parts), back)

    def pad_to(self, a, shape, offset):
        """Embed ``a`` into a zero array of ``shape`` with its origin at ``offset``."""
        if len(shape) != a.value.ndim or any(
            o < 0 or o + s > n for o, s, n in zip(offset, a.shape, shape)
        ):
            raise ShapeError("pad_to", a.shape, shape, detail=f"offset {tuple(offset)}")
        region = tuple(slice(o, o + s) for o, s in zip(offset, a.shape))
        out = np.zeros(shape)
        out[region] = a.value
        return self._record(out, (a,), lambda g, needs: (g[region],))

    def bilinear_sample(self, src, rows, cols):
        """Sample ``src`` (H, W, C) at fractional pixel coordinates.

        Coordinates are clamped to the source extent, so the caller decides
        what counts as outside.  Differentiable w.r.t. ``src`` only.
        """
        src = self._lift(src)
        if src.value.ndim != 3 or np.shape(rows) != np.shape(cols):
            raise ShapeError("bilinear_sample", src.shape, np.shape(rows), np.shape(cols))
        h, w, c = src.shape
        r = np.clip(np.asarray(rows, dtype=np.float64), 0, h - 1)
        q = np.clip(np.asarray(cols, dtype=np.float64), 0, w - 1)
        r0 = np.floor(r).astype(np.int64)
        q0 = np.floor(q).astype(np.int64)
        r1 = np.minimum(r0 + 1, h - 1)
        q1 = np.minimum(q0 + 1, w - 1)
        fr = (r - r0)[..., None]
        fq = (q - q0)[..., None]
        corners = ((r0, q0, (1 - fr) * (1 - fq)), (r0, q1, (1 - fr) * fq),
                   (r1, q0, fr * (1 - fq)), (r1, q1, fr * fq))
        v = src.value
        out = sum(wt * v[ri, qi] for ri, qi, wt in corners)

        def back(g, needs):
            gs = np.zeros((h * w, c))
            for ri, qi, wt in corners:
                np.add.at(gs, (ri * w + qi).ravel(), (g * wt).reshape(-1, c))
            return (gs.reshape(h, w, c),)

        return self._record(out, (src,), back)

    # -- reverse pass -----------------------------------------------------
    def backprop(self, output, wrt, retain=False):
        """Gradients of scalar ``output`` w.r.t. each tensor in ``wrt``.

        Inputs the output does not depend on get exact zeros.  The record is
        released afterwards unless ``retain`` is set (closures hold the
        forward intermediates, which would otherwise linger in a cycle).
        """
        if output.value.size != 1:
            raise ShapeError("backprop", output.shape, detail="output must be scalar")
        grads = {output.index: np.ones(output.shape)}
        for out_idx, parents, needs, back in reversed(self._records):
            g = grads.pop(out_idx, None)
            if g is None:
                continue
            for p, need, gp in zip(parents, needs, back(g, needs)):
                if not need or gp is None:
                    continue
                if p.index in grads:
                    grads[p.index] = grads[p.index] + gp
                else:
                    grads[p.index] = gp
        if not retain:
            self._records = []
        result = []
        for t in wrt:
            g = grads.get(t.index)
            result.append(np.zeros(t.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape))
        return result

    def __len__(self):
        return len(self._records)


def evaluate(graph, *inputs):
    """Run ``graph(tape, *tensors)`` on fresh input tensors.

    Returns ``(output, tape, tensors)`` so the caller may backprop.
    """
    tape = Tape()
    tensors = [tape.input(x) for x in inputs]
    return graph(tape, *tensors), tape, tensors


def value_and_grad(graph, *inputs):
    out, tape, tensors = evaluate(graph, *inputs)
    return float(out.value), tape.backprop(out, tensors)


def central_difference(graph, point, step=1e-5):
    """Numerical gradient of scalar ``graph(tape, x)`` by central differences."""
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.array(point, dtype=np.float64)

    def f(x):
        out, _, _ = evaluate(graph, x)
        return float(out.value)

    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(point)
        flat[i] = orig - step
        lo = f(point)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2 * step)
    return numeric


def gradient_pair(graph, point, step=1e-5):
    """``(analytic, numeric)`` gradients of ``graph`` at ``point``."""
    point = np.array(point, dtype=np.float64)
    _, (analytic,) = value_and_grad(graph, point)
    return analytic, central_difference(graph, point, step)


def relative_error(analytic, numeric):
    err = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def grad_check(graph, point, step=1e-5):
    """Largest relative disagreement between backprop and central differences.

    ``graph(tape, x)`` must return a scalar tensor.  The error at each
    coordinate is ``|analytic - numeric| / max(1e-12, |numeric|)``.
    """
    return relative_error(*gradient_pair(graph, point, step))
