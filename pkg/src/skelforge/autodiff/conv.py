"""Strided 3D convolution, transposed convolution and 2x max-pooling.

Layout is channels-last: activations ``(N, D, H, W, C)``, kernels
``(kd, kh, kw, C_in, C_out)``.  Images run through the same code with a
depth of one and a ``(1, 3, 3)`` kernel.
"""

from __future__ import annotations

import itertools

import numpy as np

from .tensor import ShapeError, Tensor, _node, as_tensor


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected an int or a 3-tuple, got {v!r}")
    return t


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def deconv_out_size(n: int, k: int, stride: int, pad: int, out_pad: int) -> int:
    return (n - 1) * stride - 2 * pad + k + out_pad


def _window(start: int, count: int, stride: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=1) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5 or x.shape[4] != w.shape[3]:
        raise ShapeError("conv3d", x.shape, w.shape, detail="x=(N,D,H,W,Cin), w=(kd,kh,kw,Cin,Cout)")
    st, pd = _triple(stride), _triple(padding)
    n, *spatial, cin = x.shape
    ks = w.shape[:3]
    cout = w.shape[4]
    osz = [conv_out_size(spatial[i], ks[i], st[i], pd[i]) for i in range(3)]
    if min(osz) < 1:
        raise ShapeError("conv3d", x.shape, w.shape, detail="kernel larger than padded input")
    xp = np.pad(x.values, ((0, 0), (pd[0], pd[0]), (pd[1], pd[1]), (pd[2], pd[2]), (0, 0)))
    offsets = list(itertools.product(range(ks[0]), range(ks[1]), range(ks[2])))
    kk = len(offsets)
    cols = np.empty((n, *osz, kk, cin))
    for k, (a, bb, c) in enumerate(offsets):
        cols[..., k, :] = xp[:, _window(a, osz[0], st[0]), _window(bb, osz[1], st[1]), _window(c, osz[2], st[2]), :]
    cols2 = cols.reshape(-1, kk * cin)
    w2 = w.values.reshape(kk * cin, cout)
    out = (cols2 @ w2).reshape(n, *osz, cout)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError("conv3d bias", b.shape, (cout,))
        out = out + b.values
        parents.append(b)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(n, *osz, kk, cin)
            gxp = np.zeros(xp.shape)
            for k, (a, bb, c) in enumerate(offsets):
                gxp[:, _window(a, osz[0], st[0]), _window(bb, osz[1], st[1]), _window(c, osz[2], st[2]), :] += gcols[..., k, :]
            gx = gxp[:, pd[0] : pd[0] + spatial[0], pd[1] : pd[1] + spatial[1], pd[2] : pd[2] + spatial[2], :]
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _node(out, parents, back, "conv3d")


def conv_transpose3d(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride=2, padding=1, output_padding=0
) -> Tensor:
    """Transposed convolution: scatter each input voxel's ``x @ W_k`` into a strided output."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5 or x.shape[4] != w.shape[3]:
        raise ShapeError("conv_transpose3d", x.shape, w.shape, detail="x=(N,D,H,W,Cin), w=(kd,kh,kw,Cin,Cout)")
    st, pd, op = _triple(stride), _triple(padding), _triple(output_padding)
    n, *spatial, cin = x.shape
    ks = w.shape[:3]
    cout = w.shape[4]
    osz = [deconv_out_size(spatial[i], ks[i], st[i], pd[i], op[i]) for i in range(3)]
    if min(osz) < 1:
        raise ShapeError("conv_transpose3d", x.shape, w.shape, detail="empty output")
    buf_sz = [max((spatial[i] - 1) * st[i] + ks[i], osz[i] + pd[i]) for i in range(3)]
    offsets = list(itertools.product(range(ks[0]), range(ks[1]), range(ks[2])))
    kk = len(offsets)
    # (Cin, K*Cout) with K-major ordering to match the offsets list
    w2 = w.values.reshape(kk, cin, cout).transpose(1, 0, 2).reshape(cin, kk * cout)
    x2 = x.values.reshape(-1, cin)
    cols = (x2 @ w2).reshape(n, *spatial, kk, cout)
    buf = np.zeros((n, *buf_sz, cout))
    for k, (a, bb, c) in enumerate(offsets):
        buf[:, _window(a, spatial[0], st[0]), _window(bb, spatial[1], st[1]), _window(c, spatial[2], st[2]), :] += cols[..., k, :]
    crop = (slice(None), slice(pd[0], pd[0] + osz[0]), slice(pd[1], pd[1] + osz[1]), slice(pd[2], pd[2] + osz[2]), slice(None))
    out = buf[crop].copy()
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError("conv_transpose3d bias", b.shape, (cout,))
        out += b.values
        parents.append(b)

    def back(g):
        gbuf = np.zeros(buf.shape)
        gbuf[crop] = g
        gcols = np.empty((n, *spatial, kk, cout))
        for k, (a, bb, c) in enumerate(offsets):
            gcols[..., k, :] = gbuf[:, _window(a, spatial[0], st[0]), _window(bb, spatial[1], st[1]), _window(c, spatial[2], st[2]), :]
        gcols2 = gcols.reshape(-1, kk * cout)
        gx = (gcols2 @ w2.T).reshape(x.shape) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw2 = x2.T @ gcols2
            gw = gw2.reshape(cin, kk, cout).transpose(1, 0, 2).reshape(w.shape)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return grads

    return _node(out, parents, back, "conv_transpose3d")


def max_pool3d(x: Tensor, factor: int = 2) -> Tensor:
    """Non-overlapping ``factor``-cube max-pooling over the spatial axes."""
    x = as_tensor(x)
    if x.ndim != 5 or any(s % factor for s in x.shape[1:4]):
        raise ShapeError("max_pool3d", x.shape, detail=f"spatial sizes must be divisible by {factor}")
    n, d, h, w_, c = x.shape
    f = factor
    blocks = x.values.reshape(n, d // f, f, h // f, f, w_ // f, f, c).transpose(0, 1, 3, 5, 7, 2, 4, 6)
    blocks = blocks.reshape(n, d // f, h // f, w_ // f, c, f**3)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, d // f, h // f, w_ // f, c, f, f, f).transpose(0, 1, 5, 2, 6, 3, 7, 4)
        return (gb.reshape(x.shape),)

    return _node(out, (x,), back, "max_pool3d")


def upsample_nearest3d(x: Tensor, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 5:
        raise ShapeError("upsample_nearest3d", x.shape)
    f = factor
    out = x.values.repeat(f, axis=1).repeat(f, axis=2).repeat(f, axis=3)
    n, d, h, w_, c = x.shape

    def back(g):
        return (g.reshape(n, d, f, h, f, w_, f, c).sum(axis=(2, 4, 6)),)

    return _node(out, (x,), back, "upsample_nearest3d")
