"""Skeletal curve and sheet decoders.

Each decoder owns one small MLP per primitive.  A primitive is a fixed
sampling of the unit segment or unit square; its MLP maps
``(parameter coordinate, shape code)`` to a 3D point, so the primitive is
deformed onto part of the skeleton.  Weights for all primitives of a
decoder are stacked along a leading axis and evaluated with batched
matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .autodiff import tensor as T
from .autodiff.nn import ParamStore, glorot, he
from .autodiff.tensor import ShapeError, Tensor
from .geometry.chamfer import chamfer, laplacian_reg
from .geometry.types import GeometryError, Label, PointSet

LINE = "line"
SQUARE = "square"


@dataclass(frozen=True, eq=False)
class PrimitiveSet:
    """``count`` copies of a sampled template domain and their within-primitive neighbour graph."""

    kind: str
    count: int
    coords: np.ndarray  # (samples, dim), shared by every primitive
    adjacency: sp.csr_matrix  # over all count * samples points

    @property
    def samples(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    @property
    def num_points(self) -> int:
        return self.count * self.samples

    def neighbors(self) -> list[np.ndarray]:
        adj = self.adjacency
        return [adj.indices[adj.indptr[i] : adj.indptr[i + 1]] for i in range(adj.shape[0])]

    @staticmethod
    def line(count: int = 20, samples: int = 64) -> PrimitiveSet:
        if samples < 2 or count < 1:
            raise GeometryError("a line primitive needs at least 2 samples")
        t = np.linspace(0.0, 1.0, samples)[:, None]
        edges = [(i, i + 1) for i in range(samples - 1)]
        return PrimitiveSet(LINE, count, t, _block_adjacency(edges, samples, count))

    @staticmethod
    def square(count: int = 20, side: int = 8) -> PrimitiveSet:
        if side < 2 or count < 1:
            raise GeometryError("a square primitive needs at least 2x2 samples")
        g = np.linspace(0.0, 1.0, side)
        u, v = np.meshgrid(g, g, indexing="ij")
        uv = np.stack([u.ravel(), v.ravel()], axis=1)
        edges = []
        for i in range(side):
            for j in range(side):
                k = i * side + j
                if i + 1 < side:
                    edges.append((k, k + side))
                if j + 1 < side:
                    edges.append((k, k + 1))
        return PrimitiveSet(SQUARE, count, uv, _block_adjacency(edges, side * side, count))


def _block_adjacency(edges, samples: int, count: int) -> sp.csr_matrix:
    e = np.array(edges, dtype=np.int64)
    offs = (np.arange(count) * samples)[:, None]
    rows = np.concatenate([(e[:, 0] + offs).ravel(), (e[:, 1] + offs).ravel()])
    cols = np.concatenate([(e[:, 1] + offs).ravel(), (e[:, 0] + offs).ravel()])
    n = samples * count
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


class SkeDecoder:
    """Per-primitive MLPs with output widths 512/256/128/3: ReLU x3, then tanh scaled by 0.5."""

    widths = (512, 256, 128, 3)

    def __init__(self, store: ParamStore, name: str, prims: PrimitiveSet, code_dim: int, rng, widths: Sequence[int] | None = None, scale: float = 0.5):
        self.name = name
        self.prims = prims
        self.code_dim = code_dim
        self.scale = scale
        if widths is not None:
            self.widths = tuple(widths)
        p, d = prims.count, prims.dim
        h0 = self.widths[0]
        fan0 = d + code_dim
        # first layer split into the parameter-coordinate part and the code part
        self.w0p = store.add(f"{name}.fc0.wp", he(rng, fan0, (p, d, h0)))
        self.w0c = store.add(f"{name}.fc0.wc", he(rng, fan0, (p, code_dim, h0)))
        self.b0 = store.add(f"{name}.fc0.b", np.zeros((p, 1, h0)))
        self.layers = []
        prev = h0
        for i, w in enumerate(self.widths[1:], start=1):
            last = i == len(self.widths) - 1
            # a small output layer keeps the initial tanh away from saturation
            init = 0.1 * glorot(rng, prev, w, (p, prev, w)) if last else he(rng, prev, (p, prev, w))
            self.layers.append((store.add(f"{name}.fc{i}.w", init), store.add(f"{name}.fc{i}.b", np.zeros((p, 1, w)))))
            prev = w

    def __call__(self, code) -> Tensor:
        code = T.as_tensor(code)
        if code.shape != (self.code_dim,):
            raise ShapeError("ske_decoder", code.shape, detail=f"expected a code of length {self.code_dim}")
        p, s, d = self.prims.count, self.prims.samples, self.prims.dim
        h0 = self.widths[0]
        coords = np.broadcast_to(self.prims.coords, (p, s, d))
        # code @ W_c for every primitive at once: (1, m) @ (m, p*h0)
        wc = self.w0c.transpose(1, 0, 2).reshape(self.code_dim, p * h0)
        code_term = (code.reshape(1, self.code_dim) @ wc).reshape(p, 1, h0)
        x = T.relu(T.bmm(Tensor(coords), self.w0p) + code_term + self.b0)
        for i, (w, b) in enumerate(self.layers):
            x = T.bmm(x, w) + b
            x = T.relu(x) if i < len(self.layers) - 1 else T.tanh(x)
        return (x * self.scale).reshape(p * s, 3)


def _check_kind(decoder: SkeDecoder, kind: str) -> None:
    if decoder.prims.kind != kind:
        raise GeometryError(f"decoder built on {decoder.prims.kind} primitives, expected {kind}")


def decode_curves(code, decoder: SkeDecoder) -> Tensor:
    """Curve skeleton points, ``(count * samples, 3)``, primitive blocks in order."""
    _check_kind(decoder, LINE)
    return decoder(code)


def decode_sheets(code, decoder: SkeDecoder) -> Tensor:
    _check_kind(decoder, SQUARE)
    return decoder(code)


def _gt_points(gt) -> np.ndarray:
    if isinstance(gt, PointSet):
        return gt.points
    return np.asarray(gt, dtype=np.float64).reshape(-1, 3)


def skeleton_loss(pred: Tensor, gt, prims: PrimitiveSet, alpha: float = 0.2) -> Tensor:
    """Chamfer (sum) to the ground-truth split plus ``alpha`` times the Laplacian term.

    With an empty ground-truth split only the smoothness term remains.
    """
    pred = T.as_tensor(pred)
    if len(pred) != prims.num_points:
        raise ShapeError("skeleton_loss", pred.shape, detail=f"expected {prims.num_points} points")
    smooth = laplacian_reg(pred, prims.adjacency)
    gt_pts = _gt_points(gt)
    if len(gt_pts) == 0:
        return smooth * alpha
    if alpha == 0.0:
        return chamfer(pred, gt_pts, "sum")
    return chamfer(pred, gt_pts, "sum") + smooth * alpha


def loss_phi(pred_curves: Tensor, gt_curves, prims: PrimitiveSet, alpha: float = 0.2) -> Tensor:
    if prims.kind != LINE:
        raise GeometryError("loss_phi uses line primitives")
    return skeleton_loss(pred_curves, gt_curves, prims, alpha)


def loss_psi(pred_sheets: Tensor, gt_sheets, prims: PrimitiveSet, alpha: float = 0.2) -> Tensor:
    if prims.kind != SQUARE:
        raise GeometryError("loss_psi uses square primitives")
    return skeleton_loss(pred_sheets, gt_sheets, prims, alpha)


def assemble_skeleton(curves, sheets) -> tuple[Tensor, np.ndarray]:
    """Concatenated points and their Curve/Sheet labels; either part may be empty."""
    parts, labels = [], []
    for pts, lab in ((curves, Label.CURVE), (sheets, Label.SHEET)):
        if pts is None:
            continue
        t = T.as_tensor(pts)
        if len(t):
            parts.append(t)
            labels.append(np.full(len(t), int(lab), dtype=np.int64))
    if not parts:
        return Tensor(np.zeros((0, 3))), np.zeros(0, dtype=np.int64)
    pts = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    return pts, np.concatenate(labels)


def to_pointset(points, labels) -> PointSet:
    values = points.values if isinstance(points, Tensor) else points
    return PointSet(values, None, labels)


class SkeletonDecoders:
    """The curve and sheet decoders used together."""

    def __init__(self, store: ParamStore, rng, code_dim: int = 512, n_curves: int = 20, curve_samples: int = 64, n_sheets: int = 20, sheet_side: int = 8, widths=None, name: str = "ske"):
        self.lines = PrimitiveSet.line(n_curves, curve_samples)
        self.squares = PrimitiveSet.square(n_sheets, sheet_side)
        self.cur = SkeDecoder(store, f"{name}.cur", self.lines, code_dim, rng, widths)
        self.sur = SkeDecoder(store, f"{name}.sur", self.squares, code_dim, rng, widths)
        self.prefix = name

    def __call__(self, code) -> tuple[Tensor, Tensor]:
        return decode_curves(code, self.cur), decode_sheets(code, self.sur)

    def loss(self, curves: Tensor, sheets: Tensor, gt: PointSet, alpha: float = 0.2) -> Tensor:
        gt_cur, gt_sur = gt.split()
        return loss_phi(curves, gt_cur, self.lines, alpha) + loss_psi(sheets, gt_sur, self.squares, alpha)
