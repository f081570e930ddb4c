"""SO(2) group elements and the selective latent action Phi_g(z) = [z_v^g ; z_i]."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from lgad import tensor as T
from lgad.ald import partition_latent
from lgad.nn import LatentOperator, mlp
from lgad.tensor import ShapeError, Tensor

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class GroupElement:
    """A planar rotation, stored as an angle reduced to [0, 2*pi)."""
    angle: float

    def __post_init__(self):
        a = math.fmod(float(self.angle), TWO_PI)
        if a < 0:
            a += TWO_PI
        if a >= TWO_PI:  # fmod of a value just below 0 can round up to 2*pi
            a = 0.0
        object.__setattr__(self, "angle", a)

    def __matmul__(self, other: GroupElement) -> GroupElement:
        return compose(self, other)


def identity() -> GroupElement:
    return GroupElement(0.0)


def compose(a: GroupElement, b: GroupElement) -> GroupElement:
    return GroupElement(a.angle + b.angle)


def invert(g: GroupElement) -> GroupElement:
    return GroupElement(-g.angle)


def angle_distance(a: GroupElement, b: GroupElement) -> float:
    """Shortest arc between two elements, in radians."""
    d = abs(a.angle - b.angle)
    return min(d, TWO_PI - d)


Angles = Union[GroupElement, Sequence[GroupElement], np.ndarray, float]


def _angles(g: Angles, batch: int) -> np.ndarray:
    if isinstance(g, GroupElement):
        return np.full(batch, g.angle)
    if isinstance(g, (int, float)):
        return np.full(batch, float(g))
    arr = np.array([e.angle if isinstance(e, GroupElement) else float(e) for e in g])
    if arr.shape != (batch,):
        raise ShapeError(f"expected {batch} group elements, got {arr.shape[0]}")
    return arr


def rotate_pairs(z: Tensor, angles: np.ndarray) -> Tensor:
    """Rotate every consecutive coordinate pair (2k, 2k+1) of row b by angles[b]."""
    if z.data.ndim != 2 or z.shape[1] % 2:
        raise ShapeError(f"rotate_pairs needs [batch, even d], got {z.shape}")
    c = np.cos(angles).astype(z.dtype)[:, None]
    s = np.sin(angles).astype(z.dtype)[:, None]
    a, b = z.data[:, 0::2], z.data[:, 1::2]
    out = np.empty_like(z.data)
    out[:, 0::2] = a * c - b * s
    out[:, 1::2] = a * s + b * c

    def back(g):
        ga, gb = g[:, 0::2], g[:, 1::2]
        gz = np.empty_like(g)
        gz[:, 0::2] = ga * c + gb * s
        gz[:, 1::2] = gb * c - ga * s
        return (gz,)

    return T.record(out, (z,), back)


def remask(x: Tensor, M: Tensor) -> Tensor:
    """Project onto the variant support. The mask enters as a constant: this
    enforces disjoint supports but adds no mask-gradient path of its own."""
    return T.mul_row(x, T.stop_gradient(M))


def _check_pair_mask(M: Tensor) -> None:
    m = M.data
    if m.shape[0] % 2:
        raise ShapeError(f"geometric action needs an even latent dim, got {m.shape[0]}")
    if not np.array_equal(m[0::2], m[1::2]):
        raise ValueError("geometric action needs a pair-aligned mask")


def apply_geometric(z_v: Tensor, g: Angles, M: Tensor) -> Tensor:
    """Rotate each variant pair by g, then re-mask so invariant slots stay zero."""
    _check_pair_mask(M)
    if z_v.data.ndim != 2 or z_v.shape[1] != M.shape[0]:
        raise ShapeError(f"apply_geometric: z_v {z_v.shape} vs mask {M.shape}")
    return remask(rotate_pairs(z_v, _angles(g, z_v.shape[0])), M)


def apply_learned(op: LatentOperator, z_v: Tensor, g: Angles, M: Tensor) -> Tensor:
    """MLP([z_v ; cos ; sin]) re-masked by M."""
    if op.kind != "learned":
        raise ValueError("apply_learned needs a learned operator")
    d_in = op.layers[0].W.shape[0]
    if z_v.data.ndim != 2 or z_v.shape[1] + 2 != d_in or M.shape != (z_v.shape[1],):
        raise ShapeError(f"apply_learned: z_v {z_v.shape}, mask {M.shape}, operator input {d_in}")
    ang = _angles(g, z_v.shape[0])
    emb = Tensor(np.stack([np.cos(ang), np.sin(ang)], axis=1).astype(z_v.dtype))
    out = mlp(op.layers, T.concat_cols([z_v, emb]))
    return remask(out, M)


def apply_operator(op: LatentOperator, z_v: Tensor, g: Angles, M: Tensor) -> Tensor:
    if op.kind == "geometric":
        return apply_geometric(z_v, g, M)
    return apply_learned(op, z_v, g, M)


def recombine(z_v_g: Tensor, z_i: Tensor, tol: float = 1e-7) -> Tensor:
    """[z_v^g ; z_i] as an elementwise sum over disjoint supports."""
    if z_v_g.shape != z_i.shape:
        raise ShapeError(f"recombine: {z_v_g.shape} vs {z_i.shape}")
    overlap = (np.abs(z_v_g.data) > tol) & (np.abs(z_i.data) > tol)
    if np.any(overlap):
        raise ValueError(f"recombine: supports overlap at {int(overlap.sum())} coordinates")
    return T.add(z_v_g, z_i)


def transform_latent(model, z: Tensor, g: Angles, M: Tensor) -> Tensor:
    """Phi_g(z) for a full latent batch."""
    part = partition_latent(z, M)
    return recombine(apply_operator(model.operator, part.z_v, g, M), part.z_i)
