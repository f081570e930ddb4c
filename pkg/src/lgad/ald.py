"""Adaptive latent disentanglement: a thresholded binary mask over latent
dimensions trained through a sigmoid straight-through estimator, and the
Hadamard split of z into variant and invariant parts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lgad import tensor as T
from lgad.tensor import ShapeError, Tensor


@dataclass
class MaskParams:
    alpha: Tensor
    tau: float = 0.5
    pair_aligned: bool = True

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")

    @property
    def dim(self) -> int:
        n = self.alpha.shape[0]
        return 2 * n if self.pair_aligned else n


@dataclass
class LatentPartition:
    z: Tensor
    mask: Tensor
    z_v: Tensor
    z_i: Tensor


def compute_mask(p: MaskParams) -> Tensor:
    """Hard mask 1[sigmoid(alpha) > tau]; backward is g * sigmoid'(alpha).

    Ties (sigmoid(alpha) == tau) give 0. With pair alignment each logit
    drives two adjacent dimensions and receives the sum of their gradients.
    """
    a = p.alpha.data
    s = T._sigmoid(a)
    hard = (s > p.tau).astype(a.dtype)
    dsig = s * (1 - s)
    if p.pair_aligned:
        hard = np.repeat(hard, 2)

        def back(g):
            return (g.reshape(-1, 2).sum(axis=1) * dsig,)
    else:
        def back(g):
            return (g * dsig,)
    return T.record(hard, (p.alpha,), back)


def model_mask(model, tau: float | None = None) -> Tensor:
    return compute_mask(MaskParams(model.alpha, model.tau if tau is None else tau,
                                   model.pair_aligned))


def partition_latent(z: Tensor, M: Tensor) -> LatentPartition:
    """z_v = M * z and z_i = (1 - M) * z, with M broadcast over the batch."""
    if z.data.ndim != 2 or M.shape != (z.shape[1],):
        raise ShapeError(f"partition_latent: z {z.shape} vs mask {M.shape}")
    if not np.all((M.data == 0) | (M.data == 1)):
        raise ValueError("partition_latent: mask must be binary")
    z_v = T.mul_row(z, M)
    z_i = T.mul_row(z, 1.0 - M)
    return LatentPartition(z, M, z_v, z_i)


def mask_stats(M) -> dict:
    m = np.asarray(M.data if isinstance(M, Tensor) else M)
    variant = int(np.count_nonzero(m == 1))
    d = int(m.size)
    return {"variant": variant, "invariant": d - variant,
            "variant_fraction": variant / d if d else 0.0}
