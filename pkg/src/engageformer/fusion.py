"""Cross-view attention fusion between adjacent views, and attention-based sequence pooling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from . import numerics as nx
from .errors import ConfigError
from .numerics import Tensor


@dataclass
class CvafParams:
    wproj: Tensor  # (d, d) key/value pre-projection
    wq: Tensor
    wk: Tensor
    wv: Tensor

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str) -> "CvafParams":
        return cls(*(params[f"{prefix}.{k}"] for k in ("wproj", "wq", "wk", "wv")))


@dataclass
class SeqPoolParams:
    ws: Tensor  # (d, 1)


def cvaf_weights(z_i: Tensor, z_next: Tensor, p: CvafParams) -> tuple[Tensor, Tensor]:
    """Single-head cross attention; returns (attention weights, projected values)."""
    d = z_i.shape[1]
    if z_next.shape[1] != d or p.wproj.shape != (d, d):
        raise ConfigError(f"cross-view fusion needs a shared token dimension, got {z_i.shape} and {z_next.shape}")
    y = nx.matmul(z_next, p.wproj)
    q = nx.matmul(z_i, p.wq)
    k = nx.matmul(y, p.wk)
    scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(d))
    return nx.softmax(scores, axis=-1), nx.matmul(y, p.wv)


def cvaf(z_i: Tensor, z_next: Tensor, p: CvafParams) -> Tensor:
    """Update the fewer-token view ``z_i`` with queries into the adjacent view ``z_next``."""
    weights, values = cvaf_weights(z_i, z_next, p)
    return nx.add(nx.matmul(weights, values), z_i)


def fuse_all(views: Sequence[Tensor], params: Sequence[CvafParams]) -> list[Tensor]:
    """One fusion round over views sorted by ascending token count.

    Every update reads the pre-round tokens of its neighbour, so the order of
    updates does not matter. The last view passes through unchanged.
    """
    if len(params) != max(len(views) - 1, 0):
        raise ConfigError(f"{len(views)} views need {len(views) - 1} fusion parameter sets, got {len(params)}")
    fused = [cvaf(views[i], views[i + 1], params[i]) for i in range(len(views) - 1)]
    return fused + list(views[-1:])


def pool_weights(z: Tensor, p: SeqPoolParams) -> Tensor:
    scores = nx.reshape(nx.matmul(z, p.ws), (z.shape[0],))
    return nx.softmax(scores, axis=-1)


def sequence_pool(z: Tensor, p: SeqPoolParams) -> Tensor:
    """Collapse (N, d) tokens to a (d,) convex combination weighted by softmax(z @ W^S)."""
    return nx.matmul(pool_weights(z, p), z)
