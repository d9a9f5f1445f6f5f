"""Tubelet tokenization: strided non-overlapping 3-D patches, projected to tokens."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, GeometryError
from .numerics import Tensor


@dataclass(frozen=True)
class ViewConfig:
    t: int
    h: int
    w: int
    d: int

    def grid(self, T: int, H: int, W: int) -> tuple[int, int, int]:
        return T // self.t, H // self.h, W // self.w

    def num_tokens(self, T: int, H: int, W: int) -> int:
        nt, nh, nw = self.grid(T, H, W)
        return nt * nh * nw

    def patch_size(self, D: int) -> int:
        return self.t * self.h * self.w * D


@dataclass
class TubeletEmbedder:
    proj: Tensor  # (t*h*w*D, d)
    bias: Tensor  # (d,)
    pos: Tensor  # (N, d)

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str) -> "TubeletEmbedder":
        return cls(params[f"{prefix}.proj"], params[f"{prefix}.bias"], params[f"{prefix}.pos"])


@dataclass
class TokenSequence:
    tokens: Tensor  # (N, d)
    view_index: int

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.shape[1]


def extract_tubelets(clip: np.ndarray, cfg: ViewConfig) -> np.ndarray:
    """Gather tubelets into an (N, t*h*w*D) matrix.

    Tubelets are enumerated in (time, height, width) lexicographic order and
    each is flattened in (t, h, w, c) row-major order. Trailing frames and
    pixels that do not fill a whole tubelet are dropped.
    """
    T, H, W, D = clip.shape
    if T < cfg.t or H < cfg.h or W < cfg.w:
        raise GeometryError(f"clip {clip.shape} is smaller than one {cfg.t}x{cfg.h}x{cfg.w} tubelet")
    nt, nh, nw = cfg.grid(T, H, W)
    x = clip[: nt * cfg.t, : nh * cfg.h, : nw * cfg.w]
    x = x.reshape(nt, cfg.t, nh, cfg.h, nw, cfg.w, D).transpose(0, 2, 4, 1, 3, 5, 6)
    return np.ascontiguousarray(x).reshape(nt * nh * nw, cfg.t * cfg.h * cfg.w * D)


def tubelet_tokenize(clip: np.ndarray, cfg: ViewConfig, emb: TubeletEmbedder, view_index: int = 0) -> TokenSequence:
    patches = nx.Tensor(extract_tubelets(np.asarray(clip), cfg))
    if emb.proj.shape != (patches.shape[1], cfg.d):
        raise GeometryError(f"projection shape {emb.proj.shape} does not fit patch size {patches.shape[1]} and d={cfg.d}")
    if emb.pos.shape[0] != patches.shape[0]:
        raise GeometryError(f"positional table has {emb.pos.shape[0]} rows for {patches.shape[0]} tokens")
    tokens = nx.add(nx.add_bias(nx.matmul(patches, emb.proj), emb.bias), emb.pos)
    return TokenSequence(tokens, view_index)


def ascending_order(counts: Sequence[int]) -> list[int]:
    """Indices ordering views by token count; ties keep list order."""
    return sorted(range(len(counts)), key=lambda i: counts[i])


def make_views(clip: np.ndarray, cfgs: Sequence[ViewConfig], embs: Sequence[TubeletEmbedder]) -> list[TokenSequence]:
    if len(cfgs) != len(embs):
        raise ConfigError(f"{len(cfgs)} view configs but {len(embs)} embedders")
    if len({c.d for c in cfgs}) > 1:
        raise ConfigError(f"views disagree on token dimension: {[c.d for c in cfgs]}")
    T, H, W, _ = np.shape(clip)
    order = ascending_order([c.num_tokens(T, H, W) for c in cfgs])
    return [tubelet_tokenize(clip, cfgs[i], embs[i], view_index=i) for i in order]
