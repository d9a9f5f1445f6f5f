"""Pre-norm transformer encoder layers with multi-head self-attention and stochastic depth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

from . import numerics as nx
from .numerics import Rng, Tensor


def head_dim(d: int, heads: int) -> int:
    # the default head counts do not divide d=512; heads use floor(d/heads) and W^O maps back to d.
    return d // heads


@dataclass
class AttentionParams:
    wq: list[Tensor]  # per head (d, d_h)
    bq: list[Tensor]  # per head (d_h,)
    wk: list[Tensor]
    wv: list[Tensor]
    bv: list[Tensor]
    wo: Tensor  # (heads * d_h, d)
    bo: Tensor  # (d,)

    @property
    def heads(self) -> int:
        return len(self.wq)

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str, heads: int) -> "AttentionParams":
        per_head = lambda key: [params[f"{prefix}.{key}.head{h}"] for h in range(heads)]  # noqa: E731
        return cls(per_head("wq"), per_head("bq"), per_head("wk"), per_head("wv"), per_head("bv"),
                   params[f"{prefix}.wo"], params[f"{prefix}.bo"])


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    w1: Tensor  # (d, d_mlp)
    b1: Tensor
    w2: Tensor  # (d_mlp, d)
    b2: Tensor
    drop_prob: float = 0.0

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str, heads: int, drop_prob: float = 0.0):
        return cls(
            AttentionParams.from_params(params, f"{prefix}.msa", heads),
            params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"],
            params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"],
            params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"],
            params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"],
            drop_prob,
        )


@dataclass
class EncoderStack:
    layers: list[EncoderLayerParams] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.layers)


def attention_head(z: Tensor, wq: Tensor, bq: Tensor, wk: Tensor, wv: Tensor, bv: Tensor) -> tuple[Tensor, Tensor]:
    """One self-attention head; returns (output, attention weights)."""
    q = nx.add_bias(nx.matmul(z, wq), bq)
    k = nx.matmul(z, wk)
    v = nx.add_bias(nx.matmul(z, wv), bv)
    scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(wq.shape[1]))
    weights = nx.softmax(scores, axis=-1)
    return nx.matmul(weights, v), weights


def msa(z: Tensor, p: AttentionParams, return_weights: bool = False):
    outs, weights = [], []
    for h in range(p.heads):
        o, a = attention_head(z, p.wq[h], p.bq[h], p.wk[h], p.wv[h], p.bv[h])
        outs.append(o)
        weights.append(a)
    heads = outs[0] if len(outs) == 1 else nx.concat(outs, axis=1)
    out = nx.add_bias(nx.matmul(heads, p.wo), p.bo)
    return (out, weights) if return_weights else out


def mlp(z: Tensor, p: EncoderLayerParams) -> Tensor:
    hidden = nx.gelu(nx.add_bias(nx.matmul(z, p.w1), p.b1))
    return nx.add_bias(nx.matmul(hidden, p.w2), p.b2)


def _residual(x: Tensor, branch, drop_prob: float, keep: bool, training: bool) -> Tensor:
    if not training or drop_prob == 0.0:
        return nx.add(x, branch())
    if not keep:
        return x
    return nx.add(x, nx.scale(branch(), 1.0 / (1.0 - drop_prob)))


def encoder_layer(z: Tensor, p: EncoderLayerParams, rng: Rng | None = None, training: bool = False) -> Tensor:
    """``y = z + MSA(LN(z))`` then ``y + MLP(LN(y))``.

    In training mode each residual branch is skipped with probability
    ``drop_prob`` (one draw per branch from ``rng``) and rescaled by
    ``1/(1-drop_prob)`` when kept.
    """
    keep = (True, True)
    if training and p.drop_prob > 0.0:
        if rng is None:
            raise ValueError("stochastic depth in training mode needs an rng")
        u = rng.random(2)
        keep = (bool(u[0] >= p.drop_prob), bool(u[1] >= p.drop_prob))
    y = _residual(z, lambda: msa(nx.layer_norm(z, p.ln1_gamma, p.ln1_beta), p.attn), p.drop_prob, keep[0], training)
    return _residual(y, lambda: mlp(nx.layer_norm(y, p.ln2_gamma, p.ln2_beta), p), p.drop_prob, keep[1], training)


def run_stack(z: Tensor, stack: EncoderStack, rng: Rng | None = None, training: bool = False) -> Tensor:
    for i, layer in enumerate(stack.layers):
        z = encoder_layer(z, layer, rng.derive(i) if rng is not None else None, training)
    return z


def drop_path_schedule(depth: int, max_rate: float) -> list[float]:
    """Stochastic-depth rates growing linearly from 0 at the first layer to ``max_rate`` at the last."""
    if depth <= 1:
        return [0.0] * depth
    return [max_rate * i / (depth - 1) for i in range(depth)]
