"""End-to-end three-view model: tokenize, per-view encoders with fusion, pooling, global encoder, head.

Parameters live in a flat ``dict`` keyed by stable dotted paths, e.g.
``view0.layer1.msa.wq.head0``. View indices in names refer to the order of
``ModelConfig.views``; processing order is ascending token count.
"""

from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .encoder import EncoderLayerParams, EncoderStack, drop_path_schedule, encoder_layer, head_dim, run_stack
from .errors import ConfigError, GeometryError
from .fusion import CvafParams, SeqPoolParams, fuse_all, sequence_pool
from .numerics import Rng, Tensor
from .tokenizer import TubeletEmbedder, ViewConfig, ascending_order, tubelet_tokenize

DEFAULT_LABELS = ("Boredom", "Confusion", "Engaged", "Frustration", "Sleepy", "Yawning")


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 32
    height: int = 112
    width: int = 112
    channels: int = 3
    views: tuple[tuple[int, int, int], ...] = ((2, 8, 8), (4, 8, 8), (8, 8, 8))
    d: int = 512
    view_heads: int = 3
    view_layers: int = 3
    view_mlp: int = 1024
    global_heads: int = 5
    global_layers: int = 1
    global_mlp: int = 1024
    fusion_layers: str = "all"
    classes: int = 6
    labels: tuple[str, ...] = DEFAULT_LABELS
    drop_path: float = 0.1

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if len(self.labels) != self.classes:
            raise ConfigError(f"{self.classes} classes but {len(self.labels)} label names")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError("label names must be unique")
        if not self.views:
            raise ConfigError("at least one view is required")
        for heads in (self.view_heads, self.global_heads):
            if not 1 <= heads <= self.d:
                raise ConfigError(f"{heads} heads do not fit d={self.d}")
        if not 0.0 <= self.drop_path < 1.0:
            raise ConfigError(f"drop_path must lie in [0, 1), got {self.drop_path}")
        for t, h, w in self.views:
            if t > self.frames or h > self.height or w > self.width or min(t, h, w) < 1:
                raise GeometryError(f"tubelet {t}x{h}x{w} does not fit input {self.frames}x{self.height}x{self.width}")
        self.fusion_after()

    @property
    def clip_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.height, self.width, self.channels)

    def view_configs(self) -> list[ViewConfig]:
        return [ViewConfig(t, h, w, self.d) for t, h, w in self.views]

    def token_counts(self) -> list[int]:
        return [v.num_tokens(self.frames, self.height, self.width) for v in self.view_configs()]

    def view_order(self) -> list[int]:
        return ascending_order(self.token_counts())

    def fusion_after(self) -> list[int]:
        """0-based indices of view-encoder layers followed by a fusion round."""
        text = self.fusion_layers.strip().lower()
        if text == "all":
            return list(range(self.view_layers))
        if text in ("none", ""):
            return []
        try:
            layers = sorted({int(x) for x in text.split(",")})
        except ValueError:
            raise ConfigError(f"bad fusion_layers {self.fusion_layers!r}") from None
        if layers and (layers[0] < 1 or layers[-1] > self.view_layers):
            raise ConfigError(f"fusion_layers {self.fusion_layers!r} outside 1..{self.view_layers}")
        return [l - 1 for l in layers]


# ---------------------------------------------------------------- parameter layout

def _encoder_layer_shapes(prefix: str, d: int, heads: int, d_mlp: int) -> list[tuple[str, tuple[int, ...]]]:
    dh = head_dim(d, heads)
    out = [(f"{prefix}.ln1.gamma", (d,)), (f"{prefix}.ln1.beta", (d,))]
    for h in range(heads):
        out += [
            (f"{prefix}.msa.wq.head{h}", (d, dh)),
            (f"{prefix}.msa.bq.head{h}", (dh,)),
            (f"{prefix}.msa.wk.head{h}", (d, dh)),
            (f"{prefix}.msa.wv.head{h}", (d, dh)),
            (f"{prefix}.msa.bv.head{h}", (dh,)),
        ]
    out += [
        (f"{prefix}.msa.wo", (heads * dh, d)),
        (f"{prefix}.msa.bo", (d,)),
        (f"{prefix}.ln2.gamma", (d,)),
        (f"{prefix}.ln2.beta", (d,)),
        (f"{prefix}.mlp.w1", (d, d_mlp)),
        (f"{prefix}.mlp.b1", (d_mlp,)),
        (f"{prefix}.mlp.w2", (d_mlp, d)),
        (f"{prefix}.mlp.b2", (d,)),
    ]
    return out


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    d = cfg.d
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for i, (vc, n) in enumerate(zip(cfg.view_configs(), cfg.token_counts())):
        shapes += [(f"view{i}.embed.proj", (vc.patch_size(cfg.channels), d)),
                   (f"view{i}.embed.bias", (d,)),
                   (f"view{i}.embed.pos", (n, d))]
        for l in range(cfg.view_layers):
            shapes += _encoder_layer_shapes(f"view{i}.layer{l}", d, cfg.view_heads, cfg.view_mlp)
        shapes.append((f"view{i}.pool.ws", (d, 1)))
    for l in cfg.fusion_after():
        for j in range(len(cfg.views) - 1):
            shapes += [(f"fusion.layer{l}.pair{j}.{k}", (d, d)) for k in ("wproj", "wq", "wk", "wv")]
    shapes.append(("global.viewpos", (len(cfg.views), d)))
    for l in range(cfg.global_layers):
        shapes += _encoder_layer_shapes(f"global.layer{l}", d, cfg.global_heads, cfg.global_mlp)
    shapes += [("global.pool.ws", (d, 1)), ("head.w", (d, cfg.classes)), ("head.b", (cfg.classes,))]
    return OrderedDict(shapes)


def count_params(cfg: ModelConfig) -> int:
    """Closed-form parameter count, independent of :func:`param_shapes`."""
    d, V = cfg.d, len(cfg.views)

    def layer(heads: int, d_mlp: int) -> int:
        dh = head_dim(d, heads)
        attn = heads * (3 * d * dh + 2 * dh) + heads * dh * d + d
        return 4 * d + attn + 2 * d * d_mlp + d_mlp + d

    total = 0
    for vc, n in zip(cfg.view_configs(), cfg.token_counts()):
        total += vc.patch_size(cfg.channels) * d + d + n * d
        total += cfg.view_layers * layer(cfg.view_heads, cfg.view_mlp) + d
    total += len(cfg.fusion_after()) * (V - 1) * 4 * d * d
    total += V * d + cfg.global_layers * layer(cfg.global_heads, cfg.global_mlp) + d
    total += d * cfg.classes + cfg.classes
    return total


def _kind(name: str) -> str:
    parts = name.split(".")
    per_head = parts[-1].startswith("head") and parts[-1][4:].isdigit()
    key = parts[-2] if per_head else parts[-1]
    if key in ("pos", "viewpos"):
        return "pos"
    if key == "gamma":
        return "one"
    if key in ("beta", "bias", "bq", "bv", "bo", "b1", "b2", "b"):
        return "zero"
    return "fan_in"


def name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def init_params(cfg: ModelConfig, seed: int) -> "OrderedDict[str, np.ndarray]":
    """Deterministic initialization; each tensor draws from its own stream keyed by its name.

    Projection weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), positional tables
    ~ N(0, 0.02^2), biases and LN shifts 0, LN scales 1.
    """
    root = Rng(seed)
    dtype = nx.get_dtype()
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        kind = _kind(name)
        n = int(np.prod(shape))
        if kind == "one":
            arr = np.ones(shape)
        elif kind == "zero":
            arr = np.zeros(shape)
        else:
            rng = root.derive(0, name_key(name))
            if kind == "pos":
                arr = 0.02 * rng.gaussian(n).reshape(shape)
            else:
                bound = 1.0 / np.sqrt(shape[0])
                arr = (rng.random(n) * 2.0 - 1.0).reshape(shape) * bound
        params[name] = arr.astype(dtype)
    return params


def as_leaves(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> "OrderedDict[str, Tensor]":
    """Wrap arrays as graph leaves (no copy when the dtype already matches)."""
    return OrderedDict((k, Tensor(v, requires_grad=requires_grad)) for k, v in params.items())


# ---------------------------------------------------------------- forward

def _view_stack(cfg: ModelConfig, params: Mapping[str, Tensor], i: int) -> EncoderStack:
    rates = drop_path_schedule(cfg.view_layers, cfg.drop_path)
    return EncoderStack([
        EncoderLayerParams.from_params(params, f"view{i}.layer{l}", cfg.view_heads, rates[l])
        for l in range(cfg.view_layers)
    ])


def _global_stack(cfg: ModelConfig, params: Mapping[str, Tensor]) -> EncoderStack:
    return EncoderStack([
        EncoderLayerParams.from_params(params, f"global.layer{l}", cfg.global_heads, 0.0)
        for l in range(cfg.global_layers)
    ])


def forward(clip: np.ndarray, cfg: ModelConfig, params: Mapping[str, Tensor],
            rng: Rng | None = None, training: bool = False) -> Tensor:
    """Logits (C,) for one normalized clip of shape (T, H, W, D)."""
    if tuple(np.shape(clip)) != cfg.clip_shape:
        raise GeometryError(f"clip shape {tuple(np.shape(clip))} does not match configured {cfg.clip_shape}")
    if not isinstance(next(iter(params.values())), Tensor):
        params = as_leaves(params, requires_grad=False)
    if training and rng is None:
        raise ValueError("training mode needs an rng")
    order = cfg.view_order()
    vcfgs = cfg.view_configs()
    views = [tubelet_tokenize(clip, vcfgs[i], TubeletEmbedder.from_params(params, f"view{i}.embed"), i).tokens
             for i in order]
    stacks = [_view_stack(cfg, params, i) for i in order]
    fuse_at = set(cfg.fusion_after())
    for l in range(cfg.view_layers):
        views = [
            encoder_layer(z, stacks[k].layers[l], rng.derive(1, order[k], l) if rng is not None else None, training)
            for k, z in enumerate(views)
        ]
        if l in fuse_at:
            pairs = [CvafParams.from_params(params, f"fusion.layer{l}.pair{j}") for j in range(len(views) - 1)]
            views = fuse_all(views, pairs)
    pooled = [sequence_pool(z, SeqPoolParams(params[f"view{i}.pool.ws"])) for z, i in zip(views, order)]
    g = nx.add(nx.stack(pooled), params["global.viewpos"])
    g = run_stack(g, _global_stack(cfg, params), rng.derive(2) if rng is not None else None, training)
    rep = sequence_pool(g, SeqPoolParams(params["global.pool.ws"]))
    return nx.add_bias(nx.matmul(rep, params["head.w"]), params["head.b"])


def probabilities(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def predict(clip: np.ndarray, cfg: ModelConfig, params: Mapping[str, np.ndarray]) -> tuple[int, np.ndarray]:
    """Class index (ties go to the lowest index) and the softmax probability vector."""
    logits = forward(clip, cfg, params).data
    return int(np.argmax(logits)), probabilities(logits)


@dataclass
class ShapeLedger:
    token_counts: list[int]
    ascending: list[int]
    global_length: int
    logits: int
    param_count: int
    head_dims: dict[str, int] = field(default_factory=dict)


def shape_ledger(cfg: ModelConfig, params: Mapping[str, np.ndarray] | None = None) -> ShapeLedger:
    """Summarize static shapes; when ``params`` is given, check it against them."""
    counts = cfg.token_counts()
    shapes = param_shapes(cfg)
    n_params = count_params(cfg)
    if sum(int(np.prod(s)) for s in shapes.values()) != n_params:
        raise AssertionError("closed-form parameter count disagrees with the parameter layout")
    if params is not None:
        if list(params) != list(shapes):
            raise AssertionError("parameter names differ from the configured layout")
        for name, shape in shapes.items():
            if tuple(params[name].shape) != shape:
                raise AssertionError(f"{name}: shape {params[name].shape} != {shape}")
    return ShapeLedger(
        token_counts=counts,
        ascending=[counts[i] for i in cfg.view_order()],
        global_length=len(cfg.views),
        logits=cfg.classes,
        param_count=n_params,
        head_dims={"view": head_dim(cfg.d, cfg.view_heads), "global": head_dim(cfg.d, cfg.global_heads)},
    )
