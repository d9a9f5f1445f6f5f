"""Label-smoothed loss, AdamW with cosine decay, augmentation, the training loop and gradient checks."""

from __future__ import annotations

import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import checkpoint
from . import numerics as nx
from .data import Manifest, load_clips, read_manifest
from .errors import ConfigError, DataError, NumericError
from .model import ModelConfig, as_leaves, forward, init_params, name_key, param_shapes
from .numerics import Rng, Tensor


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    label_smoothing: float = 0.1
    noise_sigma: float = 0.01
    noise_prob: float = 0.5
    flip_prob: float = 0.5
    flip_axis: str = "height"
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        for name in ("noise_prob", "flip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.flip_axis not in ("height", "width"):
            raise ConfigError(f"flip_axis must be 'height' or 'width', got {self.flip_axis!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


# ---------------------------------------------------------------- loss

def smoothed_cross_entropy(logits: Tensor, target: int, smoothing: float) -> Tensor:
    """``-sum_c q_c log softmax(logits)_c`` with ``q = (1-eps) onehot + eps/C``."""
    C = logits.shape[0]
    if not 0 <= target < C:
        raise IndexError(f"target {target} outside [0, {C})")
    q = np.full(C, smoothing / C)
    q[target] += 1.0 - smoothing
    return nx.scale(nx.total(nx.mul(nx.log_softmax(logits), nx.Tensor(q))), -1.0)


def loss_and_grads(clip: np.ndarray, label: int, cfg: ModelConfig, params: Mapping[str, np.ndarray],
                   smoothing: float, rng: Rng | None = None, training: bool = False):
    """Loss value, logits and per-parameter gradients for one clip."""
    leaves = as_leaves(params)
    logits = forward(clip, cfg, leaves, rng, training)
    loss = smoothed_cross_entropy(logits, label, smoothing)
    loss.backward()
    grads = OrderedDict((k, t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items())
    return float(loss.data), logits.data, grads


# ---------------------------------------------------------------- optimizer

def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return max(0.0, lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps)))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamWState,
               lr: float, cfg: TrainConfig):
    """Bias-corrected Adam update, then decoupled decay ``theta -= lr * wd * theta``. Updates in place."""
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, theta in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if cfg.weight_decay:
            theta -= (lr * cfg.weight_decay) * theta
    return params, state


# ---------------------------------------------------------------- augmentation

def augment(clip: np.ndarray, rng: Rng, cfg: TrainConfig) -> np.ndarray:
    """Random flip along ``cfg.flip_axis`` and additive Gaussian noise, clamped to [-1, 1]."""
    u = rng.random(2)
    out = clip
    if u[0] < cfg.flip_prob:
        out = np.flip(out, axis=1 if cfg.flip_axis == "height" else 2)
    if u[1] < cfg.noise_prob:
        out = out + (cfg.noise_sigma * rng.gaussian(out.size)).reshape(out.shape).astype(out.dtype)
    return np.clip(out, -1.0, 1.0).astype(clip.dtype)


# ---------------------------------------------------------------- training loop

@dataclass
class EpochLog:
    epoch: int
    loss: float
    acc: float
    lr: float

    def format(self) -> str:
        return f"epoch={self.epoch} loss={self.loss:.6f} acc={self.acc:.6f} lr={self.lr:.6g}"


@dataclass
class TrainResult:
    params: "OrderedDict[str, np.ndarray]"
    history: list[EpochLog]
    steps: int


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, manifest: Manifest | str | Path,
          out_dir: str | Path | None = None, *, threads: int = 1,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Seeded minibatch training; per-epoch checkpoints ``epoch_<n>.efck`` and ``train.log`` in ``out_dir``.

    Per-sample gradients are summed in batch order, so results do not depend on ``threads``.
    """
    if not isinstance(manifest, Manifest):
        manifest = read_manifest(manifest)
    if not manifest.entries:
        raise DataError("training manifest is empty")
    if manifest.num_classes != model_cfg.classes:
        raise ConfigError(f"manifest has {manifest.num_classes} classes, model expects {model_cfg.classes}")
    clips, labels = load_clips(manifest)
    for e, clip in zip(manifest.entries, clips):
        if clip.shape != model_cfg.clip_shape:
            raise DataError(f"{e.path}: clip shape {clip.shape} does not match configured {model_cfg.clip_shape}")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train.log").write_text("", encoding="utf-8")

    root = Rng(train_cfg.seed)
    params = init_params(model_cfg, train_cfg.seed)
    state = AdamWState()
    n = len(clips)
    bs = train_cfg.batch_size
    steps_per_epoch = math.ceil(n / bs)
    total_steps = train_cfg.epochs * steps_per_epoch
    history: list[EpochLog] = []
    pool = ThreadPoolExecutor(threads) if threads > 1 else None

    def sample(epoch: int, i: int):
        x = augment(clips[i], root.derive(2, epoch, i), train_cfg)
        return loss_and_grads(x, labels[i], model_cfg, params, train_cfg.label_smoothing,
                              root.derive(3, epoch, i), training=True)

    step = 0
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            order = root.derive(1, epoch).shuffle(range(n))
            losses, correct, first_lr = [], 0, None
            for b in range(0, n, bs):
                batch = order[b : b + bs]
                results = list(pool.map(lambda i: sample(epoch, i), batch)) if pool else [sample(epoch, i) for i in batch]
                grads = {k: np.zeros_like(v) for k, v in params.items()}
                for i, (loss, logits, g) in zip(batch, results):
                    if not math.isfinite(loss):
                        raise NumericError(f"non-finite loss {loss} at epoch {epoch}, step {step}, "
                                           f"clip {manifest.entries[i].path}")
                    losses.append(loss)
                    correct += int(np.argmax(logits)) == labels[i]
                    for k in grads:
                        grads[k] += g[k]
                for k in grads:
                    grads[k] /= len(batch)
                lr = cosine_lr(step, total_steps, train_cfg.lr0)
                first_lr = lr if first_lr is None else first_lr
                adamw_step(params, grads, state, lr, train_cfg)
                step += 1
            entry = EpochLog(epoch, float(np.mean(losses)), correct / n, first_lr)
            history.append(entry)
            if log is not None:
                log(entry.format())
            if out is not None:
                with open(out / "train.log", "a", encoding="utf-8") as fh:
                    fh.write(entry.format() + "\n")
                checkpoint.save(out / f"epoch_{epoch}.efck", params)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(params, history, step)


# ---------------------------------------------------------------- gradient check

def toy_config(classes: int = 3) -> ModelConfig:
    """The small model used for gradient checks and overfit runs."""
    return ModelConfig(frames=8, height=16, width=16, channels=3, views=((2, 4, 4), (4, 4, 4), (8, 4, 4)),
                       d=8, view_heads=2, view_layers=2, view_mlp=16, global_heads=2, global_layers=1,
                       global_mlp=16, classes=classes, labels=tuple(f"class{c}" for c in range(classes)))


@dataclass
class GradcheckReport:
    errors: "OrderedDict[str, float]"  # max relative error per parameter tensor
    checked: dict[str, int]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if e > self.tol]

    def format(self) -> str:
        lines = [f"{name} max_rel_err={err:.3e} entries={self.checked[name]} {'ok' if err <= self.tol else 'FAIL'}"
                 for name, err in self.errors.items()]
        lines.append(f"gradcheck {'PASS' if self.passed else 'FAIL'} tol={self.tol:g} tensors={len(self.errors)}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries from dividing by noise."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradcheck(cfg: ModelConfig | None = None, seed: int = 0, *, step: float = 1e-5, tol: float = 1e-4,
              smoothing: float = 0.1, max_entries: int | None = None, grad_fn: Callable | None = None,
              log: Callable[[str], None] | None = None) -> GradcheckReport:
    """Compare analytic gradients of the smoothed loss with central differences, in float64.

    ``max_entries`` caps how many entries per tensor are probed (chosen by a
    seeded shuffle); ``None`` probes every entry. ``grad_fn`` replaces
    :func:`loss_and_grads` for the analytic side.
    """
    cfg = cfg or toy_config()
    grad_fn = grad_fn or loss_and_grads
    with nx.precision("float64"):
        params = init_params(cfg, seed)
        rng = Rng(seed).derive(99)
        clip = (rng.random(int(np.prod(cfg.clip_shape))) * 2.0 - 1.0).reshape(cfg.clip_shape)
        label = seed % cfg.classes
        _, _, analytic = grad_fn(clip, label, cfg, params, smoothing)
        frozen = OrderedDict((k, nx.Tensor(v)) for k, v in params.items())

        def loss_at() -> float:
            return float(smoothed_cross_entropy(forward(clip, cfg, frozen), label, smoothing).data)

        errors: "OrderedDict[str, float]" = OrderedDict()
        checked: dict[str, int] = {}
        for name in param_shapes(cfg):
            flat = frozen[name].data.reshape(-1)
            idx = list(range(flat.size))
            if max_entries is not None and flat.size > max_entries:
                idx = sorted(rng.derive(name_key(name)).shuffle(idx)[:max_entries])
            numeric = np.empty(len(idx))
            for j, i in enumerate(idx):
                keep = flat[i]
                flat[i] = keep + step
                up = loss_at()
                flat[i] = keep - step
                down = loss_at()
                flat[i] = keep
                numeric[j] = (up - down) / (2.0 * step)
            a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)[idx]
            errors[name] = float(relative_error(a, numeric).max())
            checked[name] = len(idx)
            if log is not None:
                log(f"{name} max_rel_err={errors[name]:.3e}")
    return GradcheckReport(errors, checked, tol)

