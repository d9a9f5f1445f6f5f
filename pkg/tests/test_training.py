import math

import numpy as np
import pytest

from engageformer import checkpoint
from engageformer import numerics as nx
from engageformer.data import synth_dataset
from engageformer.errors import ConfigError, DataError, NumericError
from engageformer.numerics import Rng, Tensor
from engageformer.training import (AdamWState, TrainConfig, adamw_step, augment, cosine_lr, gradcheck,
                                   loss_and_grads, smoothed_cross_entropy, toy_config, train)


# ---- loss

@pytest.mark.parametrize("eps", [0.0, 0.1, 0.5, 0.9])
def test_uniform_logits_give_log_c(eps, f64):
    for target in range(6):
        assert float(smoothed_cross_entropy(Tensor(np.zeros(6)), target, eps).data) == pytest.approx(math.log(6), abs=1e-12)


def test_confident_correct_prediction(f64):
    loss = float(smoothed_cross_entropy(Tensor([10.0, 0, 0, 0, 0, 0]), 0, 0.0).data)
    assert loss == pytest.approx(math.log1p(5 * math.exp(-10)), rel=1e-12)
    assert loss == pytest.approx(2.27e-4, abs=5e-7)


def test_full_smoothing_ignores_target(f64):
    logits = Tensor([0.3, -1.2, 2.0])
    values = {round(float(smoothed_cross_entropy(logits, t, 1.0 - 1e-15).data), 10) for t in range(3)}
    assert len(values) == 1


def test_loss_target_range():
    with pytest.raises(IndexError):
        smoothed_cross_entropy(Tensor(np.zeros(3)), 3, 0.1)


def test_loss_non_negative(f64):
    r = np.random.default_rng(0)
    for _ in range(50):
        assert float(smoothed_cross_entropy(Tensor(r.normal(size=5) * 5), int(r.integers(5)), 0.1).data) >= 0


# ---- optimizer

def test_adamw_first_step_closed_form():
    cfg = TrainConfig(weight_decay=0.0)
    params = {"x": np.zeros(1)}
    adamw_step(params, {"x": np.ones(1)}, AdamWState(), 1e-4, cfg)
    assert abs(params["x"][0] - (-1e-4 / (1.0 + 1e-8))) <= 1e-10


def test_adamw_zero_gradient_no_decay():
    params = {"x": np.array([0.3, -2.0])}
    adamw_step(params, {"x": np.zeros(2)}, AdamWState(), 1e-2, TrainConfig(weight_decay=0.0))
    np.testing.assert_array_equal(params["x"], [0.3, -2.0])


def test_adamw_decoupled_decay_is_pure_shrink():
    params = {"x": np.array([0.3, -2.0])}
    adamw_step(params, {"x": np.zeros(2)}, AdamWState(), 1e-2, TrainConfig(weight_decay=0.5))
    np.testing.assert_allclose(params["x"], np.array([0.3, -2.0]) * (1 - 1e-2 * 0.5), rtol=1e-15)


def test_adamw_minimizes_square():
    cfg = TrainConfig(weight_decay=0.0)
    params, state = {"x": np.array([1.0])}, AdamWState()
    for step in range(1, 2001):
        adamw_step(params, {"x": 2 * params["x"]}, state, 1e-2, cfg)
        if abs(params["x"][0]) <= 1e-2:
            break
    assert abs(params["x"][0]) <= 1e-2 and step <= 2000


# ---- schedule

def test_cosine_values():
    assert cosine_lr(0, 1000, 1e-4) == 1e-4
    assert cosine_lr(500, 1000, 1e-4) == 5e-5
    assert cosine_lr(1000, 1000, 1e-4) == 0.0


def test_cosine_monotone():
    lrs = [cosine_lr(s, 337, 1e-3) for s in range(338)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_cosine_rejects_zero_total():
    with pytest.raises(ConfigError):
        cosine_lr(0, 0, 1e-4)


# ---- augmentation

def test_augment_identity_when_disabled():
    clip = np.random.default_rng(0).uniform(-1, 1, (4, 6, 6, 3)).astype(np.float32)
    out = augment(clip, Rng(0), TrainConfig(flip_prob=0.0, noise_prob=0.0))
    np.testing.assert_array_equal(out, clip)


@pytest.mark.parametrize("axis", ["height", "width"])
def test_flip_is_involution(axis):
    clip = np.random.default_rng(1).uniform(-1, 1, (4, 6, 5, 3)).astype(np.float32)
    cfg = TrainConfig(flip_prob=1.0, noise_prob=0.0, flip_axis=axis)
    once = augment(clip, Rng(0), cfg)
    assert once.shape == clip.shape
    np.testing.assert_array_equal(once, np.flip(clip, axis=1 if axis == "height" else 2))
    np.testing.assert_array_equal(augment(once, Rng(1), cfg), clip)


def test_noise_magnitude():
    clip = np.zeros((10, 100, 100, 1))
    sigma = 0.01
    out = augment(clip, Rng(3), TrainConfig(flip_prob=0.0, noise_prob=1.0, noise_sigma=sigma))
    expected = sigma * math.sqrt(2 / math.pi)  # half-normal mean
    assert abs(np.abs(out - clip).mean() - expected) <= 0.05 * expected


def test_augment_clamps():
    clip = np.full((2, 4, 4, 3), 1.0, dtype=np.float32)
    out = augment(clip, Rng(0), TrainConfig(flip_prob=0.0, noise_prob=1.0, noise_sigma=0.5))
    assert out.max() <= 1.0 and out.min() >= -1.0 and out.dtype == clip.dtype


# ---- training loop

@pytest.fixture(scope="module")
def tiny_set(tmp_path_factory):
    return synth_dataset(2, 3, (8, 16, 16, 3), 0, tmp_path_factory.mktemp("tiny"))


def test_train_writes_checkpoints_and_log(tiny_set, tmp_path):
    cfg = toy_config()
    result = train(cfg, TrainConfig(lr0=1e-3, epochs=2, batch_size=4, seed=1), tiny_set, tmp_path)
    assert (tmp_path / "epoch_1.efck").exists() and (tmp_path / "epoch_2.efck").exists()
    lines = (tmp_path / "train.log").read_text().splitlines()
    assert len(lines) == 2 and lines[0].startswith("epoch=1 loss=") and lines[0].endswith("lr=0.001")
    assert result.steps == 4
    saved = checkpoint.load(tmp_path / "epoch_2.efck")
    assert all(saved[k].tobytes() == result.params[k].tobytes() for k in saved)


def test_first_logged_lr_is_lr0(tiny_set):
    result = train(toy_config(), TrainConfig(epochs=1, seed=0), tiny_set)
    assert result.history[0].lr == 1e-4


def test_threads_do_not_change_results(tiny_set):
    cfg, tcfg = toy_config(), TrainConfig(lr0=1e-3, epochs=1, batch_size=3, seed=2)
    a = train(cfg, tcfg, tiny_set).params
    b = train(cfg, tcfg, tiny_set, threads=3).params
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_class_count_mismatch(tiny_set):
    with pytest.raises(ConfigError):
        train(toy_config(4), TrainConfig(epochs=1), tiny_set)


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError, match="nope.txt"):
        train(toy_config(), TrainConfig(epochs=1), tmp_path / "nope.txt")


def test_nan_loss_aborts(tiny_set, monkeypatch):
    import engageformer.training as tr

    real = tr.loss_and_grads

    def poisoned(*args, **kwargs):
        loss, logits, grads = real(*args, **kwargs)
        return float("nan"), logits, grads

    monkeypatch.setattr(tr, "loss_and_grads", poisoned)
    with pytest.raises(NumericError, match="non-finite loss"):
        train(toy_config(), TrainConfig(epochs=1), tiny_set)


# ---- gradient-check harness

def test_gradcheck_flags_corrupted_tensor(toy):
    def corrupted(*args, **kwargs):
        loss, logits, grads = loss_and_grads(*args, **kwargs)
        grads["view1.layer0.mlp.w2"] = grads["view1.layer0.mlp.w2"] * 1.01
        return loss, logits, grads

    report = gradcheck(toy, seed=0, max_entries=4, grad_fn=corrupted)
    assert not report.passed
    assert report.failures == ["view1.layer0.mlp.w2"]
    assert "view1.layer0.mlp.w2" in report.format() and "FAIL" in report.format()


def test_gradcheck_catches_broken_backward(toy, monkeypatch):
    # break the GeLU derivative inside the op itself
    real_gelu = nx.gelu

    def bad_gelu(x):
        out = real_gelu(x)
        if out.requires_grad:
            inner = out._backward
            out._backward = lambda g: inner(g * 0.5)
        return out

    monkeypatch.setattr("engageformer.encoder.nx.gelu", bad_gelu)
    report = gradcheck(toy, seed=0, max_entries=3)
    assert not report.passed
    assert any(".mlp.w1" in name for name in report.failures)


def test_gradcheck_lists_every_path_once(toy):
    from engageformer.model import param_shapes

    report = gradcheck(toy, seed=2, max_entries=2)
    names = [line.split()[0] for line in report.format().splitlines()[:-1]]
    assert names == list(param_shapes(toy))
    assert len(set(names)) == len(names)
