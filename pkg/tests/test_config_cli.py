import subprocess
import sys

import numpy as np
import pytest

from engageformer import checkpoint
from engageformer.cli import main
from engageformer.config import format_config, load_config, parse_config
from engageformer.data import encode_clip, parse_report
from engageformer.errors import ConfigError
from engageformer.model import ModelConfig
from engageformer.training import TrainConfig

from conftest import CONFIGS


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# ---- config files

def test_print_config_shows_defaults(capsys):
    code, out, _ = run(capsys, "train", "--print-config")
    assert code == 0
    for line in ("train.lr0 = 0.0001", "model.d = 512", "model.view_heads = 3", "model.global_heads = 5",
                 "train.weight_decay = 1e-05", "train.epochs = 100"):
        assert line in out.splitlines()
    assert parse_config(out) == (ModelConfig(), TrainConfig())


def test_shipped_full_config_is_the_default():
    assert load_config(CONFIGS / "full.cfg") == (ModelConfig(), TrainConfig())
    assert load_config(None) == (ModelConfig(), TrainConfig())


def test_format_round_trip_toy():
    model, train = load_config(CONFIGS / "toy.cfg")
    assert parse_config(format_config(model, train)) == (model, train)
    assert model.labels == ("class0", "class1", "class2")


@pytest.mark.parametrize("text", ["model.depth = 3", "train.lr0 = fast", "model.views = 2x8", "nonsense",
                                  "model.d = 0", "train.flip_axis = diagonal"])
def test_bad_config_text(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_unknown_key_exit_code(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("model.depth = 3\n")
    code, _, err = run(capsys, "train", "--config", tmp_path / "bad.cfg", "--print-config")
    assert code == 2 and "model.depth" in err


def test_seed_flag_and_env(capsys, monkeypatch):
    monkeypatch.setenv("ENGAGEFORMER_SEED", "17")
    assert "train.seed = 17" in run(capsys, "train", "--print-config")[1]
    assert "train.seed = 3" in run(capsys, "train", "--print-config", "--seed", "3")[1]
    monkeypatch.setenv("ENGAGEFORMER_SEED", "x")
    assert run(capsys, "train", "--print-config")[0] == 2


# ---- end to end on the toy model

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--n", "3", "--classes", "3", "--geometry", "8x16x16x3", "--seed", "0",
                 "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(CONFIGS / "toy.cfg"), "--data", str(root / "data" / "manifest.txt"),
                 "--out", str(root / "run"), "--epochs", "2", "--seed", "0"]) == 0
    return root


def test_synth_counts(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--n", "4", "--geometry", "4x8x8x3", "--out", tmp_path)
    assert code == 0
    assert len(list(tmp_path.glob("*.efv"))) == 24
    assert run(capsys, "synth", "--n", "1", "--geometry", "4x8", "--out", tmp_path)[0] == 2


def test_train_outputs(trained):
    assert (trained / "run" / "epoch_1.efck").exists()
    assert (trained / "run" / "epoch_2.efck").exists()
    assert len((trained / "run" / "train.log").read_text().splitlines()) == 2


def test_train_missing_manifest(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--config", CONFIGS / "toy.cfg", "--data", tmp_path / "missing.txt",
                       "--out", tmp_path / "run")
    assert code == 3 and "missing.txt" in err


def test_eval_report(trained, capsys):
    code, out, _ = run(capsys, "eval", "--config", CONFIGS / "toy.cfg", "--checkpoint",
                       trained / "run" / "epoch_2.efck", "--data", trained / "data" / "manifest.txt")
    assert code == 0
    fields, grid = parse_report(out)
    assert fields["samples"] == "9" and grid.shape == (3, 3)
    assert grid.sum(axis=1).tolist() == [int(x) for x in fields["class_counts"].split(",")] == [3, 3, 3]
    assert 0.0 <= float(fields["accuracy"]) <= 1.0


def test_eval_checkpoint_mismatch(trained, tmp_path, capsys):
    params = checkpoint.load(trained / "run" / "epoch_1.efck")
    params["head.bias"] = params.pop("head.b")
    checkpoint.save(tmp_path / "bad.efck", params)
    code, _, err = run(capsys, "eval", "--config", CONFIGS / "toy.cfg", "--checkpoint", tmp_path / "bad.efck",
                       "--data", trained / "data" / "manifest.txt")
    assert code == 5 and "head.b" in err
    (tmp_path / "junk.efck").write_bytes(b"EFCK\x01\x00\x00")
    assert run(capsys, "eval", "--config", CONFIGS / "toy.cfg", "--checkpoint", tmp_path / "junk.efck",
               "--data", trained / "data" / "manifest.txt")[0] == 5
    assert run(capsys, "eval", "--config", CONFIGS / "toy.cfg", "--checkpoint", tmp_path / "none.efck",
               "--data", trained / "data" / "manifest.txt")[0] == 5


def test_eval_with_wrong_model(trained, capsys):
    code = run(capsys, "eval", "--checkpoint", trained / "run" / "epoch_1.efck",
               "--data", trained / "data" / "manifest.txt")[0]
    assert code == 5  # full-sized config against a toy checkpoint


def test_predict(trained, capsys):
    argv = ["predict", "--config", CONFIGS / "toy.cfg", "--checkpoint", trained / "run" / "epoch_2.efck",
            "--clip", trained / "data" / "c01_0000.efv"]
    code, out, _ = run(capsys, *argv)
    assert code == 0
    label, *probs = out.split()
    assert label in ("class0", "class1", "class2") and len(probs) == 3
    assert abs(sum(map(float, probs)) - 1.0) <= 1e-6
    assert run(capsys, *argv)[1] == out


def test_predict_bad_clips(trained, tmp_path, capsys):
    base = ["predict", "--config", CONFIGS / "toy.cfg", "--checkpoint", trained / "run" / "epoch_2.efck", "--clip"]
    (tmp_path / "bad.efv").write_bytes(b"NOPE" + bytes(16))
    assert run(capsys, *base, tmp_path / "bad.efv")[0] == 3
    (tmp_path / "small.efv").write_bytes(encode_clip(np.zeros((8, 16, 8, 3), dtype=np.uint8)))
    assert run(capsys, *base, tmp_path / "small.efv")[0] == 3
    assert run(capsys, *base, tmp_path / "absent.efv")[0] == 3


def test_split_command(trained, capsys):
    code, out, _ = run(capsys, "split", "--data", trained / "data" / "manifest.txt", "--prefix", "s_")
    assert code == 0 and out.strip() == "train=9 test=0"


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--max-entries", "2")
    assert code == 0 and out.strip().splitlines()[-1].startswith("gradcheck PASS")


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "engageformer", "train", "--print-config"], capture_output=True,
                          text=True, check=False)
    assert proc.returncode == 0 and "model.d = 512" in proc.stdout
