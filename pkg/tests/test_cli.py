import csv
import subprocess
import sys

import numpy as np
import pytest

from ddsam2 import checkpoint
from ddsam2.adapter import param_count
from ddsam2.cli import main, profile_state
from ddsam2.model import EncoderConfig, init_state
from ddsam2.reporting import COLUMNS, read_rows

GEN = ["--videos", "5", "--frames", "4", "--size", "32", "--radius-min", "3", "--radius-max", "6"]
MODEL = ["--embed-dim", "8", "--heads", "2", "--blocks", "2", "--adapters", "1", "--reduction", "2",
         "--lr-adapter", "1e-2", "--lr-decoder", "1e-3", "--subseq-len", "3"]


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen", "--out", str(d)] + GEN) == 0
    return d


@pytest.fixture(scope="module")
def ckpt(data, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "m.ckpt"
    assert main(["train", "--data", str(data), "--out", str(path), "--epochs", "1"] + MODEL) == 0
    return path


# ---------------------------------------------------------------- gen


def test_gen_default_split_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen", "--out", str(a), "--frames", "2"]) == 0
    assert capsys.readouterr().out.strip() == "train=35 val=5 test=10"
    assert main(["gen", "--out", str(b), "--frames", "2"]) == 0
    assert tree_bytes(a) == tree_bytes(b)


def test_gen_errors(tmp_path, caplog):
    assert main(["gen", "--out", str(tmp_path / "x"), "--videos", "1"]) == 2
    assert "splits empty" in caplog.text
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen", "--out", str(blocker / "sub")] + GEN) == 2
    assert main(["gen"]) == 2
    assert main(["bogus"]) == 2


# ---------------------------------------------------------------- train


def test_train_zero_epochs_is_init(data, tmp_path):
    out = tmp_path / "z.ckpt"
    assert main(["train", "--data", str(data), "--out", str(out), "--epochs", "0", "--seed", "4"] + MODEL) == 0
    state = checkpoint.load(out)
    assert checkpoint.dumps(state) == checkpoint.dumps(init_state(state.config, 4))
    rows = list(csv.reader(open(str(out) + ".log.csv")))
    assert rows == [["epoch", "train_loss", "val_dice", "lr"]]


def test_train_deterministic_and_log(data, ckpt, tmp_path):
    again = tmp_path / "again.ckpt"
    log = tmp_path / "log.csv"
    assert main(["train", "--data", str(data), "--out", str(again), "--epochs", "1", "--log", str(log)] + MODEL) == 0
    assert again.read_bytes() == ckpt.read_bytes()
    rows = list(csv.DictReader(open(log)))
    assert len(rows) == 1 and float(rows[0]["lr"]) == pytest.approx(5e-3)


def test_train_decoder_only(data, tmp_path):
    out = tmp_path / "none.ckpt"
    flags = [f for f in MODEL if f not in ("--adapters", "1")]
    assert main(["train", "--data", str(data), "--out", str(out), "--epochs", "1", "--variant", "none"] + flags) == 0
    state = checkpoint.load(out)
    assert all(n.startswith("decoder.") for n in state.trainable_names())


def test_train_bad_inputs(tmp_path, data):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "o"), "--variant", "none",
                 "--adapters", "3"]) == 2
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "o"), "--dilations", "x"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_exit_code(data, tmp_path, caplog):
    # an absurd learning rate drives the tiny model to non-finite values
    code = main(["train", "--data", str(data), "--out", str(tmp_path / "n.ckpt"), "--epochs", "3",
                 "--lr-decoder", "1e300", "--lr-adapter", "1e300", "--clip-norm", "1e300"] + MODEL[:10])
    assert code == 3
    assert "epoch 0 step" in caplog.text
    assert not (tmp_path / "n.ckpt").exists()


# ---------------------------------------------------------------- eval


def test_eval_oracle_masks(data, ckpt, tmp_path):
    report = tmp_path / "oracle.csv"
    assert main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--report", str(report), "--oracle-masks"]) == 0
    with open(report, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == COLUMNS
    assert len(rows) == 1 + 1 + 1  # one test video plus the aggregate
    for row in rows[1:]:
        assert row[2] == "1.0000" and row[6] == "0.0000"


def test_eval_aggregate_recomputes(data, ckpt, tmp_path):
    report = tmp_path / "r.csv"
    assert main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--report", str(report), "--split", "train"]) == 0
    rows = read_rows(report)
    per_video, agg = rows[:-1], rows[-1]
    assert agg.config.endswith("|ALL") and len(per_video) == 3
    for m in ("dice", "nsd", "hd95", "asd"):
        vals = np.array([getattr(r, m + "_mean") for r in per_video])
        assert abs(getattr(agg, m + "_mean") - vals.mean()) <= 1e-4
        assert abs(getattr(agg, m + "_std") - vals.std()) <= 1e-4
    state = checkpoint.load(ckpt)
    assert agg.params_trainable == state.count(True) and agg.params_total == state.count()
    again = tmp_path / "r2.csv"
    main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--report", str(again), "--split", "train"])
    assert again.read_bytes() == report.read_bytes()


def test_eval_errors(data, ckpt, tmp_path):
    rep = str(tmp_path / "x.csv")
    assert main(["eval", "--data", str(data), "--ckpt", str(tmp_path / "missing"), "--report", rep]) == 2
    big = tmp_path / "big.ckpt"
    checkpoint.save(init_state(EncoderConfig()), big)
    assert main(["eval", "--data", str(data), "--ckpt", str(big), "--report", rep]) == 2


# ---------------------------------------------------------------- ablate / profile / baseline


def test_ablate_adapters(data, tmp_path):
    report = tmp_path / "ab.csv"
    flags = [f for f in MODEL if f not in ("--adapters", "1")]
    assert main(["ablate", "--data", str(data), "--sweep", "adapters", "--report", str(report),
                 "--epochs", "1"] + flags) == 0
    rows = read_rows(report)
    assert len(rows) == 2
    assert rows[0].params_trainable < rows[1].params_trainable


def test_profile(ckpt, capsys):
    assert main(["profile", "--ckpt", str(ckpt), "--frames", "3"]) == 0
    out = dict(line.split() for line in capsys.readouterr().out.strip().splitlines())
    state = checkpoint.load(ckpt)
    assert int(out["adapter_params_closed_form"]) == int(out["adapter_params_enumerated"])
    assert int(out["adapter_delta_vs_none"]) == 1 * param_count(state.config.adapter_cfg)
    assert int(out["macs_per_frame_no_adapters"]) < int(out["macs_per_frame"])
    assert float(out["fps"]) > 0


def test_profile_default_model_delta():
    state = init_state(EncoderConfig())
    info = profile_state(state, frames=2)
    assert info["adapter_delta_vs_none"] == 6 * param_count(state.config.adapter_cfg) == 6 * 712
    assert info["params_trainable"] / info["params_total"] < 0.5


def test_baseline_and_check_csv(data, ckpt, tmp_path, capsys):
    rigid, copy = tmp_path / "rigid.csv", tmp_path / "copy.csv"
    assert main(["baseline", "--data", str(data), "--method", "rigid", "--report", str(rigid)]) == 0
    assert main(["baseline", "--data", str(data), "--method", "copy", "--report", str(copy)]) == 0
    assert main(["baseline", "--data", str(data), "--method", "deform", "--report", str(copy)]) == 2
    assert main(["check-csv", str(rigid), str(copy)]) == 0
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n")
    assert main(["check-csv", str(bad)]) == 2


def test_copy_baseline_static(tmp_path):
    d = tmp_path / "static"
    assert main(["gen", "--out", str(d), "--amplitude", "0", "--deform", "0", "--noise", "0"] + GEN) == 0
    report = tmp_path / "c.csv"
    assert main(["baseline", "--data", str(d), "--method", "copy", "--report", str(report)]) == 0
    assert read_rows(report)[-1].dice_mean == 1.0


def test_console_script_entry():
    proc = subprocess.run([sys.executable, "-m", "ddsam2.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gen" in proc.stdout
