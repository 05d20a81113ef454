"""Config round-trip, checkpoint format, CLI surface, and report rendering."""

import os
import subprocess
import sys

import numpy as np
import pytest

from ldtprune import config as cfg_mod
from ldtprune.checkpoint import (
    Checkpoint,
    read_checkpoint,
    write_checkpoint,
)
from ldtprune.cli import main
from ldtprune.errors import CheckpointError, ConfigError
from ldtprune.report import ReportInputError, generate_report

from conftest import rng


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_render_parse_round_trip():
    cfg = cfg_mod.ExperimentConfig()
    cfg.seed = 7
    cfg.out_dir = "runs/x"
    cfg.optim.lr = 0.0123
    cfg.ldt.alpha = 1e-3
    cfg.prune.use_location = False
    cfg.arch.widths = (8, 12, 16)
    assert cfg_mod.parse(cfg_mod.render(cfg)) == cfg


def test_config_unknown_key_rejected():
    with pytest.raises(ConfigError) as ei:
        cfg_mod.parse("optim.learning_rate = 0.1\n")
    assert "unknown key" in str(ei.value)
    with pytest.raises(ConfigError):
        cfg_mod.parse("banana = 3\n")
    with pytest.raises(ConfigError):
        cfg_mod.parse("optim.lr 0.1\n")


def test_config_bad_value_rejected():
    with pytest.raises(ConfigError):
        cfg_mod.parse("optim.epochs = many\n")
    with pytest.raises(ConfigError):
        cfg_mod.parse("prune.use_location = yes\n")


def test_config_comments_and_blanks():
    cfg = cfg_mod.parse("# a comment\n\nseed = 3  # trailing\n")
    assert cfg.seed == 3


def test_config_file_round_trip(tmp_path):
    cfg = cfg_mod.ExperimentConfig()
    cfg.optim.epochs = 2
    p = str(tmp_path / "exp.cfg")
    cfg_mod.save(cfg, p)
    assert cfg_mod.load(p) == cfg


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

def sample_checkpoint():
    g = rng(70)
    params = {
        "w1": g.normal(size=(4, 3, 3, 3)).astype(np.float32),
        "b1": g.normal(size=4).astype(np.float32),
    }
    momenta = {k: (0.1 * v).astype(np.float32) for k, v in params.items()}
    history = [{"w1": np.array([True, False, True, True])}]
    return Checkpoint(
        config_text=cfg_mod.render(cfg_mod.ExperimentConfig()),
        params=params, momenta=momenta, epoch=12, ldt_trained=True,
        mask_history=history,
    )


def test_checkpoint_round_trip_bit_exact(tmp_path):
    ck = sample_checkpoint()
    path = str(tmp_path / "m.ldtc")
    write_checkpoint(ck, path)
    back = read_checkpoint(path)
    assert back.config_text == ck.config_text
    assert back.epoch == 12 and back.ldt_trained
    for k, v in ck.params.items():
        np.testing.assert_array_equal(back.params[k], v)
    for k, v in ck.momenta.items():
        np.testing.assert_array_equal(back.momenta[k], v)
    assert len(back.mask_history) == 1
    np.testing.assert_array_equal(
        back.mask_history[0]["w1"], ck.mask_history[0]["w1"]
    )
    # re-serialization of the parsed checkpoint is byte-identical
    assert back.to_bytes() == ck.to_bytes()


def test_checkpoint_bad_magic():
    blob = bytearray(sample_checkpoint().to_bytes())
    blob[0] ^= 0xFF
    with pytest.raises(CheckpointError) as ei:
        Checkpoint.from_bytes(bytes(blob))
    assert "not a checkpoint" in str(ei.value)


def test_checkpoint_version_mismatch():
    blob = bytearray(sample_checkpoint().to_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    with pytest.raises(CheckpointError) as ei:
        Checkpoint.from_bytes(bytes(blob))
    assert "version" in str(ei.value)


def test_checkpoint_truncation_fuzz():
    """Truncation at any byte boundary raises a clean CheckpointError."""
    blob = sample_checkpoint().to_bytes()
    for k in range(0, len(blob) - 1):
        with pytest.raises(CheckpointError) as ei:
            Checkpoint.from_bytes(blob[:k])
        msg = str(ei.value)
        assert ("unexpected end at byte" in msg or "not a checkpoint" in msg
                or "payload length" in msg), (k, msg)


def test_checkpoint_truncation_reports_length():
    blob = sample_checkpoint().to_bytes()
    with pytest.raises(CheckpointError) as ei:
        Checkpoint.from_bytes(blob[:100])
    assert "unexpected end at byte 100" in str(ei.value)


def test_checkpoint_trailing_garbage():
    blob = sample_checkpoint().to_bytes() + b"xx"
    with pytest.raises(CheckpointError) as ei:
        Checkpoint.from_bytes(blob)
    assert "trailing" in str(ei.value)


def test_checkpoint_missing_file():
    with pytest.raises(CheckpointError):
        read_checkpoint("/nonexistent/model.ldtc")


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def tiny_config(tmp_path, **overrides):
    cfg = cfg_mod.ExperimentConfig()
    cfg.data.n_train = 32
    cfg.data.n_val = 8
    cfg.optim.epochs = 1
    cfg.arch.widths = (6, 8, 10)
    cfg.arch.c_neck = 8
    cfg.prune.trace_images = 16
    cfg.prune.retrain_epochs = 1
    cfg.out_dir = str(tmp_path / "run")
    for k, v in overrides.items():
        setattr(cfg, k, v)
    path = str(tmp_path / "exp.cfg")
    cfg_mod.save(cfg, path)
    return path, cfg


def test_cli_error_line_is_machine_parsable(tmp_path, capsys):
    rc = main(["eval", "--checkpoint", str(tmp_path / "missing.ldtc")])
    assert rc != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert err[0].startswith("error category=checkpoint: ")


def test_cli_bad_config_category(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("optim.lr = fast\n")
    rc = main(["train", "--config", str(bad)])
    assert rc != 0
    assert capsys.readouterr().err.startswith("error category=config: ")


def test_cli_gen_data(tmp_path):
    cfg_path, cfg = tiny_config(tmp_path)
    out = str(tmp_path / "data")
    rc = main(["gen-data", "--config", cfg_path, "--out", out])
    assert rc == 0
    assert os.path.exists(os.path.join(out, "train_annotations.txt"))


def test_cli_train_eval_trace_report_pipeline(tmp_path, capsys):
    """End-to-end smoke on a one-epoch config; every stage exits 0."""
    cfg_path, cfg = tiny_config(tmp_path)
    run = cfg.out_dir
    ckpt = os.path.join(run, "model.ldtc")

    assert main(["train", "--config", cfg_path]) == 0
    assert os.path.exists(ckpt)
    for name in ("train_metrics.csv", "train_spectra.csv",
                 "train_cov_energy.csv"):
        assert os.path.exists(os.path.join(run, name)), name

    assert main(["eval", "--config", cfg_path, "--checkpoint", ckpt]) == 0
    out = capsys.readouterr().out
    assert "mAP" in out

    assert main(["trace", "--config", cfg_path, "--checkpoint", ckpt,
                 "--out", run]) == 0
    assert os.path.exists(os.path.join(run, "importance.csv"))
    assert os.path.exists(os.path.join(run, "stability.csv"))

    assert main(["prune", "--config", cfg_path, "--checkpoint", ckpt,
                 "--rate", "0.2", "--rounds", "1", "--out", run]) == 0
    assert os.path.exists(os.path.join(run, "prune_ldt_rounds.csv"))

    assert main(["report", "--out", run]) == 0
    svgs = [f for f in os.listdir(run) if f.endswith(".svg")]
    assert len(svgs) >= 3
    assert os.path.exists(os.path.join(run, "report_summary.csv"))


def test_cli_subprocess_entry_point(tmp_path):
    """The installed console entry point reports errors with exit code 2."""
    proc = subprocess.run(
        [sys.executable, "-m", "ldtprune.cli", "eval", "--checkpoint",
         str(tmp_path / "no.ldtc")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 2
    assert proc.stderr.startswith("error category=checkpoint: ")


def test_cli_train_determinism(tmp_path):
    """Identical seeds give byte-identical metrics CSVs."""
    cfg_path, cfg = tiny_config(tmp_path)
    run_a = str(tmp_path / "a")
    run_b = str(tmp_path / "b")
    assert main(["train", "--config", cfg_path, "--out", run_a]) == 0
    assert main(["train", "--config", cfg_path, "--out", run_b]) == 0
    for name in ("train_metrics.csv", "train_spectra.csv"):
        with open(os.path.join(run_a, name), "rb") as fa, \
                open(os.path.join(run_b, name), "rb") as fb:
            assert fa.read() == fb.read(), name
    ca = read_checkpoint(os.path.join(run_a, "model.ldtc"))
    cb = read_checkpoint(os.path.join(run_b, "model.ldtc"))
    for k in ca.params:
        np.testing.assert_array_equal(ca.params[k], cb.params[k])


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def write_report_inputs(run):
    os.makedirs(run, exist_ok=True)

    def put(name, text):
        with open(os.path.join(run, name), "w") as fh:
            fh.write(text)

    put("train_spectra.csv",
        "epoch,scale,k,eigenvalue\n"
        "0,0,0,2.5\n0,0,1,0.5\n1,0,0,3.25\n1,0,1,0.25\n")
    put("train_cov_energy.csv",
        "epoch,scale,offdiag_energy\n0,0,1.5\n1,0,0.75\n")
    put("stability.csv",
        "batch,layer,channel,importance\n"
        "0,c1,0,1.0\n0,c1,1,2.0\n1,c1,0,1.1\n1,c1,1,1.9\n")
    put("prune_ldt_rounds.csv",
        "round,rate,params,macs,val_map\n"
        "0,0.0,1000,5000,0.41\n1,0.25,750,3700,0.39\n")


def test_report_renders_figures_and_summary(tmp_path):
    run = str(tmp_path / "run")
    write_report_inputs(run)
    files = generate_report(run)
    assert any(f.endswith(".svg") for f in files)
    for f in files:
        assert os.path.exists(f)
    # figures embed the exact CSV values as text (svg.fonttype="none")
    with open(os.path.join(run, "fig_map_vs_rate.svg")) as fh:
        svg = fh.read()
    assert "0.39" in svg
    with open(os.path.join(run, "report_summary.csv")) as fh:
        summary = fh.read()
    assert "final_map_ldt" in summary and "0.39" in summary


def test_report_missing_inputs_listed(tmp_path):
    run = str(tmp_path / "empty")
    os.makedirs(run)
    with pytest.raises(ReportInputError) as ei:
        generate_report(run)
    msg = str(ei.value)
    assert "train_spectra.csv" in msg and "stability.csv" in msg
    assert ei.value.category == "missing-input"


def test_report_cli_missing_input_category(tmp_path, capsys):
    run = str(tmp_path / "empty")
    os.makedirs(run)
    rc = main(["report", "--out", run])
    assert rc != 0
    assert capsys.readouterr().err.startswith("error category=missing-input")
