import hashlib
import json

import numpy as np
import pytest

from violin_hpr.cli import (EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, SNAPSHOT, UsageError, apply_override,
                            default_config, load_config, main)
from violin_hpr.dataset import write_wav

SMALL = {"corpus": {"octaves": ["M"], "notes": ["Sa", "Pa"], "styles": ["Sm"], "loudness": ["Lo"],
                    "instances": 1, "duration_s": 1.0},
         "arch": {"epochs": 4, "latent_dim": 4, "hidden": [16, 12]},
         "eval": {"max_points": 60, "perplexity": 5, "tsne_iters": 100, "dump_frames": 1}}


def digest(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != SNAPSHOT}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    c = ["-c", str(cfg)]
    assert main(c + ["gen", "--out", str(root / "corpus")]) == EXIT_OK
    write_wav(root / "corpus" / "99_M_Re1_Sm_So.wav", np.zeros(44100), 44100)   # not in the manifest
    assert main(c + ["analyze", "--corpus", str(root / "corpus"), "--out", str(root / "feats")]) == EXIT_OK
    feats = str(root / "feats" / "features.csv")
    for kind in ("INet", "ConcatNet", "JNet"):
        assert main(c + ["--set", f"arch.kind={kind}", "train", "--features", feats,
                         "--out", str(root / kind)]) == EXIT_OK
    models = [str(root / k) for k in ("INet", "ConcatNet", "JNet")]
    assert main(c + ["eval", "--models", *models, "--features", feats, "--out", str(root / "ev"),
                     "--octaves", "M"]) == EXIT_OK
    wav = str(sorted((root / "corpus").glob("01_*.wav"))[0])
    assert main(c + ["reconstruct", "--model", str(root / "INet"), "--wav", wav, "--out", str(root / "rec")]) == EXIT_OK
    return root


def test_outputs_present(workspace):
    r = workspace
    assert len(list((r / "corpus").glob("0*.wav"))) == 2
    assert sorted(p.name for p in (r / "feats" / "notes").iterdir()) == ["01_M_Sa_Sm_Lo.csv", "02_M_Pa_Sm_Lo.csv"]
    for d in ("corpus", "feats", "INet", "ev", "rec"):
        assert (r / d / SNAPSHOT).exists()
    assert (r / "rec" / "01_M_Sa_Sm_Lo_recon.wav").exists()
    assert (r / "rec" / "01_M_Sa_Sm_Lo_passthrough.wav").exists()


def test_checkpoint_counts(workspace):
    counts = {k: len(list((workspace / k).glob("*.ckpt.json"))) for k in ("INet", "ConcatNet", "JNet")}
    assert counts == {"INet": 2, "ConcatNet": 1, "JNet": 2}


def test_loss_curve_rows(workspace):
    lines = (workspace / "INet" / "loss_curve.csv").read_text().splitlines()
    assert lines[0] == "epoch,harmonic_train,harmonic_test,residual_train,residual_test"
    assert len(lines) == 1 + SMALL["arch"]["epochs"]


def test_mse_report_rows(workspace):
    lines = (workspace / "ev" / "mse_report.csv").read_text().splitlines()
    assert len(lines) == 1 + 3 * 2 * 2
    snap = json.loads((workspace / "ev" / SNAPSHOT).read_text())
    assert snap["eval"]["octaves"] == ["M"]


def test_manifest_drives_analysis(workspace):
    # the stray file is not in the manifest, so it is ignored rather than listed
    assert (workspace / "feats" / "failures.csv").read_text().splitlines() == ["filename,error"]


def test_replay_byte_identical(workspace):
    before = digest(workspace)
    for d in ("corpus", "feats", "JNet", "ev", "rec"):
        assert main(["replay", str(workspace / d / SNAPSHOT)]) == EXIT_OK
    assert digest(workspace) == before


def test_silent_file_listed(tmp_path):
    (tmp_path / "c").mkdir()
    write_wav(tmp_path / "c" / "01_M_Sa_Sm_So.wav", np.zeros(44100), 44100)
    assert main(["analyze", "--corpus", str(tmp_path / "c"), "--out", str(tmp_path / "o")]) == EXIT_OK
    rows = (tmp_path / "o" / "failures.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].startswith("01_M_Sa_Sm_So.wav,")
    assert (tmp_path / "o" / "features.csv").read_text().count("\n") == 1


def test_exit_codes(tmp_path, workspace):
    feats = str(workspace / "feats" / "features.csv")
    assert main(["--set", "arch.nope=1", "train", "--features", feats, "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["--set", "arch.kind=Other", "train", "--features", feats, "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["analyze", "--corpus", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["train", "--features", str(tmp_path / "none.csv"), "--out", str(tmp_path / "x")]) == EXIT_DATA
    assert main(["-c", str(workspace / "small.json"), "--set", "arch.lr=1e6", "--set", "arch.epochs=50",
                 "--set", "arch.kind=ConcatNet", "train", "--features", feats, "--out", str(tmp_path / "d")]) \
        == EXIT_DIVERGED
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == EXIT_USAGE


def test_config_helpers(tmp_path):
    cfg = default_config()
    apply_override(cfg, "arch.epochs=7")
    apply_override(cfg, "arch.kind=JNet")
    assert cfg["arch"]["epochs"] == 7 and cfg["arch"]["kind"] == "JNet"
    with pytest.raises(UsageError):
        apply_override(cfg, "arch.epochs")
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"version": 2}))
    with pytest.raises(UsageError):
        load_config(p)
    p.write_text("{not json")
    with pytest.raises(UsageError):
        load_config(p)
    with pytest.raises(UsageError):
        load_config(tmp_path / "absent.json")
