import json
import subprocess
import sys

import numpy as np
import pytest

from via import cli
from via import skeleton as sk

TINY = {
    "batch_size": 4, "k_clusters": 3, "holdout_per_motion": 1, "max_steps": 4, "lr": 3e-3,
    "model": {"stage_channels": [4, 6, 8], "decoder_channels": [8, 6], "K": 4},
    "loss": {"velocity_weight": 0.05},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert cli.main(["generate-data", "--motions", "3", "--characters", "4", "--frames", "16",
                     "--seed", "2", "--out", str(data)]) == 0
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    run = root / "run"
    assert cli.main(["train", "--data", str(data), "--config", str(cfg), "--out", str(run)]) == 0
    return root, data, run / "checkpoint.viac"


def test_default_generation_counts(tmp_path):
    assert cli.main(["generate-data", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert len(doc["sequences"]) == 96
    assert len(list(tmp_path.glob("*.vias"))) == 96
    assert all("cluster" in e for e in doc["sequences"])


def test_generation_is_repeatable(tmp_path):
    for d in ("a", "b"):
        cli.main(["generate-data", "--motions", "2", "--characters", "3", "--frames", "16",
                  "--out", str(tmp_path / d)])
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()


def test_frames_not_divisible_by_eight(tmp_path, capsys):
    assert cli.main(["generate-data", "--frames", "60", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("via: usage error:") and "divisible by 8" in err


def test_unknown_flag_exits_two(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["generate-data", "--bogus"])
    assert e.value.code == 2
    assert "via: usage error" in capsys.readouterr().err


def test_missing_data_is_io_error(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1
    assert capsys.readouterr().err.startswith("via: error:")


def test_bad_override_is_usage_error(workspace, tmp_path):
    _, data, _ = workspace
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path), "--set", "lr"]) == 2
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path), "--set", "batch_size=0"]) == 2


def test_train_writes_outputs(workspace):
    _, _, ckpt_path = workspace
    run = ckpt_path.parent
    assert ckpt_path.exists() and (run / "metrics.csv").exists()
    resolved = json.loads((run / "config.json").read_text())
    assert resolved["command"] == "train" and resolved["model"]["K"] == 4
    assert not list(run.glob("*.tmp"))


def test_train_resume_extends_run(workspace, tmp_path):
    root, data, _ = workspace
    cfg = root / "tiny.json"
    out = tmp_path / "r"
    cli.main(["train", "--data", str(data), "--config", str(cfg), "--out", str(out), "--steps", "2"])
    assert cli.main(["train", "--data", str(data), "--config", str(cfg), "--out", str(out),
                     "--steps", "4", "--resume"]) == 0
    rows = (out / "metrics.csv").read_text().strip().splitlines()
    assert rows[-1].startswith("4,")


def test_supervised_row_then_init(workspace, tmp_path):
    root, data, _ = workspace
    cfg = root / "tiny.json"
    base = tmp_path / "l0"
    assert cli.main(["train", "--data", str(data), "--config", str(cfg), "--out", str(base),
                     "--losses", "L0", "--steps", "2"]) == 0
    resolved = json.loads((base / "config.json").read_text())
    assert resolved["loss"]["use_cross"] and not resolved["loss"]["use_cycle"]
    assert resolved["loss"]["velocity_weight"] == 0.05
    assert "l_cross" in (base / "metrics.csv").read_text().splitlines()[0]
    more = tmp_path / "l3"
    assert cli.main(["train", "--data", str(data), "--config", str(cfg), "--out", str(more),
                     "--losses", "L3", "--steps", "1", "--init", str(base / "checkpoint.viac")]) == 0
    from via.trainer import load_model
    a, b = load_model(base / "checkpoint.viac"), load_model(more / "checkpoint.viac")
    np.testing.assert_array_equal(a.buffers["norm.mean"], b.buffers["norm.mean"])


def test_init_with_other_architecture(workspace, tmp_path):
    _, data, ckpt_path = workspace
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path), "--steps", "1",
                     "--init", str(ckpt_path)]) == 2


def test_identity_retarget(workspace, tmp_path):
    root, data, ckpt_path = workspace
    seq = data / "seq_00000.vias"
    out = tmp_path / "same.vias"
    assert cli.main(["retarget", "--checkpoint", str(ckpt_path), "--driving", str(seq),
                     "--source", str(seq), "--out", str(out)]) == 0
    from via.trainer import load_model
    model = load_model(ckpt_path)
    x = sk.root_center(sk.read_sequence(seq).frames)
    recon = model.reconstruct(x[None])[0]
    got = sk.read_sequence(out).frames
    np.testing.assert_allclose(got, recon, atol=1e-5)
    assert (tmp_path / "same.vias.config.json").exists()


def test_zero_magnitudes_give_canonical_view(workspace, tmp_path):
    _, data, ckpt_path = workspace
    seq = data / "seq_00001.vias"
    out = tmp_path / "canon.vias"
    assert cli.main(["retarget", "--checkpoint", str(ckpt_path), "--driving", str(seq),
                     "--magnitudes", "0,0,0,0", "--out", str(out)]) == 0
    from via.trainer import load_model
    from via import autodiff as ad
    model = load_model(ckpt_path)
    x = sk.root_center(sk.read_sequence(seq).frames)
    d = model.decomposition(x[None])
    want = model.denormalize(model.decode(d.motion))[0]
    np.testing.assert_allclose(sk.read_sequence(out).frames, want, atol=1e-5)


def test_magnitude_count_checked(workspace, tmp_path):
    _, data, ckpt_path = workspace
    assert cli.main(["retarget", "--checkpoint", str(ckpt_path), "--driving", str(data / "seq_00000.vias"),
                     "--magnitudes", "1,2", "--out", str(tmp_path / "x.vias")]) == 2


def test_eval_reports(workspace, tmp_path, capsys):
    _, data, ckpt_path = workspace
    for report in ("retarget", "cv-probe", "invariance"):
        out = tmp_path / f"{report}.csv"
        assert cli.main(["eval", "--checkpoint", str(ckpt_path), "--data", str(data),
                         "--report", report, "--out", str(out)]) == 0
        assert out.exists()
    text = capsys.readouterr().out
    assert "copy-source baseline" in text and "gap" in text


def test_probe_and_export(workspace, tmp_path):
    _, data, ckpt_path = workspace
    rep = tmp_path / "probe.json"
    assert cli.main(["probe", "--checkpoint", str(ckpt_path), "--data", str(data), "--split", "cs",
                     "--steps", "20", "--out", str(rep)]) == 0
    assert 0.0 <= json.loads(rep.read_text())["accuracy"] <= 1.0
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert cli.main(["export-embeddings", "--checkpoint", str(ckpt_path), "--data", str(data),
                         "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().strip().splitlines()) == 13


def test_missing_checkpoint(workspace, tmp_path):
    _, data, _ = workspace
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.viac"), "--data", str(data),
                     "--report", "retarget"]) == 1


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "via", "train", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "--config" in out.stdout
