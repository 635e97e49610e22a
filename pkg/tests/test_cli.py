import hashlib
import subprocess
import sys

import numpy as np
import pytest

from soilbench import cli
from soilbench.config import apply_overrides, load_config, parse_config
from soilbench.dataset import Split, load_manifest
from soilbench.errors import ConfigError
from soilbench.evaluation import read_report

CONFIG = """\
[data]
dir = data

[synth]
seed = 3
width = 32
height = 32
n_frames = 24
clean = 8
transparent = 4
opaque = 8
both = 4

[split]
seed = 0

[geometry]
tile_size = 8

[model]
heads = tile,image
stem_channels = 4
widths = 4,6
strides = 2,2
soiling_hidden = 4

[train]
steps = 3
batch_size = 4
seed = 1

[gan]
epochs = 2
crop_size = 8
crops = 8
fraction = 0.5

[eval]
train_cameras = front,rear
test_cameras = all
"""


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "run.ini").write_text(CONFIG)
    return tmp_path


@pytest.fixture
def prepared(workdir, capsys):
    ini = workdir / "run.ini"
    assert run(capsys, "synth", "--config", ini)[0] == 0
    assert run(capsys, "split", "--config", ini)[0] == 0
    return workdir, ini


# -- config ------------------------------------------------------------------------

def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="tau_x"):
        parse_config("[geometry]\ntau_x = 0.3\n")


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="optimizer"):
        parse_config("[optimizer]\nlr = 1\n")


def test_bad_value_rejected():
    with pytest.raises(ConfigError, match="steps"):
        parse_config("[train]\nsteps = many\n")


def test_paths_resolve_against_config_dir(workdir):
    cfg = load_config(workdir / "run.ini")
    assert cfg.data_dir() == workdir / "data"


def test_overrides_change_digest(workdir):
    cfg = load_config(workdir / "run.ini")
    before = cfg.digest()
    apply_overrides(cfg, ["geometry.tau=0.5"])
    assert cfg.regime().tau == 0.5 and cfg.digest() != before
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["tau=0.5"])


def test_tile_grid_must_match_encoder(workdir):
    cfg = load_config(workdir / "run.ini")
    apply_overrides(cfg, ["geometry.tile_size=16"])
    with pytest.raises(ConfigError, match="tile_size"):
        cfg.model()


def test_weights_must_match_heads(workdir):
    cfg = load_config(workdir / "run.ini")
    apply_overrides(cfg, ["train.weights=1,0,0"])
    with pytest.raises(ConfigError, match="weights"):
        cfg.train(("tile", "image"))


# -- commands ------------------------------------------------------------------------

def test_synth_is_reproducible(workdir, capsys):
    ini = workdir / "run.ini"
    run(capsys, "synth", "--config", ini, "--out", workdir / "a")
    run(capsys, "synth", "--config", ini, "--out", workdir / "b")
    assert tree_digest(workdir / "a") == tree_digest(workdir / "b")
    info = (workdir / "a" / "run_info").read_text()
    assert "config_digest:" in info and "seed: 3" in info and "tool: soilbench" in info


def test_seed_flag_overrides(workdir, capsys):
    ini = workdir / "run.ini"
    run(capsys, "synth", "--config", ini, "--out", workdir / "a")
    run(capsys, "synth", "--config", ini, "--out", workdir / "b", "--seed", "4")
    assert tree_digest(workdir / "a") != tree_digest(workdir / "b")
    assert "seed: 4" in (workdir / "b" / "run_info").read_text()


def test_split_writes_assignment(prepared):
    workdir, _ = prepared
    m = load_manifest(workdir / "data" / "manifest.jsonl")
    assert m.split_seed == 0
    assert len(m.split_assignment) == 24
    assert len(m.select(Split.TRAIN)) > 0


def test_rasterize_cache_is_used(prepared, capsys):
    workdir, ini = prepared
    assert run(capsys, "rasterize", "--config", ini)[0] == 0
    with np.load(workdir / "data" / "tile_labels.npz") as z:
        assert len([k for k in z.files if k != "__meta__"]) == 24
        assert z["f00000"].shape == (2, 4, 4)


def test_train_eval_report_chain(prepared, capsys):
    workdir, ini = prepared
    code, out, _ = run(capsys, "train", "--config", ini, "--out", workdir / "train")
    assert code == 0 and "trained 3 steps" in out
    for name in ("model.ckpt", "model.json", "train_log.csv", "run_info"):
        assert (workdir / "train" / name).exists()
    assert not (workdir / "train" / ".soilbench.lock").exists()
    code, out, _ = run(capsys, "eval", "--config", ini, "--checkpoint",
                       workdir / "train" / "model.ckpt", "--out", workdir / "report")
    assert code == 0 and "normalized confusion" in out
    rep = read_report(workdir / "report")
    code, out2, _ = run(capsys, "report", workdir / "report")
    assert code == 0 and out2 == out
    assert rep.info["test_cameras"] == "front,rear,left,right"


def test_eval_regime_is_deterministic(prepared, capsys):
    workdir, ini = prepared
    assert run(capsys, "eval", "--config", ini, "--out", workdir / "r1")[0] == 0
    assert run(capsys, "eval", "--config", ini, "--out", workdir / "r2")[0] == 0
    assert tree_digest(workdir / "r1") == tree_digest(workdir / "r2")
    assert read_report(workdir / "r1").info["train_cameras"] == "front,rear"


def test_single_task_weights(prepared, capsys):
    workdir, ini = prepared
    code, _, _ = run(capsys, "train", "--config", ini, "--out", workdir / "t",
                     "--set", "model.heads=tile,seg,det", "--set", "train.weights=1,0,0")
    assert code == 0
    log = (workdir / "t" / "train_log.csv").read_text().splitlines()
    assert log[0] == "step,loss,tile,seg,det"
    step, loss, tile = (float(v) for v in log[1].split(",")[:3])
    assert loss == tile


def test_grid_search_writes_scores(prepared, capsys):
    workdir, ini = prepared
    code, out, _ = run(capsys, "train", "--config", ini, "--out", workdir / "g",
                       "--set", "train.grid=1,0.1;1,1")
    assert code == 0 and "grid search picked" in out
    rows = (workdir / "g" / "grid_search.csv").read_text().splitlines()
    assert rows[0] == "tile,image,val_score" and len(rows) == 3


def test_gan_chain(prepared, capsys):
    workdir, ini = prepared
    code, out, _ = run(capsys, "gan-train", "--config", ini, "--out", workdir / "gan",
                       "--set", "gan.crops=8", "--set", "gan.batch_size=4")
    assert code == 0
    hist = (workdir / "gan" / "loss_history.csv").read_text().splitlines()
    assert len(hist) == 3
    code, out, _ = run(capsys, "gan-augment", "--config", ini, "--checkpoint",
                       workdir / "gan" / "G_AB.ckpt")
    assert code == 0
    m = load_manifest(workdir / "data" / "manifest_gan.jsonl")
    aug = [r for r in m.records if r.augmented]
    assert aug and all(m.split_assignment[r.frame_id] == Split.TRAIN for r in aug)


def test_gradcheck_command(tmp_path, capsys):
    code, out, _ = run(capsys, "gradcheck", "--out", tmp_path)
    assert code == 0
    assert out.count("PASS") == len(cli.run_all.__globals__["CHECKS"])
    assert (tmp_path / "gradcheck.csv").exists()


# -- errors --------------------------------------------------------------------------

def test_missing_config_file(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--config", tmp_path / "nope.ini")
    assert code == 2
    assert err.startswith("soilbench: error E_CONFIG exit=2: ")
    assert err.count("\n") == 1


def test_unknown_key_exit_code(workdir, capsys):
    code, _, err = run(capsys, "synth", "--config", workdir / "run.ini", "--set", "synth.foo=1")
    assert code == 2 and "foo" in err


def test_missing_manifest_exit_code(workdir, capsys):
    code, _, err = run(capsys, "split", "--config", workdir / "run.ini")
    assert code == 3 and "E_DATA" in err


def test_bad_checkpoint_exit_code(prepared, capsys):
    workdir, ini = prepared
    bad = workdir / "bad.ckpt"
    bad.write_bytes(b"JUNKJUNK")
    code, _, err = run(capsys, "eval", "--config", ini, "--checkpoint", bad,
                       "--out", workdir / "r")
    assert code == 3 and "E_CHECKPOINT" in err


def test_locked_output_directory(prepared, capsys):
    workdir, ini = prepared
    out = workdir / "locked"
    out.mkdir()
    (out / ".soilbench.lock").write_text("1\n")
    code, _, err = run(capsys, "train", "--config", ini, "--out", out)
    assert code == 3 and "locked" in err


def test_bad_thread_env(prepared, capsys, monkeypatch):
    _, ini = prepared
    monkeypatch.setenv("SOILBENCH_THREADS", "zero")
    code, _, err = run(capsys, "split", "--config", ini)
    assert code == 2 and "SOILBENCH_THREADS" in err


def test_thread_limit_result_independent(prepared, capsys, monkeypatch):
    workdir, ini = prepared
    monkeypatch.setenv("SOILBENCH_THREADS", "1")
    run(capsys, "eval", "--config", ini, "--out", workdir / "t1")
    monkeypatch.setenv("SOILBENCH_THREADS", "2")
    run(capsys, "eval", "--config", ini, "--out", workdir / "t2")
    assert read_report(workdir / "t1") == read_report(workdir / "t2")


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "soilbench.cli", "report", tmp_path / "none"],
                          capture_output=True, text=True)
    assert proc.returncode == 3
    assert proc.stderr.startswith("soilbench: error E_DATA exit=3:")
