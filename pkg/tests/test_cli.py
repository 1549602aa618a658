import json

import numpy as np
import pytest

from igolab import cli
from igolab.exceptions import ConfigError, VersionMismatch
from igolab.io import read_csv
from igolab.score import LOG_COLUMNS

SMALL_TRAIN = {
    "process": {"name": "vp", "dim": 2},
    "data": {"n": 200},
    "model": {"hidden": 8, "depth": 2, "time_embed_dim": 4},
    "igo": {"steps": 20, "batch_size": 16, "log_interval": 10},
}


def write_cfg(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def run_main(*argv):
    return cli.main([str(a) for a in argv])


def test_simulate_writes_trajectory(tmp_path):
    cfg = write_cfg(tmp_path, {"simulate": {"dt": 0.01}})
    assert run_main("simulate", "--config", cfg, "--out", tmp_path / "a") == 0
    comments, header, data = read_csv(tmp_path / "a" / "trajectory.csv")
    assert header == ["t", "x0"]
    assert data.shape == (101, 2)
    resolved = json.loads((tmp_path / "a" / "resolved_config.json").read_text())
    assert resolved["igo"]["alpha"] == 0.5 and "fingerprint" in resolved["_meta"]


def test_runs_are_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, {"simulate": {"dt": 0.01, "n_paths": 5}})
    for d in ("a", "b"):
        assert run_main("simulate", "--config", cfg, "--seed", 3, "--out", tmp_path / d) == 0
    for name in ("trajectory.csv", "captures.csv", "ensemble_final.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    run_main("simulate", "--config", cfg, "--seed", 4, "--out", tmp_path / "c")
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() != (tmp_path / "c" / "trajectory.csv").read_bytes()


def test_csv_format(tmp_path):
    cfg = write_cfg(tmp_path, {"simulate": {"dt": 0.25}})
    run_main("simulate", "--config", cfg, "--out", tmp_path)
    raw = (tmp_path / "trajectory.csv").read_bytes()
    assert b"\r" not in raw
    last = raw.decode().strip().splitlines()[-1].split(",")
    assert last[0] == "1"
    assert float(last[1]) == float(repr(float(last[1])))


def test_unknown_key_is_rejected(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"igo": {"alpah": 0.3}})
    with pytest.raises(ConfigError, match="igo.alpah"):
        cli.run(str(cfg), "train")
    assert run_main("train", "--config", cfg, "--out", tmp_path) == 2
    err = capsys.readouterr().err.strip()
    assert err.count("\n") == 0 and "alpah" in err and err.startswith("error [cli]")


def test_module_errors_are_reported_with_origin(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"simulate": {"capture_times": [3.0]}})
    assert run_main("simulate", "--config", cfg, "--out", tmp_path) == 1
    assert capsys.readouterr().err.startswith("error [sde]")


def test_missing_checkpoint_is_config_error(tmp_path):
    cfg = write_cfg(tmp_path, {})
    assert run_main("metrics", "--config", cfg, "--out", tmp_path) == 2


def test_train_sample_metrics_and_replay(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_TRAIN)
    assert run_main("train", "--config", cfg, "--out", tmp_path / "t") == 0
    _, header, log = read_csv(tmp_path / "t" / "train_log.csv")
    assert header == list(LOG_COLUMNS)
    assert list(log[:, 0]) == [10, 20]
    assert run_main("replay", "--config", tmp_path / "t" / "resolved_config.json",
                    "--out", tmp_path / "r") == 0
    for name in ("train_log.csv", "model.ckpt"):
        assert (tmp_path / "t" / name).read_bytes() == (tmp_path / "r" / name).read_bytes()

    ckpt = str(tmp_path / "t" / "model.ckpt")
    scfg = write_cfg(tmp_path, {"process": {"name": "vp", "dim": 2}, "checkpoint": ckpt,
                                "sampler": {"n_samples": 10, "n_steps": 20}}, "s.json")
    assert run_main("sample", "--config", scfg, "--out", tmp_path / "s") == 0
    comments, header, samples = read_csv(tmp_path / "s" / "samples.csv")
    assert header == ["x0", "x1"] and samples.shape == (10, 2)
    assert {"pathway", "t_start", "seed"} <= set(comments)

    icfg = write_cfg(tmp_path, {**SMALL_TRAIN, "checkpoint": ckpt,
                                "sampler": {"n_samples": 6, "n_steps": 10, "pathway": "intermediate",
                                            "method": "ode", "rtol": 1e-3, "atol": 1e-3}}, "i.json")
    assert run_main("sample", "--config", icfg, "--out", tmp_path / "i") == 0
    comments, _, samples = read_csv(tmp_path / "i" / "samples.csv")
    assert comments["pathway"] == "intermediate" and samples.shape == (6, 2)
    assert comments["t_start"] == "0.5"

    mcfg = write_cfg(tmp_path, {"checkpoint": ckpt}, "m.json")
    assert run_main("metrics", "--config", mcfg, "--out", tmp_path / "m") == 0
    _, header, row = read_csv(tmp_path / "m" / "metrics.csv")
    assert header[:4] == ["cos_E", "cos_D", "eucl_E", "eucl_D"] and np.isfinite(row).all()


def test_gpca_replay_identical(tmp_path):
    cfg = write_cfg(tmp_path, {"downstream": {"generator": {"n": 8, "k": 2}, "pca_samples": 500}})
    assert run_main("gpca", "--config", cfg, "--out", tmp_path / "a") == 0
    comments, _, v = read_csv(tmp_path / "a" / "vhat.csv")
    assert float(comments["abs_cosine"]) > 0.9
    assert run_main("replay", "--config", tmp_path / "a" / "resolved_config.json",
                    "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "vhat.csv").read_bytes() == (tmp_path / "b" / "vhat.csv").read_bytes()


def test_replay_rejects_edited_config(tmp_path):
    cfg = write_cfg(tmp_path, {"simulate": {"dt": 0.1}})
    run_main("simulate", "--config", cfg, "--out", tmp_path / "a")
    resolved = tmp_path / "a" / "resolved_config.json"
    doc = json.loads(resolved.read_text())
    doc["simulate"]["dt"] = 0.2
    edited = write_cfg(tmp_path, doc, "edited.json")
    with pytest.raises(ConfigError):
        cli.replay(edited)
    doc = json.loads(resolved.read_text())
    doc["_meta"]["fingerprint"] = "0.0.0+deadbeef"
    with pytest.raises(VersionMismatch):
        cli.replay(write_cfg(tmp_path, doc, "old.json"))
    assert run_main("replay", "--config", tmp_path / "old.json") == 2


@pytest.mark.parametrize("command,files", [
    ("csgm", ["csgm.csv"]),
    ("sweep", ["sweep.csv"]),
    ("probe", ["probe.csv", "lipschitz.csv"]),
])
def test_downstream_commands(tmp_path, command, files):
    cfg = write_cfg(tmp_path, {"downstream": {"m_list": [4, 32], "trials": 2, "n_samples": 300,
                                              "n_test": 20, "n_pairs": 200}})
    assert run_main(command, "--config", cfg, "--out", tmp_path) == 0
    for name in files:
        text = (tmp_path / name).read_text()
        assert "# seed=" in text
        assert len([ln for ln in text.splitlines() if not ln.startswith("#")]) > 1
    if command == "probe":
        lines = (tmp_path / "lipschitz.csv").read_text().splitlines()
        assert "generator,L_lower,n_pairs" in lines and lines[-1].startswith("inter,")


def test_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert run_main("simulate", "--config", path) == 2
