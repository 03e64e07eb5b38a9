import csv
import json

import numpy as np
import pytest

from autobx import io as aio
from autobx.cli import main
from autobx.config import DEFAULT_CONFIG


@pytest.fixture(scope="session")
def small_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.toml"
    text = DEFAULT_CONFIG.read_text()
    p.write_text(text.replace("repetitions = 10", "repetitions = 1").replace("save_frames = false", "save_frames = true"))
    return p


@pytest.fixture(scope="session")
def run_dir(small_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--config", str(small_config), "--seed", "0", "--mode", "impedance", "--out", str(out)]) == 0
    return out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_outputs(run_dir):
    rows = read_rows(run_dir / "report.csv")
    assert len(rows) == 3 and {r["mode"] for r in rows} == {"impedance"}
    doc = json.loads((run_dir / "report.json").read_text())
    assert set(doc["aggregates"]) == {"impedance"}
    rep = run_dir / "rep_00"
    for name in ("atlas_skin.xyz", "subject_cloud.xyz", "roi.xyz", "keypoints.txt", "registration.txt",
                 "rms_history.csv", "trajectory.csv"):
        assert (rep / name).exists(), name
    assert any((rep / "impedance" / "frames").iterdir())


def test_register_stage_reproduces_run(run_dir, small_config, tmp_path):
    rep = run_dir / "rep_00"
    args = ["register", str(rep / "atlas_skin.xyz"), str(rep / "subject_cloud.xyz"), str(rep / "keypoints.txt"),
            "--config", str(small_config), "--out", str(tmp_path)]
    assert main(args) == 0
    a = aio.read_transform(tmp_path / "transform.txt")
    b = aio.read_transform(rep / "registration.txt")
    assert np.allclose(a.matrix, b.matrix, atol=1e-6)
    assert (tmp_path / "rms_history.csv").exists()


def test_stage_chain(run_dir, small_config, tmp_path):
    rep = run_dir / "rep_00"
    cfg = ["--config", str(small_config)]
    traj = tmp_path / "traj.csv"
    assert main(["plan", str(rep / "roi.xyz"), str(rep / "subject_cloud.xyz"), *cfg, "--out", str(traj)]) == 0
    assert len(read_rows(traj)) == len(read_rows(rep / "trajectory.csv"))
    executed = tmp_path / "executed.csv"
    assert main(["execute", str(traj), "--mode", "impedance", *cfg, "--out", str(executed)]) == 0
    ex = read_rows(executed)
    assert ex and all(r["contact"] == "1" for r in ex)
    frames = tmp_path / "frames"
    assert main(["render", str(executed), *cfg, "--out", str(frames)]) == 0
    det = tmp_path / "det"
    assert main(["detect", str(frames), *cfg, "--out", str(det)]) == 0
    clusters = read_rows(det / "clusters.csv")
    assert len(clusters) >= 1
    tgt = tmp_path / "tgt"
    assert main(["target", str(det / "clusters.csv"), *cfg, "--out", str(tgt)]) == 0
    plans = json.loads((tgt / "needle_plans.json").read_text())
    assert len(plans) == len(clusters)
    c = clusters[0]
    assert main(["assess", str(tgt / "insertion_samples.csv"), "--label", c["label"],
                 "--target", c["x"], c["y"], c["z"], *cfg]) == 0


def test_error_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[nonsense]\nx = 1\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "configuration error" in capsys.readouterr().err
    assert main(["detect", str(tmp_path / "nope"), "--out", str(tmp_path / "d")]) == 1
    with pytest.raises(SystemExit):
        main(["run", "--mode", "sideways", "--out", "x"])
