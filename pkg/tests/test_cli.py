"""Tests for the command-line front end: config handling, artifacts,
exit codes, determinism."""
import json
import os

import numpy as np
import pytest

from advmesh.cli import ConfigError, load_config, main, resolve
from advmesh.dataio import read_ply, read_split, load_scene


def write_config(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh)
    return str(path)


class TestConfig:
    def test_load_and_merge(self, tmp_path):
        p = write_config(tmp_path / "c.json",
                         {"attack": {"iterations": 3}, "run": {"seed": 5}})
        cfg = load_config(p)
        resolved = resolve(cfg, {"attack.iterations": 7, "attack.mode": None})
        assert resolved["attack"]["iterations"] == 7  # flag wins
        assert resolved["run"]["seed"] == 5

    def test_unknown_section_rejected(self, tmp_path):
        p = write_config(tmp_path / "c.json", {"attacks": {}})
        with pytest.raises(ConfigError):
            load_config(p)

    def test_unknown_key_rejected(self, tmp_path):
        p = write_config(tmp_path / "c.json", {"attack": {"iterationz": 3}})
        with pytest.raises(ConfigError):
            load_config(p)

    def test_bad_config_exit_code(self, tmp_path):
        p = write_config(tmp_path / "c.json", {"bogus": {}})
        rc = main(["--config", p, "gen-scenes", "--count", "1",
                   "--out", str(tmp_path / "o")])
        assert rc == 2


class TestExitCodes:
    def test_unknown_subcommand_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_missing_scene_dir_runtime_error(self, tmp_path):
        rc = main(["eval", "--scenes", str(tmp_path / "nope"),
                   "--weights", str(tmp_path / "nope.npz"),
                   "--out", str(tmp_path / "o")])
        assert rc == 1


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scenes")
    rc = main(["gen-scenes", "--count", "4", "--seed", "3",
               "--out", str(out)])
    assert rc == 0
    return str(out)


@pytest.fixture(scope="module")
def weights_path(tmp_path_factory, scene_dir):
    out = tmp_path_factory.mktemp("weights")
    rc = main(["train-surrogate", "--kind", "cascaded",
               "--scenes", scene_dir, "--steps-scale", "0.05",
               "--seed", "2", "--out", str(out)])
    assert rc == 0
    return os.path.join(str(out), "cascaded.npz")


class TestGenScenes:
    def test_artifacts(self, scene_dir):
        ids = read_split(os.path.join(scene_dir, "split.txt"))
        assert len(ids) == 4
        scene = load_scene(scene_dir, ids[0])
        assert scene.cloud.shape[1] == 4
        assert os.path.exists(os.path.join(scene_dir, "resolved_config.json"))

    def test_deterministic(self, scene_dir, tmp_path):
        rc = main(["gen-scenes", "--count", "4", "--seed", "3",
                   "--out", str(tmp_path)])
        assert rc == 0
        ids = read_split(os.path.join(scene_dir, "split.txt"))
        for sid in ids:
            a = open(os.path.join(scene_dir, "velodyne", sid + ".bin"), "rb").read()
            b = open(os.path.join(str(tmp_path), "velodyne", sid + ".bin"), "rb").read()
            assert a == b


class TestAttackEval:
    def test_attack_writes_artifacts(self, scene_dir, weights_path, tmp_path):
        out = tmp_path / "run"
        rc = main(["attack", "--victim", "cascaded", "--mode", "lidar_only",
                   "--scenes", scene_dir, "--weights", weights_path,
                   "--iterations", "2", "--batch-size", "2", "--seed", "0",
                   "--out", str(out)])
        assert rc == 0
        mesh = read_ply(out / "adv_mesh.ply")
        assert mesh.n_vertices == 162
        rows = open(out / "history.csv").read().strip().splitlines()
        assert rows[0] == "iteration,stage,loss,base,lap"
        assert len(rows) == 3
        assert (out / "report.json").exists()
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["attack"]["iterations"] == 2

    def test_eval_byte_identical_reports(self, scene_dir, weights_path, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            rc = main(["eval", "--scenes", scene_dir,
                       "--weights", weights_path, "--seed", "1",
                       "--out", str(out)])
            assert rc == 0
            outs.append((out / "report.json").read_bytes())
        assert outs[0] == outs[1]

    def test_eval_threads_match_serial(self, scene_dir, weights_path, tmp_path):
        outs = []
        for name, threads in (("s", "1"), ("p", "4")):
            out = tmp_path / name
            rc = main(["--threads", threads, "eval", "--scenes", scene_dir,
                       "--weights", weights_path, "--seed", "1",
                       "--out", str(out)])
            assert rc == 0
            outs.append((out / "report.json").read_bytes())
        assert outs[0] == outs[1]


class TestRenderReport:
    def test_render_artifacts_and_mask_locality(self, scene_dir, tmp_path):
        out = tmp_path / "render"
        rc = main(["render", "--scenes", scene_dir, "--limit", "1",
                   "--seed", "0", "--out", str(out)])
        assert rc == 0
        ids = read_split(os.path.join(scene_dir, "split.txt"))
        sid = ids[0]
        from PIL import Image
        before = np.asarray(Image.open(out / f"{sid}_before.png"))
        after = np.asarray(Image.open(out / f"{sid}_after.png"))
        assert before.shape == after.shape
        prov = np.loadtxt(out / f"{sid}_provenance.txt", dtype=int)
        cloud = np.fromfile(out / f"{sid}_after.bin", dtype=np.float32)
        assert len(prov) == len(cloud) // 4
        # scene rows come first and are unchanged; appended rows are flagged
        scene = load_scene(scene_dir, sid)
        assert np.all(prov[:len(scene.cloud)] == 0)
        if len(prov) > len(scene.cloud):
            assert np.all(prov[len(scene.cloud):] == 1)

    def test_report_prints_summary(self, scene_dir, weights_path, tmp_path, capsys):
        out = tmp_path / "e"
        assert main(["eval", "--scenes", scene_dir, "--weights", weights_path,
                     "--seed", "1", "--out", str(out)]) == 0
        capsys.readouterr()
        assert main(["report", "--report", str(out / "report.json")]) == 0
        text = capsys.readouterr().out
        assert "AP (BEV):" in text and "ASR:" in text
