import json
import struct

import numpy as np
import pytest

from hbmcn.checkpoint import load_checkpoint, read_manifest, save_checkpoint
from hbmcn.cli import RunConfig, UsageError, main
from hbmcn.evaluation import FeatureSet, read_features, write_features
from hbmcn.model import ABLATION_MODES, build, nano_config
from oracles import brute_force_eval

TINY = {"model": {"input_hw": [32, 16]}, "train": {"epochs": 2, "batch_size": 8}}


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    assert main(["-q", "gen-data", "--out", str(root), "--ids", "6", "--per-id", "4", "--cams", "2", "--size", "32x16", "--seed", "2"]) == 0
    return root


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    assert main(["-q", "gen-data", "--out", str(root), "--ids", "48", "--per-id", "8", "--cams", "3", "--seed", "7", "--size", "128x64"]) == 0
    return root


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


class TestGenData:
    def test_counts(self, desk_data):
        assert len(list(desk_data.glob("*/*.ppm"))) == 384
        assert (desk_data / "manifest.json").exists()

    def test_repeat_identical(self, tmp_path, tiny_data):
        args = ["-q", "gen-data", "--out", str(tmp_path), "--ids", "6", "--per-id", "4", "--cams", "2", "--size", "32x16", "--seed", "2"]
        assert main(args) == 0
        for path in tiny_data.rglob("*"):
            if path.is_file():
                assert (tmp_path / path.relative_to(tiny_data)).read_bytes() == path.read_bytes()

    @pytest.mark.parametrize("flag,value", [("--ids", "1"), ("--per-id", "1"), ("--cams", "0"), ("--size", "128by64")])
    def test_bad_arguments(self, tmp_path, flag, value, capsys):
        assert main(["gen-data", "--out", str(tmp_path), flag, value]) == 2
        assert "usage" in capsys.readouterr().err


class TestTrain:
    def test_writes_checkpoint_and_curves(self, tmp_path, tiny_data):
        cfg = write_config(tmp_path / "run.json", TINY)
        assert main(["-q", "train", "--data", str(tiny_data), "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        model, state = load_checkpoint(tmp_path / "o" / "checkpoint.hbmc")
        assert model.cfg.input_hw == (32, 16) and model.cfg.num_classes == 4
        assert state.epoch == 2
        lines = (tmp_path / "o" / "loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,lr,mean_joint_loss" and len(lines) == 3
        assert (tmp_path / "o" / "loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_deterministic(self, tmp_path, tiny_data):
        cfg = write_config(tmp_path / "run.json", TINY)
        for out in ("a", "b"):
            assert main(["-q", "train", "--data", str(tiny_data), "--config", cfg, "--seed", "5", "--out", str(tmp_path / out)]) == 0
        for name in ("checkpoint.hbmc", "loss.csv", "loss.png"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_paper_preset_warns_and_runs(self, tmp_path, tiny_data, capsys):
        slim = {"preset": "paper", "model": {"input_hw": [64, 32], "stem_width": 4, "widths": [1, 2, 4, 8],
                                             "feature_width": 8, "se_ratio": 4},
                "train": {"epochs": 1, "batch_size": 8}}
        cfg = write_config(tmp_path / "run.json", slim)
        assert main(["-q", "train", "--data", str(tiny_data), "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        assert "warning: paper preset" in capsys.readouterr().err
        assert load_checkpoint(tmp_path / "o" / "checkpoint.hbmc")[0].cfg.num_heads == 8

    def test_missing_data(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "o")]) == 2
        assert "error" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, tiny_data):
        cfg = write_config(tmp_path / "run.json", {"epochs": 3})
        assert main(["train", "--data", str(tiny_data), "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_class_count_conflict(self, tmp_path, tiny_data):
        cfg = write_config(tmp_path / "run.json", {"model": {"num_classes": 99}})
        assert main(["train", "--data", str(tiny_data), "--config", cfg, "--out", str(tmp_path / "o")]) == 2


class TestRunConfig:
    def test_preset_expands_before_overrides(self):
        model, train = RunConfig(model={"feature_width": 16}, train={"epochs": 3}).resolve(num_classes=5)
        assert model.feature_width == 16
        assert model.widths == nano_config().widths
        assert model.num_classes == 5
        assert train.epochs == 3 and train.milestones == (10, 15)

    def test_mode_then_overrides(self):
        model, _ = RunConfig(mode="seres2", model={"head_placement": "two_level"}).resolve()
        assert model.branches == ("res", "se") and model.head_placement == "two_level"

    def test_seed_flows_to_training(self):
        assert RunConfig(seed=9).resolve()[1].seed == 9

    @pytest.mark.parametrize("text", ['{"presets": "nano"}', '{"model": {"depth": 50}}', '{"train": {"lr": 1}}', '{"preset": "huge"}', "[1]", "{"])
    def test_rejected(self, text):
        with pytest.raises(UsageError):
            RunConfig.from_json(text)


@pytest.fixture(scope="module")
def nano_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "nano.hbmc"
    save_checkpoint(build(nano_config(), seed=0).eval(), None, path)
    return path


class TestExtract:
    def test_desk_query_shape(self, tmp_path, desk_data, nano_checkpoint):
        out = tmp_path / "q.hbfv"
        assert main(["-q", "extract", "--ckpt", str(nano_checkpoint), "--data", str(desk_data), "--split", "query", "--out", str(out)]) == 0
        fs = read_features(out)
        assert fs.features.shape == (16, 192)
        assert set(fs.camera_ids.tolist()) == {1}

    def test_reextraction_identical(self, tmp_path, desk_data, nano_checkpoint):
        for name in ("a", "b"):
            args = ["-q", "extract", "--ckpt", str(nano_checkpoint), "--data", str(desk_data), "--split", "query", "--out", str(tmp_path / name)]
            assert main(args) == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_config_mismatch(self, tmp_path, desk_data, nano_checkpoint):
        raw = nano_checkpoint.read_bytes()
        manifest, start = read_manifest(raw)
        manifest["config"]["feature_width"] = 16
        body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        bad = tmp_path / "bad.hbmc"
        bad.write_bytes(struct.pack("<4sIQ", b"HBMC", 1, len(body)) + body + raw[start:])
        assert main(["extract", "--ckpt", str(bad), "--data", str(desk_data), "--out", str(tmp_path / "q")]) == 2


class TestEval:
    def test_self_retrieval(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        pids = np.repeat(np.arange(5), 2)
        fs = FeatureSet(rng.standard_normal((5, 12))[pids], pids, np.tile([1, 2], 5))
        write_features(fs, tmp_path / "f.hbfv")
        assert main(["eval", "--query", str(tmp_path / "f.hbfv"), "--gallery", str(tmp_path / "f.hbfv")]) == 0
        assert capsys.readouterr().out.splitlines()[-1] == "mAP=1.000000 R1=1.000000 R5=1.000000 R10=1.000000 R20=1.000000"

    def test_planted_instance_matches_oracle(self, tmp_path, capsys):
        rng = np.random.default_rng(4)
        centers = rng.standard_normal((4, 6))
        qp, gp = rng.integers(0, 4, 10), rng.integers(0, 4, 40)
        qc, gc = rng.integers(1, 3, 10), rng.integers(1, 4, 40)
        q = FeatureSet(centers[qp] + rng.standard_normal((10, 6)), qp, qc)
        g = FeatureSet(centers[gp] + rng.standard_normal((40, 6)), gp, gc)
        write_features(q, tmp_path / "q")
        write_features(g, tmp_path / "g")
        assert main(["eval", "--query", str(tmp_path / "q"), "--gallery", str(tmp_path / "g"), "--report", str(tmp_path / "r")]) == 0
        last = capsys.readouterr().out.splitlines()[-1]
        # the oracle reads back the stored float32 values
        q2, g2 = read_features(tmp_path / "q"), read_features(tmp_path / "g")
        aps, firsts, _, _ = brute_force_eval(q2.features, qp.tolist(), qc.tolist(), g2.features, gp.tolist(), gc.tolist())
        ranks = [sum(f <= k for f in firsts) / len(firsts) for k in (1, 5, 10, 20)]
        want = "mAP={:.6f} R1={:.6f} R5={:.6f} R10={:.6f} R20={:.6f}".format(float(sum(aps) / len(aps)), *ranks)
        assert last == want
        assert (tmp_path / "r" / "metrics.csv").exists()
        assert (tmp_path / "r" / "cmc_curve.png").read_bytes()[:4] == b"\x89PNG"

    def test_dimension_mismatch(self, tmp_path):
        write_features(FeatureSet(np.ones((2, 3)), [1, 2], [1, 1]), tmp_path / "q")
        write_features(FeatureSet(np.ones((2, 4)), [1, 2], [2, 2]), tmp_path / "g")
        assert main(["eval", "--query", str(tmp_path / "q"), "--gallery", str(tmp_path / "g")]) == 2

    def test_missing_file(self, tmp_path):
        assert main(["eval", "--query", str(tmp_path / "q"), "--gallery", str(tmp_path / "g")]) == 2


class TestAblate:
    def test_full_row(self, tmp_path, tiny_data):
        cfg = write_config(tmp_path / "run.json", TINY)
        out = tmp_path / "abl.csv"
        for mode in ("full", "baseline"):
            assert main(["-q", "ablate", "--data", str(tiny_data), "--config", cfg, "--mode", mode, "--seed", "1", "--out", str(out)]) == 0
        rows = out.read_text().splitlines()
        assert rows[0] == "mode,seed,mAP,R1"
        assert [r.split(",")[:2] for r in rows[1:]] == [["full", "1"], ["baseline", "1"]]
        assert all(0.0 <= float(r.split(",")[2]) <= 1.0 for r in rows[1:])

    def test_mode_list(self):
        assert list(ABLATION_MODES) == ["baseline", "res2", "seres2", "baseline2l", "full"]

    def test_unknown_mode(self, tmp_path, tiny_data):
        assert main(["ablate", "--data", str(tiny_data), "--mode", "triple", "--out", str(tmp_path / "a.csv")]) == 2


class TestGradcheck:
    def test_default_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "conv2d" in out and "model" in out

    def test_injected_fault_fails(self):
        assert main(["gradcheck", "--inject-fault", "conv2d"]) == 1

    def test_tiny_tolerance_fails(self):
        assert main(["gradcheck", "--tol", "1e-12"]) == 1


def test_eval_level_width(tmp_path, capsys):
    q = FeatureSet(np.array([[1.0, 0.0, 10.0, 0.0]]), [1], [1])
    g = FeatureSet(np.array([[1.0, 0.0, 0.0, 10.0], [0.0, 1.0, 10.0, 0.0]]), [1, 2], [2, 2])
    write_features(q, tmp_path / "q")
    write_features(g, tmp_path / "g")
    assert main(["eval", "--query", str(tmp_path / "q"), "--gallery", str(tmp_path / "g")]) == 0
    assert capsys.readouterr().out.splitlines()[-1].startswith("mAP=0.500000 R1=0.000000")
    assert main(["eval", "--query", str(tmp_path / "q"), "--gallery", str(tmp_path / "g"), "--level-width", "2"]) == 0
    assert capsys.readouterr().out.splitlines()[-1].startswith("mAP=1.000000 R1=1.000000")
    assert main(["eval", "--query", str(tmp_path / "q"), "--gallery", str(tmp_path / "g"), "--level-width", "3"]) == 2
