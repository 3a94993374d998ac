"""CLI contract suite: exit codes, manifest determinism, default thresholds,
report self-consistency, and artifact emission."""
import json

import numpy as np
import pytest
import torch

from vesselreg.cli import main
from vesselreg.detector import DetectorConfig, VesselKeypointNet
from vesselreg.matcher import GraphMatcher, MatcherConfig
from vesselreg.phantom import vessel_phantom
from vesselreg.pipeline import save_checkpoint
from vesselreg.synthdata import save_image


@pytest.fixture(scope="module")
def source_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sources")
    for i in range(10):
        save_image(d / f"img{i}.png", vessel_phantom((160, 160), seed=i, n_trees=6))
    return d


@pytest.fixture(scope="module")
def random_ckpt(tmp_path_factory):
    torch.manual_seed(0)
    det = VesselKeypointNet(DetectorConfig(descriptor_dim=16, base_channels=8,
                                           num_blocks=1))
    mat = GraphMatcher(MatcherConfig(dim=16, num_layers=2, num_heads=4,
                                     sinkhorn_iterations=50, encoder_hidden=(16,)))
    p = tmp_path_factory.mktemp("model") / "ckpt.pt"
    save_checkpoint(p, det, mat)
    return p


class TestSynth:
    def test_count_zero_empty_manifest(self, source_dir, tmp_path):
        out = tmp_path / "m.jsonl"
        assert main(["synth", "--input-dir", str(source_dir), "--out", str(out),
                     "--count", "0"]) == 0
        assert out.read_text() == ""

    def test_same_seed_identical_bytes(self, source_dir, tmp_path):
        outs = []
        for name in ("m1.jsonl", "m2.jsonl"):
            out = tmp_path / name
            assert main(["synth", "--input-dir", str(source_dir), "--out",
                         str(out), "--count", "20", "--seed", "5"]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_sources_cycled_deterministically(self, source_dir, tmp_path):
        out = tmp_path / "m.jsonl"
        assert main(["synth", "--input-dir", str(source_dir), "--out", str(out),
                     "--count", "50", "--seed", "0"]) == 0
        entries = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(entries) == 50
        names = sorted({e["source_path"] for e in entries})
        assert len(names) == 10
        for i, e in enumerate(entries):
            assert e["source_path"].endswith(f"img{i % 10}.png")
            assert e["seed"] == i

    def test_missing_input_dir(self, tmp_path):
        assert main(["synth", "--input-dir", str(tmp_path / "nope"), "--out",
                     str(tmp_path / "m.jsonl"), "--count", "1"]) == 1

    def test_materialize_writes_eval_set(self, source_dir, tmp_path):
        cfg = {"train": {"augment": {"patch_size": 96}}}
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        mat_dir = tmp_path / "pairs"
        assert main(["synth", "--input-dir", str(source_dir), "--out",
                     str(tmp_path / "m.jsonl"), "--count", "3", "--masks",
                     "--materialize", str(mat_dir), "--config", str(cfg_path)]) == 0
        manifest = json.loads((mat_dir / "eval_manifest.json").read_text())
        assert manifest["kind"] == "synthetic"
        assert len(manifest["pairs"]) == 3
        for pair in manifest["pairs"]:
            for key in ("img_a", "img_b", "gt_homography", "mask_a", "mask_b"):
                assert (mat_dir / pair[key]).exists()


class TestRegister:
    def test_missing_model_exit_1(self, source_dir, tmp_path, capsys):
        rc = main(["register", "--fixed", str(source_dir / "img0.png"),
                   "--moving", str(source_dir / "img1.png"),
                   "--model", str(tmp_path / "missing.pt"),
                   "--out", str(tmp_path / "h.json")])
        assert rc == 1
        assert "missing.pt" in capsys.readouterr().err

    def test_blank_images_exit_2_with_diagnostics(self, random_ckpt, tmp_path,
                                                  capsys):
        blank = tmp_path / "blank.png"
        save_image(blank, np.zeros((96, 96)))
        rc = main(["register", "--fixed", str(blank), "--moving", str(blank),
                   "--model", str(random_ckpt), "--out", str(tmp_path / "h.json")])
        assert rc == 2
        payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert payload["status"] == "no_homography"
        assert payload["diagnostics"]["n_matches"] == 0
        assert not (tmp_path / "h.json").exists()


@pytest.fixture(scope="module")
def eval_dir(source_dir, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("evalset")
    cfg_path = tmp / "cfg.json"
    cfg_path.write_text(json.dumps({"train": {"augment": {"patch_size": 96}}}))
    mat_dir = tmp / "pairs"
    assert main(["synth", "--input-dir", str(source_dir), "--out",
                 str(tmp / "m.jsonl"), "--count", "4", "--masks",
                 "--materialize", str(mat_dir), "--config", str(cfg_path)]) == 0
    return mat_dir


class TestEvaluate:
    def test_gt_bypass_scores_perfectly(self, eval_dir, tmp_path, capsys):
        out_dir = tmp_path / "rep"
        rc = main(["evaluate", "--manifest", str(eval_dir / "eval_manifest.json"),
                   "--out-dir", str(out_dir), "--use-gt"])
        assert rc == 0
        report = json.loads((out_dir / "report.json").read_text())
        sr = report["aggregates"]["success_rate_mhe"]
        assert set(sr) == {"1", "2", "3", "4", "5", "10"}  # default eps list
        assert all(v == 1.0 for v in sr.values())
        assert report["aggregates"]["mhe"]["mean"] == 0.0
        assert (out_dir / "report.csv").exists()
        assert (out_dir / "report.txt").exists()
        assert (out_dir / "fig_success_rate.png").exists()
        assert (out_dir / "fig_error_hist.png").exists()

    def test_byte_identical_reports(self, eval_dir, tmp_path):
        blobs = []
        for name in ("r1", "r2"):
            out_dir = tmp_path / name
            assert main(["evaluate", "--manifest",
                         str(eval_dir / "eval_manifest.json"),
                         "--out-dir", str(out_dir), "--use-gt",
                         "--no-figures"]) == 0
            blobs.append((out_dir / "report.json").read_bytes())
        assert blobs[0] == blobs[1]

    def test_malformed_manifest_exit_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{broken")
        rc = main(["evaluate", "--manifest", str(bad),
                   "--out-dir", str(tmp_path / "rep"), "--use-gt"])
        assert rc == 1

    def test_default_real_dataset_thresholds(self):
        from vesselreg.cli import build_parser
        args = build_parser().parse_args(
            ["evaluate", "--manifest", "m", "--out-dir", "o"])
        assert args.me_threshold == 7.0
        assert args.mae_threshold == 10.0
        assert args.eps == "1,2,3,4,5,10"

    def test_model_required_without_bypass(self, eval_dir, tmp_path):
        rc = main(["evaluate", "--manifest", str(eval_dir / "eval_manifest.json"),
                   "--out-dir", str(tmp_path / "r")])
        assert rc == 1


class TestUsage:
    def test_unknown_flag_exit_1(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--definitely-not-a-flag"])
        assert exc.value.code == 1

    def test_no_command_exit_1(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 1
