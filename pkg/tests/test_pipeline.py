"""Pipeline suite: checkpoint round trips, schedule, gradient reach, training
smoke runs, deterministic replays, and registration failure paths."""
import json
import math

import numpy as np
import pytest
import torch

from vesselreg.detector import DetectorConfig, LossConfigKD, VesselKeypointNet
from vesselreg.geometry import Homography, HomographySampleConfig, warp_points
from vesselreg.matcher import GraphMatcher, MatcherConfig
from vesselreg.phantom import vessel_phantom
from vesselreg.pipeline import (
    NoHomographyError,
    PipelineError,
    PretrainConfig,
    TrainConfig,
    config_from_dict,
    junction_target,
    load_checkpoint,
    make_pair,
    pretrain_detector,
    register,
    save_checkpoint,
    torch_warp_points,
    train,
)
from vesselreg.synthdata import (
    AugmentConfig,
    GeometricConfig,
    PhotometricConfig,
    save_image,
)

torch.manual_seed(0)


def tiny_models(seed=0, dim=32):
    torch.manual_seed(seed)
    det = VesselKeypointNet(DetectorConfig(descriptor_dim=dim, base_channels=8,
                                           num_blocks=1))
    mat = GraphMatcher(MatcherConfig(dim=dim, num_layers=2, num_heads=4,
                                     sinkhorn_iterations=50, encoder_hidden=(16,)))
    return det, mat


def toy_train_config(epochs=2, batch_size=4, **kw):
    defaults = dict(
        epochs_flat=epochs, epochs_decay=0, lr_matcher=1e-3,
        lr_detector_heads=1e-3, batch_size=batch_size, n_max=48,
        early_stop_patience=1000, val_fraction=0.1,
        homography=HomographySampleConfig(0.04, 6, (0.97, 1.03), 0.02),
        augment=AugmentConfig(
            patch_size=96,
            photometric=PhotometricConfig(0.1, (0, 0.5), 0.2, (0, 0.01), 2),
            geometric_joint=GeometricConfig(0.5, 0.5, 4, 0.5, 8.0)))
    defaults.update(kw)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def toy_manifest(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sources")
    entries = []
    for i in range(10):
        img = vessel_phantom((160, 160), seed=500 + i, n_trees=6)
        p = tmp / f"s{i}.png"
        save_image(p, img)
        for k in range(3):
            entries.append({"source_path": str(p), "seed": i * 3 + k,
                            "mode": "invert"})
    return entries


@pytest.fixture(scope="module")
def thirty_image_manifest(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sources30")
    entries = []
    for i in range(30):
        img = vessel_phantom((160, 160), seed=500 + i, n_trees=6)
        p = tmp / f"s{i}.png"
        save_image(p, img)
        for k in range(4):
            entries.append({"source_path": str(p), "seed": i * 4 + k,
                            "mode": "invert"})
    return entries


class TestTorchWarp:
    def test_matches_numpy_warp(self):
        rng = np.random.default_rng(0)
        h = Homography(np.eye(3) + 0.05 * rng.uniform(-1, 1, (3, 3)))
        pts = rng.uniform(0, 100, size=(20, 2))
        got = torch_warp_points(torch.from_numpy(pts), h).numpy()
        np.testing.assert_allclose(got, warp_points(pts, h), atol=1e-9)

    def test_differentiable(self):
        h = Homography.translation(2.0, -1.0)
        pts = torch.tensor([[1.0, 2.0]], requires_grad=True)
        torch_warp_points(pts, h).sum().backward()
        assert torch.isfinite(pts.grad).all()


class TestSchedule:
    def test_lr_factor_invariant(self):
        cfg = toy_train_config(epochs=1)
        base = TrainConfig(epochs_flat=100, epochs_decay=400)
        assert base.lr_factor(1) == 1.0
        assert base.lr_factor(100) == 1.0
        assert base.lr_factor(200) == pytest.approx(300 / 400)
        assert base.lr_factor(500) == 0.0
        del cfg


class TestCheckpoint:
    def test_round_trip_bit_identical_registration(self, tmp_path):
        det, mat = tiny_models(seed=3)
        p = tmp_path / "ckpt.pt"
        save_checkpoint(p, det, mat, extra={"note": 1})
        det2, mat2, extra = load_checkpoint(p)
        assert extra == {"note": 1}
        img_a = vessel_phantom((96, 96), seed=10, n_trees=6)
        img_b = vessel_phantom((96, 96), seed=10, n_trees=6)

        def run(d, m):
            try:
                return register(d, m, img_a, img_b, n_max=32,
                                score_threshold=0.0).h.matrix
            except NoHomographyError:
                return None

        h1 = run(det, mat)
        h2 = run(det2, mat2)
        if h1 is None:
            assert h2 is None
        else:
            assert np.array_equal(h1, h2)

    def test_bad_version_rejected(self, tmp_path):
        p = tmp_path / "bad.pt"
        torch.save({"format_version": 99}, p)
        with pytest.raises(PipelineError):
            load_checkpoint(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.pt")


class TestTraining:
    def test_loss_decreases_on_toy_manifest(self, thirty_image_manifest, tmp_path):
        det, mat = tiny_models(seed=1)
        cfg = toy_train_config(epochs=5, batch_size=1, lr_matcher=2e-3,
                               lr_detector_heads=1e-4, lr_describe_head=2e-3,
                               resample_each_epoch=False)
        hist = train(det, mat, thirty_image_manifest, cfg, tmp_path / "run",
                     max_epochs=5)
        assert len(hist["train_loss"]) == 5
        assert hist["train_loss"][-1] < 0.8 * hist["train_loss"][0]

    def test_determinism_same_seed(self, toy_manifest, tmp_path):
        curves = []
        for run in range(2):
            det, mat = tiny_models(seed=2)
            cfg = toy_train_config(epochs=2, batch_size=4, seed=7)
            hist = train(det, mat, toy_manifest, cfg, tmp_path / f"run{run}",
                         max_epochs=2)
            curves.append(hist["train_loss"])
        assert curves[0] == curves[1]

    def test_log_loss_decomposition_and_lr_schedule(self, toy_manifest, tmp_path):
        det, mat = tiny_models(seed=4)
        cfg = toy_train_config(epochs=2, batch_size=4, w_kd=1.0, w_sg=1.0)
        hist = train(det, mat, toy_manifest, cfg, tmp_path / "runlog", max_epochs=2)
        rows = [json.loads(line) for line in open(hist["log"])]
        steps = [r for r in rows if "total" in r]
        assert steps
        for r in steps:
            assert abs(r["total"] - (cfg.w_kd * r["l_kd"] + cfg.w_sg * r["l_sg"])) < 1e-6
            factor = cfg.lr_factor(r["epoch"])
            assert r["lr_groups"][0] == pytest.approx(cfg.lr_matcher * factor)
            assert r["lr_groups"][1] == pytest.approx(cfg.lr_detector_heads * factor)
        vals = [r for r in rows if "val_loss" in r and "total" not in r]
        assert len(vals) == 2

    def test_gradient_reach_and_frozen_backbone(self, toy_manifest, tmp_path):
        det, mat = tiny_models(seed=5)
        backbone_before = [p.detach().clone() for p in det.backbone_parameters()]
        heads_before = [p.detach().clone() for p in det.head_parameters()]
        cfg = toy_train_config(epochs=1, batch_size=4, backbone_frozen=True)
        train(det, mat, toy_manifest[:8], cfg, tmp_path / "rung", max_epochs=1)
        backbone_after = list(det.backbone_parameters())
        heads_after = list(det.head_parameters())
        for before, after in zip(backbone_before, backbone_after):
            assert torch.equal(before, after)
        assert any(not torch.equal(b, a) for b, a in zip(heads_before, heads_after))

    def test_manifest_too_small(self, tmp_path):
        det, mat = tiny_models()
        with pytest.raises(PipelineError):
            train(det, mat, [{"source_path": "x", "seed": 0, "mode": "invert"}],
                  toy_train_config(), tmp_path / "r")

    def test_periodic_checkpoints(self, toy_manifest, tmp_path):
        det, mat = tiny_models(seed=9)
        cfg = toy_train_config(epochs=2, batch_size=8, checkpoint_every=1)
        train(det, mat, toy_manifest[:10], cfg, tmp_path / "runp", max_epochs=2)
        assert (tmp_path / "runp" / "checkpoint_epoch0001.pt").exists()
        assert (tmp_path / "runp" / "checkpoint_epoch0002.pt").exists()


class TestMakePair:
    def test_deterministic_and_resampled(self, toy_manifest):
        cfg = toy_train_config()
        from vesselreg.synthdata import load_image
        entry = toy_manifest[0]
        sources = {entry["source_path"]: load_image(entry["source_path"])}
        a = make_pair(entry, cfg, sources)
        b = make_pair(entry, cfg, sources)
        np.testing.assert_array_equal(a.patch_a, b.patch_a)
        c = make_pair(entry, cfg, sources, epoch=3, resample=True)
        d = make_pair(entry, cfg, sources, epoch=4, resample=True)
        assert not np.array_equal(c.patch_a, d.patch_a)


class TestRegisterFailures:
    def test_blank_images_no_homography(self):
        det, mat = tiny_models(seed=6)
        blank = np.zeros((96, 96), dtype=np.float32)
        with pytest.raises(NoHomographyError) as exc:
            register(det, mat, blank, blank, n_max=32)
        assert exc.value.diagnostics["n_matches"] == 0


class TestPretrain:
    def test_bce_decreases_and_junctions_stand_out(self):
        torch.manual_seed(8)
        det = VesselKeypointNet(DetectorConfig(descriptor_dim=16, base_channels=8,
                                               num_blocks=1))
        samples = []
        for i in range(20):
            img, junctions = vessel_phantom((96, 96), seed=600 + i, n_trees=6,
                                            return_junctions=True)
            samples.append((img, junctions))
        history = pretrain_detector(det, samples, PretrainConfig(epochs=3, lr=1e-3))
        assert len(history["bce"]) == 3
        assert history["bce"][-1] < history["bce"][0]

        from vesselreg.detector import detect_and_describe
        hits, background = [], []
        for img, junctions in samples[:5]:
            heat, _ = detect_and_describe(det, img)
            background.append(np.median(heat))
            for x, y in junctions:
                xi, yi = int(round(x)), int(round(y))
                if 0 <= xi < 96 and 0 <= yi < 96:
                    hits.append(heat[yi, xi])
        assert hits
        assert float(np.mean(hits)) > float(np.mean(background))

    def test_junction_target_blobs(self):
        target = junction_target((32, 32), np.array([[10.0, 12.0]]), sigma=2.0)
        assert target.max() == pytest.approx(1.0, abs=1e-6)
        assert target[12, 10] == target.max()
        assert target[0, 0] < 1e-6


class TestConfigDict:
    def test_round_trip(self):
        cfg = toy_train_config(epochs=3)
        from dataclasses import asdict
        rebuilt = config_from_dict(asdict(cfg))
        assert rebuilt == cfg

    def test_partial_dict(self):
        cfg = config_from_dict({"n_max": 64, "kd": {"tau": 2.0},
                                "augment": {"patch_size": 128}})
        assert cfg.n_max == 64
        assert cfg.kd.tau == 2.0
        assert cfg.patch_size == 128
        assert cfg.kd.beta == 300.0
