"""Matcher learnability probe with a frozen random detector, many steps."""
import sys
import time
import tempfile
from pathlib import Path

import numpy as np
import torch

from vesselreg.detector import (DetectorConfig, VesselKeypointNet,
                                detect_and_describe, find_positive_pairs,
                                interpolate_descriptors)
from vesselreg.matcher import GraphMatcher, MatcherConfig, extract_matches
from vesselreg.pipeline import TrainConfig, train, extract_keypoints, make_pair
from vesselreg.synthdata import (AugmentConfig, PhotometricConfig,
                                 GeometricConfig, save_image, load_image)
from vesselreg.geometry import HomographySampleConfig, warp_points
from vesselreg.phantom import vessel_phantom

EPOCHS = int(sys.argv[1]) if len(sys.argv) > 1 else 250
BATCH = int(sys.argv[2]) if len(sys.argv) > 2 else 2
LR = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-3
RESAMPLE = bool(int(sys.argv[4])) if len(sys.argv) > 4 else False
NPAIRS = int(sys.argv[5]) if len(sys.argv) > 5 else 9
LR_HEADS = float(sys.argv[6]) if len(sys.argv) > 6 else 1e-9

torch.manual_seed(0)
tmp = Path(tempfile.mkdtemp())
entries = []
for i in range(max(9, NPAIRS // 3)):
    img = vessel_phantom((192, 192), seed=300 + i, n_trees=7)
    p = tmp / f"s{i}.png"
    save_image(p, img)
for k in range(NPAIRS):
    entries.append({"source_path": str(tmp / f"s{k % max(9, NPAIRS // 3)}.png"),
                    "seed": k, "mode": "invert"})

cfg = TrainConfig(
    epochs_flat=EPOCHS, epochs_decay=0, lr_matcher=LR, lr_detector_heads=LR_HEADS,
    batch_size=BATCH, n_max=64, early_stop_patience=10 ** 6,
    resample_each_epoch=RESAMPLE, val_fraction=0.1,
    homography=HomographySampleConfig(0.04, 6, (0.97, 1.03), 0.02),
    augment=AugmentConfig(patch_size=96,
                          photometric=PhotometricConfig(0.1, (0, 0.5), 0.2,
                                                        (0, 0.01), 2),
                          geometric_joint=GeometricConfig(0.5, 0.5, 4, 0.5, 8.0)))

det = VesselKeypointNet(DetectorConfig(descriptor_dim=48, base_channels=16,
                                       num_blocks=1))
mat = GraphMatcher(MatcherConfig(dim=48, num_layers=4, num_heads=4,
                                 sinkhorn_iterations=100, encoder_hidden=(32,)))
t0 = time.time()
hist = train(det, mat, entries, cfg, tmp / "run", max_epochs=EPOCHS)
steps = EPOCHS * max(1, (len(entries) - max(1, len(entries) // 10)) // BATCH)
print(f"{EPOCHS} ep (~{steps} steps) in {time.time()-t0:.0f}s; "
      f"loss {hist['train_loss'][0]:.1f} -> {hist['train_loss'][-1]:.1f}",
      flush=True)
print("dustbin:", float(mat.dustbin.detach()), flush=True)

sources = {e["source_path"]: load_image(e["source_path"]) for e in entries}
tot_match, tot_correct = 0, 0
for e in entries[:6]:
    pair = make_pair(e, cfg, sources)
    heat_a, fld_a = detect_and_describe(det, pair.patch_a)
    heat_b, fld_b = detect_and_describe(det, pair.patch_b)
    kps_a, _ = extract_keypoints(heat_a, 64, 2, 6, 0.1)
    kps_b, _ = extract_keypoints(heat_b, 64, 2, 6, 0.1)
    da = interpolate_descriptors(torch.from_numpy(fld_a).permute(2, 0, 1),
                                 torch.from_numpy(kps_a.coords), 4).float()
    db = interpolate_descriptors(torch.from_numpy(fld_b).permute(2, 0, 1),
                                 torch.from_numpy(kps_b.coords), 4).float()
    with torch.no_grad():
        p = mat(da, torch.from_numpy(kps_a.coords).float(),
                torch.from_numpy(kps_a.scores).float(), (96, 96),
                db, torch.from_numpy(kps_b.coords).float(),
                torch.from_numpy(kps_b.scores).float(), (96, 96))
    pn = p.numpy()
    gt, _ = find_positive_pairs(kps_a, kps_b, pair.h_gt, 3.0)
    res = extract_matches(pn, 0.2)
    correct = 0
    if len(res):
        w = warp_points(kps_a.coords[res.pairs[:, 0]], pair.h_gt)
        err = np.linalg.norm(w - kps_b.coords[res.pairs[:, 1]], axis=1)
        correct = int((err < 3).sum())
    tot_match += len(res)
    tot_correct += correct
    print(f"seed={e['seed']}: gt={len(gt)} real_max={pn[:-1,:-1].max():.3f} "
          f"m@0.2={len(res)} correct={correct}", flush=True)
print("total matches:", tot_match, "correct:", tot_correct, flush=True)
