"""End-to-end training and one-call inference registration.

Training: per step, synthetic pairs are generated from the manifest, both
patches are run through the detector, keypoints are extracted (NMS, top-K,
differentiable subpixel refinement), descriptors are interpolated, ground
truth positives are mined from the exact pair homography, the graph matcher
produces a partial assignment, and the total loss w_kd * L_KD + w_sg * L_SG is
backpropagated through the refinement coordinates, the descriptors, and the
Sinkhorn iteration. Two Adam parameter groups run at their own learning rates
with a flat-then-linear-decay schedule and early stopping on validation loss.

Inference: the same chain up to match extraction, then a weighted DLT over the
match confidences yields the homography.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .detector import (
    DetectorConfig,
    KeypointSet,
    LossConfigKD,
    VesselKeypointNet,
    detect_and_describe,
    dkr_offsets,
    find_positive_pairs,
    interpolate_descriptors,
    loss_desc,
    loss_kd,
    nms,
    top_k_keypoints,
)
from .geometry import (
    Correspondences,
    EstimationError,
    GeometryError,
    Homography,
    HomographySampleConfig,
    estimate_homography_ransac,
    estimate_homography_dlt,
)
from .matcher import (
    GraphMatcher,
    MatcherConfig,
    MatchResult,
    extract_matches,
    loss_sg,
    matching_ground_truth,
)
from .synthdata import AugmentConfig, SyntheticPair, generate_pair, load_image

CHECKPOINT_VERSION = 1


class PipelineError(RuntimeError):
    pass


class NoHomographyError(PipelineError):
    """Registration produced fewer than four usable matches."""

    def __init__(self, diagnostics: dict):
        super().__init__(f"registration failed: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    epochs_flat: int = 100
    epochs_decay: int = 400
    lr_matcher: float = 1e-4
    lr_detector_heads: float = 1e-6
    # optional split: let the descriptor head learn at its own rate while the
    # confidence head stays quasi-static (stable keypoint sets); None follows
    # lr_detector_heads
    lr_describe_head: float | None = None
    backbone_frozen: bool = True
    batch_size: int = 8
    w_kd: float = 1.0
    w_sg: float = 1.0
    early_stop_patience: int = 20
    seed: int = 0
    n_max: int = 512
    kd: LossConfigKD = field(default_factory=LossConfigKD)
    kappa: float = 0.45
    match_threshold: float = 0.2
    nms_radius: int = 2
    border_margin: int = 6
    val_fraction: float = 0.1
    resample_each_epoch: bool = True
    checkpoint_every: int = 0  # epochs between periodic checkpoints; 0 = end only
    homography: HomographySampleConfig = field(default_factory=HomographySampleConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.lr_matcher <= 0 or self.lr_detector_heads <= 0:
            raise PipelineError("learning rates must be positive")
        if self.w_kd < 0 or self.w_sg < 0:
            raise PipelineError("loss weights must be nonnegative")
        if self.batch_size < 1 or self.n_max < 1:
            raise PipelineError("batch_size and n_max must be positive")

    @property
    def patch_size(self) -> int:
        return self.augment.patch_size

    def lr_factor(self, epoch: int) -> float:
        """Flat for epochs_flat epochs, then linear decay to zero."""
        if epoch <= self.epochs_flat:
            return 1.0
        total = self.epochs_flat + self.epochs_decay
        return max(0.0, (total - epoch) / self.epochs_decay)


@dataclass(frozen=True)
class RegistrationOutput:
    h: Homography
    matches: MatchResult
    keypoints_a: KeypointSet
    keypoints_b: KeypointSet
    diagnostics: dict


def torch_warp_points(coords: torch.Tensor, h: Homography) -> torch.Tensor:
    """Differentiable homography application to (N, 2) coordinate tensors."""
    m = torch.from_numpy(np.array(h.matrix)).to(coords.dtype)
    num = coords @ m[:2, :2].t() + m[:2, 2]
    den = coords @ m[2, :2].unsqueeze(1) + m[2, 2]
    return num / den


def save_checkpoint(path: str | Path, detector: VesselKeypointNet,
                    matcher: GraphMatcher, extra: dict | None = None) -> None:
    """Single-file versioned checkpoint: architecture configs plus weights."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "detector_config": asdict(detector.cfg),
        "matcher_config": asdict(matcher.cfg),
        "detector_state": detector.state_dict(),
        "matcher_state": matcher.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[VesselKeypointNet, GraphMatcher, dict]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise PipelineError(f"cannot read checkpoint {path}: {e}") from e
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise PipelineError(f"unsupported checkpoint version {version}")
    mcfg = dict(payload["matcher_config"])
    mcfg["encoder_hidden"] = tuple(mcfg["encoder_hidden"])
    detector = VesselKeypointNet(DetectorConfig(**payload["detector_config"]))
    matcher = GraphMatcher(MatcherConfig(**mcfg))
    detector.load_state_dict(payload["detector_state"])
    matcher.load_state_dict(payload["matcher_state"])
    detector.eval()
    matcher.eval()
    return detector, matcher, payload.get("extra", {})


def extract_keypoints(heatmap: np.ndarray, n_max: int, nms_radius: int,
                      border_margin: int, temperature: float
                      ) -> tuple[KeypointSet, np.ndarray]:
    """NMS, top-K and subpixel refinement on a numpy heatmap. Returns the
    refined keypoints and the NMS map (needed for training-side refinement)."""
    nms_map = nms(heatmap, nms_radius)
    kps = top_k_keypoints(nms_map, n_max, border_margin)
    if len(kps) == 0:
        return kps, nms_map
    heat_t = torch.from_numpy(np.asarray(heatmap, dtype=np.float64))
    coords_t = torch.from_numpy(kps.coords.astype(np.int64))
    s = nms_map[kps.coords[:, 1].astype(int), kps.coords[:, 0].astype(int)]
    offs = dkr_offsets(heat_t, coords_t, torch.from_numpy(s), temperature)
    return KeypointSet(kps.coords + offs.numpy(), kps.scores), nms_map


def register(detector: VesselKeypointNet, matcher: GraphMatcher,
             img_a: np.ndarray, img_b: np.ndarray, n_max: int = 1024,
             score_threshold: float = 0.2, nms_radius: int = 2,
             border_margin: int = 6, dkr_temperature: float = 0.1
             ) -> RegistrationOutput:
    """Register img_a onto img_b: the returned homography maps img_a pixel
    coordinates to img_b pixel coordinates.

    Raises NoHomographyError (diagnostics attached) when fewer than four
    matches clear the score threshold or estimation degenerates. A RANSAC
    refit is attempted as a fallback when the weighted DLT is degenerate;
    diagnostics report fallback_used.
    """
    sides = []
    for img in (img_a, img_b):
        heat, fld = detect_and_describe(detector, img)
        kps, _ = extract_keypoints(heat, n_max, nms_radius, border_margin,
                                   dkr_temperature)
        fld_t = torch.from_numpy(fld).permute(2, 0, 1)
        if len(kps):
            desc = interpolate_descriptors(
                fld_t, torch.from_numpy(kps.coords), detector.stride).numpy()
        else:
            desc = np.zeros((0, fld.shape[2]))
        sides.append((kps, desc, (img.shape[1], img.shape[0])))
    (kps_a, desc_a, size_a), (kps_b, desc_b, size_b) = sides

    with torch.no_grad():
        p = matcher(torch.from_numpy(desc_a).float(),
                    torch.from_numpy(kps_a.coords).float(),
                    torch.from_numpy(kps_a.scores).float(), size_a,
                    torch.from_numpy(desc_b).float(),
                    torch.from_numpy(kps_b.coords).float(),
                    torch.from_numpy(kps_b.scores).float(), size_b)
    matches = extract_matches(p, score_threshold)

    diagnostics = {
        "n_keypoints_a": len(kps_a),
        "n_keypoints_b": len(kps_b),
        "n_matches": len(matches),
        "mean_confidence": float(matches.confidences.mean()) if len(matches) else 0.0,
        "fallback_used": False,
    }
    if len(matches) < 4:
        raise NoHomographyError(diagnostics)

    corr = Correspondences(kps_a.coords[matches.pairs[:, 0]],
                           kps_b.coords[matches.pairs[:, 1]],
                           matches.confidences)
    try:
        h = estimate_homography_dlt(corr)
    except EstimationError:
        diagnostics["fallback_used"] = True
        try:
            h, _ = estimate_homography_ransac(corr, reproj_threshold=5.0,
                                              max_iters=2000,
                                              rng=np.random.default_rng(0))
        except (EstimationError, GeometryError):
            raise NoHomographyError(diagnostics) from None
    return RegistrationOutput(h, matches, kps_a, kps_b, diagnostics)


def register_from_checkpoint(ckpt_path: str | Path, img_a: np.ndarray,
                             img_b: np.ndarray, **kwargs) -> RegistrationOutput:
    detector, matcher, _ = load_checkpoint(ckpt_path)
    return register(detector, matcher, img_a, img_b, **kwargs)


class _PairForward:
    """Shared per-pair forward pass used by training and validation."""

    def __init__(self, detector: VesselKeypointNet, matcher: GraphMatcher,
                 cfg: TrainConfig):
        self.detector = detector
        self.matcher = matcher
        self.cfg = cfg

    def __call__(self, pair: SyntheticPair):
        """Returns (l_kd, l_sg, n_p) tensors or None when the pair yields too
        few keypoints for supervision."""
        cfg = self.cfg
        x = torch.from_numpy(np.stack([pair.patch_a, pair.patch_b])[:, None])
        heat_t, field_t = self.detector(x.float())

        kp_sets, coord_ts, desc_ts = [], [], []
        for side in range(2):
            heat_np = heat_t[side].detach().numpy().astype(np.float64)
            nms_map = nms(heat_np, cfg.nms_radius)
            kps = top_k_keypoints(nms_map, cfg.n_max, cfg.border_margin)
            if len(kps) < 2:
                return None
            coords_int = torch.from_numpy(kps.coords.astype(np.int64))
            s = nms_map[kps.coords[:, 1].astype(int), kps.coords[:, 0].astype(int)]
            offs = dkr_offsets(heat_t[side], coords_int, torch.from_numpy(s).float(),
                               cfg.kd.temperature)
            coords = coords_int.to(offs.dtype) + offs
            desc = interpolate_descriptors(field_t[side], coords,
                                           self.detector.stride)
            kp_sets.append(KeypointSet(coords.detach().numpy(), kps.scores))
            coord_ts.append(coords)
            desc_ts.append(desc)

        kps_a, kps_b = kp_sets
        pairs_np, _ = find_positive_pairs(kps_a, kps_b, pair.h_gt, cfg.kd.tau)
        pairs_t = torch.from_numpy(pairs_np)
        if len(pairs_np):
            anchors = coord_ts[0][pairs_t[:, 0]]
            warped_p = torch_warp_points(coord_ts[1][pairs_t[:, 1]],
                                         pair.h_gt.inverse())
            l_kd, n_p = loss_kd(desc_ts[0], desc_ts[1], pairs_t, anchors,
                                warped_p, cfg.kd)
        else:
            l_kd, n_p = torch.zeros(()), 0

        size = (cfg.patch_size, cfg.patch_size)
        p = self.matcher(desc_ts[0], coord_ts[0].float(),
                         torch.from_numpy(kps_a.scores).float(), size,
                         desc_ts[1], coord_ts[1].float(),
                         torch.from_numpy(kps_b.scores).float(), size)
        gt_fwd, gt_bwd = matching_ground_truth(kps_a, kps_b, pair.h_gt, cfg.kd.tau)
        l_sg = loss_sg(p, gt_fwd, gt_bwd, cfg.kappa)
        return l_kd, l_sg, n_p


def _derived_seed(base_seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([base_seed, epoch]).generate_state(1)[0])


def _load_sources(entries: list[dict], root: Path | None) -> dict[str, np.ndarray]:
    cache = {}
    for e in entries:
        key = e["source_path"]
        if key not in cache:
            path = Path(key) if root is None else root / key
            cache[key] = load_image(path)
    return cache


def make_pair(entry: dict, cfg: TrainConfig, sources: dict, epoch: int = 0,
              resample: bool = False) -> SyntheticPair:
    seed = _derived_seed(entry["seed"], epoch) if resample else entry["seed"]
    return generate_pair(sources[entry["source_path"]], entry["mode"],
                         cfg.homography, cfg.augment, seed,
                         source_id=entry["source_path"])


def train(detector: VesselKeypointNet, matcher: GraphMatcher,
          manifest_entries: list[dict], cfg: TrainConfig, out_dir: str | Path,
          source_root: str | Path | None = None, max_epochs: int | None = None,
          ) -> dict:
    """Train end to end from a pair manifest. Writes checkpoint.pt and a
    JSON-lines training log into out_dir; returns a run summary.

    max_epochs caps the schedule (defaults to epochs_flat + epochs_decay).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "training_log.jsonl"
    ckpt_path = out_dir / "checkpoint.pt"

    torch.manual_seed(cfg.seed)
    n_val = max(1, int(round(len(manifest_entries) * cfg.val_fraction)))
    if len(manifest_entries) <= n_val:
        raise PipelineError("manifest too small for a train/validation split")
    train_entries = manifest_entries[:-n_val]
    val_entries = manifest_entries[-n_val:]
    sources = _load_sources(manifest_entries,
                            None if source_root is None else Path(source_root))

    for prm in detector.backbone_parameters():
        prm.requires_grad_(not cfg.backbone_frozen)
    lr_describe = (cfg.lr_detector_heads if cfg.lr_describe_head is None
                   else cfg.lr_describe_head)
    groups = [
        {"params": list(matcher.parameters()), "lr": cfg.lr_matcher},
        {"params": list(detector.detect_head_parameters()),
         "lr": cfg.lr_detector_heads},
        {"params": list(detector.describe_head_parameters()), "lr": lr_describe},
    ]
    if not cfg.backbone_frozen:
        groups.append({"params": list(detector.backbone_parameters()),
                       "lr": cfg.lr_detector_heads})
    optimizer = torch.optim.Adam(groups)
    base_lrs = [g["lr"] for g in optimizer.param_groups]

    forward = _PairForward(detector, matcher, cfg)
    total_epochs = min(cfg.epochs_flat + cfg.epochs_decay,
                       max_epochs if max_epochs is not None else math.inf)

    best_val = math.inf
    best_state = None
    patience_left = cfg.early_stop_patience
    history: dict = {"train_loss": [], "val_loss": [], "stopped_epoch": None,
                     "diverged": False, "checkpoint": str(ckpt_path),
                     "log": str(log_path)}

    def snapshot():
        return {"detector": copy.deepcopy(detector.state_dict()),
                "matcher": copy.deepcopy(matcher.state_dict())}

    def validate() -> float:
        detector.eval()
        matcher.eval()
        vals = []
        with torch.no_grad():
            for e in val_entries:
                pair = make_pair(e, cfg, sources)
                out = forward(pair)
                if out is None:
                    continue
                l_kd, l_sg, _ = out
                vals.append(float(cfg.w_kd * l_kd + cfg.w_sg * l_sg))
        detector.train()
        matcher.train()
        return float(np.mean(vals)) if vals else math.inf

    # fixed pairs can be generated once and reused across epochs
    pair_cache: dict[int, SyntheticPair] = {}

    def training_pair(index: int, epoch: int) -> SyntheticPair:
        if cfg.resample_each_epoch:
            return make_pair(train_entries[index], cfg, sources, epoch=epoch,
                             resample=True)
        if index not in pair_cache:
            pair_cache[index] = make_pair(train_entries[index], cfg, sources)
        return pair_cache[index]

    detector.train()
    matcher.train()
    epoch = 0
    with open(log_path, "w") as log:
        while epoch < total_epochs:
            epoch += 1
            factor = cfg.lr_factor(epoch)
            for g, base in zip(optimizer.param_groups, base_lrs):
                g["lr"] = base * factor
            order = np.random.default_rng(cfg.seed + epoch).permutation(len(train_entries))
            epoch_losses = []
            for step, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch_idx = order[start:start + cfg.batch_size]
                optimizer.zero_grad()
                terms = []
                kd_vals, sg_vals, n_ps = [], [], []
                for bi in batch_idx:
                    pair = training_pair(int(bi), epoch)
                    out = forward(pair)
                    if out is None:
                        continue
                    l_kd, l_sg, n_p = out
                    terms.append(cfg.w_kd * l_kd + cfg.w_sg * l_sg)
                    kd_vals.append(float(l_kd.detach()))
                    sg_vals.append(float(l_sg.detach()))
                    n_ps.append(n_p)
                if not terms:
                    continue
                batch_loss = torch.stack(terms).mean()
                if not torch.isfinite(batch_loss):
                    history["diverged"] = True
                    history["stopped_epoch"] = epoch
                    state = best_state or snapshot()
                    detector.load_state_dict(state["detector"])
                    matcher.load_state_dict(state["matcher"])
                    save_checkpoint(ckpt_path, detector, matcher,
                                    extra={"train_config": _config_to_dict(cfg),
                                           "diverged": True})
                    raise PipelineError(
                        f"training diverged at epoch {epoch}; last good "
                        f"checkpoint written to {ckpt_path}")
                batch_loss.backward()
                optimizer.step()
                l_kd_mean = float(np.mean(kd_vals))
                l_sg_mean = float(np.mean(sg_vals))
                log.write(json.dumps({
                    "epoch": epoch, "step": step,
                    "l_kd": l_kd_mean, "l_sg": l_sg_mean,
                    "total": cfg.w_kd * l_kd_mean + cfg.w_sg * l_sg_mean,
                    "lr_groups": [g["lr"] for g in optimizer.param_groups],
                    "n_p_mean": float(np.mean(n_ps)),
                }, sort_keys=True) + "\n")
                epoch_losses.append(float(batch_loss.detach()))

            val_loss = validate()
            history["train_loss"].append(float(np.mean(epoch_losses))
                                         if epoch_losses else math.inf)
            history["val_loss"].append(val_loss)
            log.write(json.dumps({"epoch": epoch, "val_loss": val_loss},
                                 sort_keys=True) + "\n")
            log.flush()

            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint_epoch{epoch:04d}.pt",
                                detector, matcher,
                                extra={"train_config": _config_to_dict(cfg),
                                       "epoch": epoch})

            if val_loss < best_val:
                best_val = val_loss
                best_state = snapshot()
                patience_left = cfg.early_stop_patience
            else:
                patience_left -= 1
                if patience_left <= 0:
                    history["stopped_epoch"] = epoch
                    break

    if best_state is not None:
        detector.load_state_dict(best_state["detector"])
        matcher.load_state_dict(best_state["matcher"])
    detector.eval()
    matcher.eval()
    save_checkpoint(ckpt_path, detector, matcher,
                    extra={"train_config": _config_to_dict(cfg),
                           "best_val_loss": best_val})
    return history


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 3
    lr: float = 1e-3
    blob_sigma: float = 2.0
    margin: float = 1.0
    seed: int = 0
    modality: str = "invert"


def junction_target(shape: tuple[int, int], junctions: np.ndarray,
                    sigma: float) -> np.ndarray:
    """Gaussian-blob target heatmap centered at junction coordinates."""
    target = np.zeros(shape, dtype=np.float64)
    h, w = shape
    for x, y in junctions:
        xi, yi = int(round(x)), int(round(y))
        r = int(3 * sigma)
        ys = np.arange(max(0, yi - r), min(h, yi + r + 1))
        xs = np.arange(max(0, xi - r), min(w, xi + r + 1))
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        blob = np.exp(-((gx - x) ** 2 + (gy - y) ** 2) / (2 * sigma ** 2))
        region = target[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1]
        np.maximum(region, blob, out=region)
    return target


def pretrain_detector(detector: VesselKeypointNet,
                      samples: list[tuple[np.ndarray, np.ndarray]],
                      cfg: PretrainConfig | None = None) -> dict:
    """Optional supervised warm start on synthetically planted junctions.

    Each sample is (image, junction coords). The confidence head is trained
    with binary cross-entropy against Gaussian-blobbed targets on the image
    and its modality-simulated twin; descriptors at junction positions in the
    two versions are pulled together with the bidirectional hinge loss.
    Skipping this stage entirely is a supported configuration.
    """
    from .synthdata import modality_simulate

    cfg = cfg or PretrainConfig()
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(detector.parameters(), lr=cfg.lr)
    detector.train()
    history = {"bce": []}
    for _ in range(cfg.epochs):
        epoch_bce = []
        for img, junctions in samples:
            twin = modality_simulate(img, cfg.modality)
            x = torch.from_numpy(np.stack([img, twin])[:, None]).float()
            heat, field = detector(x)
            target = torch.from_numpy(
                junction_target(img.shape, junctions, cfg.blob_sigma)).float()
            bce = torch.nn.functional.binary_cross_entropy(
                heat, target.expand_as(heat).clone())
            loss = bce
            inside = [(x_, y_) for x_, y_ in junctions
                      if 8 <= x_ < img.shape[1] - 8 and 8 <= y_ < img.shape[0] - 8]
            if inside:
                coords = torch.tensor(inside, dtype=torch.float32)
                d0 = interpolate_descriptors(field[0], coords, detector.stride)
                d1 = interpolate_descriptors(field[1], coords, detector.stride)
                pairs = torch.arange(len(inside)).unsqueeze(1).repeat(1, 2)
                loss = loss + loss_desc(d0, d1, pairs, cfg.margin).mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_bce.append(float(bce.detach()))
        history["bce"].append(float(np.mean(epoch_bce)))
    detector.eval()
    return history


def _config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    """Build a TrainConfig from a (possibly partial) nested dictionary."""
    d = dict(d)
    if "kd" in d and isinstance(d["kd"], dict):
        d["kd"] = LossConfigKD(**d["kd"])
    if "homography" in d and isinstance(d["homography"], dict):
        h = dict(d["homography"])
        if "scale_range" in h:
            h["scale_range"] = tuple(h["scale_range"])
        d["homography"] = HomographySampleConfig(**h)
    if "augment" in d and isinstance(d["augment"], dict):
        a = dict(d["augment"])
        from .synthdata import GeometricConfig, PhotometricConfig
        if "photometric" in a and isinstance(a["photometric"], dict):
            p = dict(a["photometric"])
            for key in ("blur_sigma_range", "noise_std_range"):
                if key in p:
                    p[key] = tuple(p[key])
            a["photometric"] = PhotometricConfig(**p)
        if "geometric_joint" in a and isinstance(a["geometric_joint"], dict):
            a["geometric_joint"] = GeometricConfig(**a["geometric_joint"])
        d["augment"] = AugmentConfig(**a)
    return TrainConfig(**d)
