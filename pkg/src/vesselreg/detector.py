"""Keypoint detection and description with self-supervised losses.

A small residual encoder (stride 4) feeds two heads: a one-channel confidence
head (1x1 conv, batch norm, bicubic upsampling to input resolution, sigmoid)
and a descriptor head producing a D-channel field at stride resolution.
Keypoints are local maxima of the confidence heatmap, refined to subpixel
positions by a differentiable spatial softargmax over 5x5 patches so that
training gradients reach the heatmap despite the hard NMS selection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.ndimage import maximum_filter

from .geometry import Homography, warp_points

DKR_RADIUS = 2  # 5x5 refinement patches


class DetectorError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    descriptor_dim: int = 256
    base_channels: int = 32
    num_blocks: int = 2

    def __post_init__(self):
        if self.descriptor_dim < 1 or self.base_channels < 1 or self.num_blocks < 0:
            raise DetectorError("invalid detector configuration")


@dataclass(frozen=True)
class LossConfigKD:
    """Constants of the keypoint-and-descriptor loss."""

    margin: float = 1.0
    beta: float = 300.0
    tau: float = 3.0
    temperature: float = 0.1

    def __post_init__(self):
        if min(self.margin, self.beta, self.tau, self.temperature) <= 0:
            raise DetectorError("loss constants must be positive")


@dataclass(frozen=True)
class KeypointSet:
    """Subpixel (x, y) coordinates with confidence scores, score-sorted."""

    coords: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coords",
                           np.asarray(self.coords, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "scores",
                           np.asarray(self.scores, dtype=np.float64).ravel())
        if self.coords.shape[0] != self.scores.shape[0]:
            raise DetectorError("coords and scores lengths differ")

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class DescriptorSet:
    """Unit-norm feature vectors aligned 1:1 with a KeypointSet."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise DetectorError("descriptors must be a (N, D) array")
        object.__setattr__(self, "vectors", v)

    def __len__(self) -> int:
        return self.vectors.shape[0]


def _norm(channels: int) -> nn.Module:
    """Batch-size-independent normalization so that training-mode and
    inference-mode forwards produce identical features: keypoint selection
    must not depend on who shares the batch."""
    return nn.GroupNorm(min(8, channels), channels)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.gn1 = _norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.gn2 = _norm(channels)

    def forward(self, x):
        y = F.relu(self.gn1(self.conv1(x)))
        y = self.gn2(self.conv2(y))
        return F.relu(x + y)


class VesselKeypointNet(nn.Module):
    """Shared encoder with confidence and descriptor heads (stride 4)."""

    stride = 4
    min_input = 16

    def __init__(self, cfg: DetectorConfig | None = None):
        super().__init__()
        self.cfg = cfg or DetectorConfig()
        c = self.cfg.base_channels
        self.stem = nn.Sequential(
            nn.Conv2d(1, c, 3, stride=2, padding=1, bias=False),
            _norm(c), nn.ReLU(inplace=True),
            *[ResidualBlock(c) for _ in range(self.cfg.num_blocks)],
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1, bias=False),
            _norm(2 * c), nn.ReLU(inplace=True),
            *[ResidualBlock(2 * c) for _ in range(self.cfg.num_blocks)],
        )
        # batch norm after the final 1x1 convolution: its monotone affine map
        # rescales confidences without reordering local maxima
        self.detect_head = nn.Sequential(
            nn.Conv2d(2 * c, c, 3, padding=1, bias=False),
            _norm(c), nn.ReLU(inplace=True),
            nn.Conv2d(c, 1, 1),
            nn.BatchNorm2d(1),
        )
        self.describe_head = nn.Sequential(
            nn.Conv2d(2 * c, 2 * c, 3, padding=1, bias=False),
            _norm(2 * c), nn.ReLU(inplace=True),
            nn.Conv2d(2 * c, self.cfg.descriptor_dim, 1),
        )

    def backbone_parameters(self):
        return self.stem.parameters()

    def detect_head_parameters(self):
        return self.detect_head.parameters()

    def describe_head_parameters(self):
        return self.describe_head.parameters()

    def head_parameters(self):
        yield from self.detect_head.parameters()
        yield from self.describe_head.parameters()

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """x: (B, 1, H, W) with H, W divisible by the stride. Returns the
        confidence heatmap (B, H, W) in (0, 1) and the descriptor field
        (B, D, H/4, W/4)."""
        feat = self.stem(x)
        logits = self.detect_head(feat)
        up = F.interpolate(logits, scale_factor=self.stride, mode="bicubic",
                           align_corners=False)
        heat = torch.sigmoid(up[:, 0])
        return heat, self.describe_head(feat)


def detect_and_describe(model: VesselKeypointNet, img: np.ndarray,
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Inference on a single image: heatmap at input resolution plus the
    descriptor field as (Hs, Ws, D). Pads to a stride multiple if needed."""
    h, w = img.shape
    if min(h, w) < model.min_input:
        raise DetectorError(f"image {w}x{h} below the {model.min_input} px minimum")
    s = model.stride
    pad_h = (-h) % s
    pad_w = (-w) % s
    x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None, None]
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        heat, field = model(x)
    if was_training:
        model.train()
    heatmap = heat[0, :h, :w].numpy().astype(np.float64)
    desc_field = field[0].permute(1, 2, 0).numpy().astype(np.float64)
    return heatmap, desc_field


def nms(heatmap: np.ndarray, window_radius: int = 2) -> np.ndarray:
    """Keep values equal to their (2r+1)^2 window maximum; among equals only
    the lexicographically smallest (y, x) survives. Suppressed entries are 0."""
    if window_radius < 1:
        raise DetectorError("window_radius must be >= 1")
    h = np.asarray(heatmap, dtype=np.float64)
    size = 2 * window_radius + 1
    full_max = maximum_filter(h, size=size, mode="constant", cval=-np.inf)
    preceding = np.zeros((size, size), dtype=bool)
    preceding[:window_radius, :] = True
    preceding[window_radius, :window_radius] = True
    prev_max = maximum_filter(h, footprint=preceding, mode="constant", cval=-np.inf)
    keep = (h >= full_max) & (h > prev_max)
    return np.where(keep, h, 0.0)


def top_k_keypoints(nms_map: np.ndarray, n_max: int,
                    border_margin: int = 4) -> KeypointSet:
    """Integer keypoints of the n_max highest surviving scores, border excluded,
    sorted by (-score, y, x)."""
    if n_max < 1:
        raise DetectorError("n_max must be >= 1")
    m = np.asarray(nms_map, dtype=np.float64).copy()
    if border_margin > 0:
        m[:border_margin, :] = 0.0
        m[-border_margin:, :] = 0.0
        m[:, :border_margin] = 0.0
        m[:, -border_margin:] = 0.0
    ys, xs = np.nonzero(m > 0)
    scores = m[ys, xs]
    order = np.lexsort((xs, ys, -scores))[:n_max]
    return KeypointSet(np.column_stack([xs[order], ys[order]]).astype(np.float64),
                       scores[order])


def dkr_offsets(heatmap: torch.Tensor, coords: torch.Tensor, s_nms: torch.Tensor,
                temperature: float) -> torch.Tensor:
    """Differentiable subpixel offsets in [-2, 2]^2 for integer keypoints.

    For each keypoint, the 5x5 heatmap patch centered on it is normalized by
    (p - s_nms) / t and a spatial softargmax yields the expected cell offset.
    heatmap: (H, W); coords: (N, 2) integer (x, y); s_nms: (N,) scalar scores.
    """
    if temperature <= 0:
        raise DetectorError("temperature must be positive")
    n = coords.shape[0]
    if n == 0:
        return torch.zeros((0, 2), dtype=heatmap.dtype)
    hgt, wdt = heatmap.shape
    r = DKR_RADIUS
    cx, cy = coords[:, 0].long(), coords[:, 1].long()
    if (cx < r).any() or (cy < r).any() or (cx >= wdt - r).any() or (cy >= hgt - r).any():
        raise DetectorError(f"keypoints must lie >= {r} px inside the heatmap")
    dy, dx = torch.meshgrid(torch.arange(-r, r + 1), torch.arange(-r, r + 1),
                            indexing="ij")
    ys = cy[:, None, None] + dy
    xs = cx[:, None, None] + dx
    patches = heatmap[ys, xs]
    z = (patches - s_nms[:, None, None].to(heatmap.dtype)) / temperature
    w = torch.softmax(z.reshape(n, -1), dim=1)
    off_x = (w * dx.reshape(1, -1).to(w.dtype)).sum(dim=1)
    off_y = (w * dy.reshape(1, -1).to(w.dtype)).sum(dim=1)
    return torch.stack([off_x, off_y], dim=1)


def refine_keypoints_dkr(heatmap: np.ndarray, nms_map: np.ndarray,
                         kps: KeypointSet, temperature: float = 0.1) -> KeypointSet:
    """Subpixel refinement of a KeypointSet (numpy front to dkr_offsets)."""
    if len(kps) == 0:
        return kps
    heat_t = torch.from_numpy(np.asarray(heatmap, dtype=np.float64))
    coords_t = torch.from_numpy(kps.coords.astype(np.int64))
    s = np.asarray(nms_map, dtype=np.float64)[kps.coords[:, 1].astype(int),
                                              kps.coords[:, 0].astype(int)]
    offs = dkr_offsets(heat_t, coords_t, torch.from_numpy(s), temperature)
    return KeypointSet(kps.coords + offs.numpy(), kps.scores)


def interpolate_descriptors(field: torch.Tensor, coords: torch.Tensor,
                            stride: int = 4, normalize: bool = True) -> torch.Tensor:
    """Bilinear interpolation of a (D, Hs, Ws) field at image-pixel (x, y)
    coords mapped by coords/stride, then row unit-normalization."""
    _, hs, ws = field.shape
    fx = coords[:, 0] / stride
    fy = coords[:, 1] / stride
    bad = (fx < 0) | (fx > ws - 1) | (fy < 0) | (fy > hs - 1)
    if bool(bad.any()):
        raise DetectorError(f"coordinate {int(bad.nonzero()[0, 0])} outside the "
                            f"descriptor field after stride mapping")
    x0 = fx.detach().floor().long().clamp(0, ws - 2)
    y0 = fy.detach().floor().long().clamp(0, hs - 2)
    ax = (fx - x0).unsqueeze(1)
    ay = (fy - y0).unsqueeze(1)
    f00 = field[:, y0, x0].t()
    f01 = field[:, y0, x0 + 1].t()
    f10 = field[:, y0 + 1, x0].t()
    f11 = field[:, y0 + 1, x0 + 1].t()
    out = (f00 * (1 - ax) * (1 - ay) + f01 * ax * (1 - ay)
           + f10 * (1 - ax) * ay + f11 * ax * ay)
    if normalize:
        out = out / out.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return out


def sample_descriptors(field: np.ndarray, coords: np.ndarray,
                       stride: int = 4) -> DescriptorSet:
    """Numpy front to interpolate_descriptors; field as (Hs, Ws, D)."""
    field_t = torch.from_numpy(np.asarray(field, dtype=np.float64)).permute(2, 0, 1)
    coords_t = torch.from_numpy(np.asarray(coords, dtype=np.float64).reshape(-1, 2))
    if coords_t.shape[0] == 0:
        return DescriptorSet(np.zeros((0, field.shape[2])))
    return DescriptorSet(interpolate_descriptors(field_t, coords_t, stride).numpy())


def find_positive_pairs(kps_a: KeypointSet, kps_b: KeypointSet, h_gt: Homography,
                        tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth positives: mutual nearest neighbors (after warping set A by
    h_gt) closer than tau. Returns (pairs (K, 2) int array, warped A coords)."""
    warped = warp_points(kps_a.coords, h_gt) if len(kps_a) else np.zeros((0, 2))
    if len(kps_a) == 0 or len(kps_b) == 0:
        return np.zeros((0, 2), dtype=np.int64), warped
    d = np.linalg.norm(warped[:, None, :] - kps_b.coords[None, :, :], axis=2)
    nn_ab = d.argmin(axis=1)
    nn_ba = d.argmin(axis=0)
    i = np.arange(len(kps_a))
    mutual = nn_ba[nn_ab] == i
    close = d[i, nn_ab] < tau
    sel = mutual & close
    return np.column_stack([i[sel], nn_ab[sel]]).astype(np.int64), warped


def loss_desc(desc_a: torch.Tensor, desc_b: torch.Tensor, pairs: torch.Tensor,
              margin: float = 1.0) -> torch.Tensor:
    """Bidirectional margin hinge with hardest-negative mining, per pair.

    For each positive pair (anchor in A, positive in B), the closest
    non-matching descriptor to the anchor is mined in B and the closest
    non-matching descriptor to the positive is mined in A; each direction
    contributes max(0, margin + d_pos - d_neg). A direction is omitted when its
    pool holds only the matching descriptor.
    """
    k = pairs.shape[0]
    if k == 0:
        return torch.zeros(0, dtype=desc_a.dtype)
    ai = pairs[:, 0]
    bj = pairs[:, 1]
    d_a = desc_a[ai]
    d_p = desc_b[bj]
    pos = (d_a - d_p).norm(dim=1)
    total = torch.zeros(k, dtype=desc_a.dtype)
    if desc_b.shape[0] > 1:
        dist = torch.cdist(d_a, desc_b)
        dist = dist.scatter(1, bj.view(-1, 1), float("inf"))
        total = total + F.relu(margin + pos - dist.min(dim=1).values)
    if desc_a.shape[0] > 1:
        dist = torch.cdist(d_p, desc_a)
        dist = dist.scatter(1, ai.view(-1, 1), float("inf"))
        total = total + F.relu(margin + pos - dist.min(dim=1).values)
    return total


def loss_kd(desc_a: torch.Tensor, desc_b: torch.Tensor, pairs: torch.Tensor,
            coords_a: torch.Tensor, warped_p: torch.Tensor,
            cfg: LossConfigKD) -> tuple[torch.Tensor, int]:
    """Keypoint-and-descriptor loss over the positive pairs:
    mean descriptor hinge plus beta / N_p^2 times the summed reprojection
    distance between anchor coordinates and warped positive coordinates.

    Returns (loss, n_p); n_p == 0 flags an empty-pair instance whose loss
    contribution is zero and which the training step may skip.
    """
    n_p = int(pairs.shape[0])
    if n_p == 0:
        return torch.zeros(()), 0
    desc_term = loss_desc(desc_a, desc_b, pairs, cfg.margin).mean()
    reproj = (coords_a - warped_p).norm(dim=1).sum()
    return desc_term + (cfg.beta / n_p ** 2) * reproj, n_p
