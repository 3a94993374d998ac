"""Self-supervision training pairs from single images.

A pair is built by jointly augmenting a source image, simulating a second
modality on one copy, warping that copy by a randomly sampled homography,
cropping both copies at the same position, and finally applying independent
photometric augmentation. The exact ground-truth homography between the two
patches is tracked through every geometric step, including the small
crop-and-resize inside the photometric stage.

Images are single-channel float32 rasters in [0, 1]; vessels are assumed dark.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import imageio.v3 as iio
import numpy as np
from scipy import ndimage

from .geometry import (
    Homography,
    HomographySampleConfig,
    crop_adjust_homography,
    sample_homography,
)

MODALITY_MODES = ("none", "invert", "gamma_remap", "vesselness_contrast", "external_file")

_CROP_RETRIES = 20
_MIN_VALID_FRACTION = 0.4  # abort when > 60% of the warped patch is empty


class SynthError(ValueError):
    """Invalid input or failed pair generation."""


def load_image(path: str | Path) -> np.ndarray:
    """Load an 8/16-bit grayscale or RGB PNG/TIFF as float32 in [0, 1].

    RGB inputs are reduced to the green channel, where vessel contrast is
    strongest in fundus imagery.
    """
    arr = iio.imread(path)
    if arr.ndim == 3:
        arr = arr[..., 1]
    if arr.dtype == np.uint8:
        img = arr.astype(np.float32) / 255.0
    elif arr.dtype == np.uint16:
        img = arr.astype(np.float32) / 65535.0
    else:
        img = np.clip(arr.astype(np.float32), 0.0, 1.0)
    return img


def save_image(path: str | Path, img: np.ndarray) -> None:
    """Write a [0, 1] raster as 8-bit grayscale PNG/TIFF."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    iio.imwrite(path, (arr * 255.0 + 0.5).astype(np.uint8))


def warp_image(img: np.ndarray, h: Homography,
               output_shape: tuple[int, int] | None = None,
               ) -> tuple[np.ndarray, np.ndarray]:
    """Warp an image so that output(p) = input(h^-1 p), bilinear, zero fill.

    Returns (warped, valid) where valid marks output pixels whose source
    location fell inside the input raster.
    """
    hh, ww = img.shape if output_shape is None else output_shape
    ih, iw = img.shape
    ys, xs = np.mgrid[0:hh, 0:ww].astype(np.float64)
    m = h.inverse().matrix
    w = m[2, 0] * xs + m[2, 1] * ys + m[2, 2]
    ok = np.abs(w) > 1e-12
    w_safe = np.where(ok, w, 1.0)
    sx = (m[0, 0] * xs + m[0, 1] * ys + m[0, 2]) / w_safe
    sy = (m[1, 0] * xs + m[1, 1] * ys + m[1, 2]) / w_safe
    valid = ok & (sx >= 0) & (sx <= iw - 1) & (sy >= 0) & (sy <= ih - 1)
    warped = ndimage.map_coordinates(img.astype(np.float64), [sy, sx], order=1,
                                     mode="constant", cval=0.0)
    warped[~valid] = 0.0
    return warped.astype(np.float32), valid


def elastic_displacement_field(shape: tuple[int, int], strength: float,
                               sigma: float, rng: np.random.Generator,
                               ) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed random displacement field with max Euclidean magnitude == strength."""
    dx = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    dy = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    mag = np.sqrt(dx * dx + dy * dy)
    peak = mag.max()
    if peak > 1e-12:
        dx = dx * (strength / peak)
        dy = dy * (strength / peak)
    return dx.astype(np.float32), dy.astype(np.float32)


@dataclass(frozen=True)
class PhotometricConfig:
    color_jitter_strength: float = 0.2
    blur_sigma_range: tuple[float, float] = (0.0, 1.0)
    sharpen_strength: float = 0.5
    noise_std_range: tuple[float, float] = (0.0, 0.03)
    small_crop_max_px: int = 6

    def __post_init__(self):
        if self.color_jitter_strength < 0 or self.sharpen_strength < 0 \
                or self.small_crop_max_px < 0:
            raise SynthError("photometric strengths must be nonnegative")
        for lo, hi in (self.blur_sigma_range, self.noise_std_range):
            if lo < 0 or hi < lo:
                raise SynthError("ranges must satisfy 0 <= lo <= hi")


@dataclass(frozen=True)
class GeometricConfig:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    rotation_range_deg: float = 10.0
    elastic_noise_strength: float = 2.0
    elastic_smoothing_sigma: float = 8.0

    def __post_init__(self):
        for p in (self.hflip_prob, self.vflip_prob):
            if not 0.0 <= p <= 1.0:
                raise SynthError("flip probabilities must lie in [0, 1]")
        if self.rotation_range_deg < 0 or self.elastic_noise_strength < 0 \
                or self.elastic_smoothing_sigma < 0:
            raise SynthError("geometric strengths must be nonnegative")


@dataclass(frozen=True)
class AugmentConfig:
    photometric: PhotometricConfig = field(default_factory=PhotometricConfig)
    geometric_joint: GeometricConfig = field(default_factory=GeometricConfig)
    patch_size: int = 384
    seed: int = 0

    def __post_init__(self):
        if self.patch_size <= 0:
            raise SynthError("patch_size must be positive")


@dataclass(frozen=True)
class SyntheticPair:
    """Two augmented patches with the exact homography patch_a -> patch_b."""

    patch_a: np.ndarray
    patch_b: np.ndarray
    h_gt: Homography
    provenance: dict
    valid_mask_b: np.ndarray
    pre_photometric: tuple[np.ndarray, np.ndarray] | None = None


def geometric_joint_augment(img: np.ndarray, gcfg: GeometricConfig,
                            rng: np.random.Generator) -> np.ndarray:
    """Flips, rotation, and elastic deformation, applied before the homography
    warp so that it can be shared identically by both pair members."""
    out = np.asarray(img, dtype=np.float32)
    if rng.uniform() < gcfg.hflip_prob:
        out = out[:, ::-1].copy()
    if rng.uniform() < gcfg.vflip_prob:
        out = out[::-1, :].copy()
    angle = float(rng.uniform(-gcfg.rotation_range_deg, gcfg.rotation_range_deg))
    if angle != 0.0:
        h, w = out.shape
        rot = Homography.rotation(angle, center=((w - 1) / 2.0, (h - 1) / 2.0))
        out, _ = warp_image(out, rot)
    if gcfg.elastic_noise_strength > 0:
        dx, dy = elastic_displacement_field(out.shape, gcfg.elastic_noise_strength,
                                            gcfg.elastic_smoothing_sigma, rng)
        ys, xs = np.mgrid[0:out.shape[0], 0:out.shape[1]].astype(np.float32)
        out = ndimage.map_coordinates(out, [ys + dy, xs + dx], order=1,
                                      mode="reflect").astype(np.float32)
    return out


def _small_random_crop(img: np.ndarray, max_px: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, Homography]:
    """Crop up to max_px total and resize back, returning the induced affine map
    from input coordinates to output coordinates."""
    if max_px <= 0:
        return img, Homography.identity()
    h, w = img.shape
    k = int(rng.integers(0, max_px + 1))
    if k == 0:
        return img, Homography.identity()
    ox = int(rng.integers(0, k + 1))
    oy = int(rng.integers(0, k + 1))
    sx = (w - k - 1) / (w - 1)
    sy = (h - k - 1) / (h - 1)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = ndimage.map_coordinates(img.astype(np.float64),
                                  [oy + ys * sy, ox + xs * sx], order=1)
    hmap = Homography(np.array([[1.0 / sx, 0.0, -ox / sx],
                                [0.0, 1.0 / sy, -oy / sy],
                                [0.0, 0.0, 1.0]]))
    return out.astype(np.float32), hmap


def _intensity_augment(img: np.ndarray, pcfg: PhotometricConfig,
                       rng: np.random.Generator) -> np.ndarray:
    out = img.astype(np.float32)
    s = pcfg.color_jitter_strength
    if s > 0:
        contrast = 1.0 + float(rng.uniform(-s, s))
        brightness = 0.5 * float(rng.uniform(-s, s))
        gamma = float(np.exp(rng.uniform(-0.5 * s, 0.5 * s)))
        out = np.clip((out - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0) ** gamma
    sigma = float(rng.uniform(*pcfg.blur_sigma_range))
    if sigma > 1e-3:
        out = ndimage.gaussian_filter(out, sigma)
    if pcfg.sharpen_strength > 0:
        amount = float(rng.uniform(0, pcfg.sharpen_strength))
        out = out + amount * (out - ndimage.gaussian_filter(out, 1.0))
    lo, hi = pcfg.noise_std_range
    if hi > 0:
        std = float(rng.uniform(lo, hi))
        if std > 0:
            out = out + rng.standard_normal(out.shape).astype(np.float32) * std
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def photometric_augment(img: np.ndarray, pcfg: PhotometricConfig,
                        rng: np.random.Generator) -> tuple[np.ndarray, Homography]:
    """Per-patch augmentation: small crop-and-resize followed by intensity-only
    transforms. Returns the augmented image and the geometry correction the
    small crop induced, which the caller folds into the pair's ground truth."""
    out, hmap = _small_random_crop(img, pcfg.small_crop_max_px, rng)
    return _intensity_augment(out, pcfg, rng), hmap


def modality_simulate(img: np.ndarray, mode: str, *, gamma: float = 0.6,
                      contrast_gain: float = 2.0, background_sigma: float = 6.0,
                      external_path: str | Path | None = None) -> np.ndarray:
    """Deterministic, geometry-preserving stand-in for a second modality."""
    out = np.asarray(img, dtype=np.float32)
    if mode == "none":
        return out.copy()
    if mode == "invert":
        return (1.0 - out).astype(np.float32)
    if mode == "gamma_remap":
        if gamma == 1.0:
            return out.copy()
        return np.clip(out, 0.0, 1.0).astype(np.float32) ** np.float32(gamma)
    if mode == "vesselness_contrast":
        background = ndimage.gaussian_filter(out, background_sigma)
        return np.clip(0.5 + contrast_gain * (out - background), 0.0, 1.0
                       ).astype(np.float32)
    if mode == "external_file":
        if external_path is None:
            raise SynthError("external_file mode requires external_path")
        ext = load_image(external_path)
        if ext.shape != out.shape:
            raise SynthError(f"external translation shape {ext.shape} does not "
                             f"match image shape {out.shape}")
        return ext
    raise SynthError(f"unknown modality mode {mode!r}; expected one of {MODALITY_MODES}")


def generate_pair(src: np.ndarray, mode: str, hcfg: HomographySampleConfig,
                  acfg: AugmentConfig, seed: int, source_id: str = "",
                  external_path: str | Path | None = None,
                  keep_intermediates: bool = False) -> SyntheticPair:
    """Build one training pair. Deterministic given (src, configs, seed).

    Pipeline order: joint geometric augmentation, modality simulation of copy
    B, homography warp of copy B, synchronized crop with homography
    recomputation, then independent photometric augmentation of both patches.
    """
    img = np.asarray(src, dtype=np.float32)
    if img.ndim != 2:
        raise SynthError("source image must be a single-channel raster")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise SynthError("source image must be finite and in [0, 1]")
    p = acfg.patch_size
    ih, iw = img.shape
    if ih < p or iw < p:
        raise SynthError(f"source {iw}x{ih} cannot fit a {p}x{p} crop")

    rng = np.random.default_rng(seed)
    base = geometric_joint_augment(img, acfg.geometric_joint, rng)
    copy_a = base
    copy_b = modality_simulate(base, mode, external_path=external_path)

    h_full = sample_homography(hcfg, (iw, ih), rng)
    warped_b, valid_b = warp_image(copy_b, h_full)

    x0 = y0 = 0
    for attempt in range(_CROP_RETRIES):
        x0 = int(rng.integers(0, iw - p + 1))
        y0 = int(rng.integers(0, ih - p + 1))
        if valid_b[y0:y0 + p, x0:x0 + p].mean() >= _MIN_VALID_FRACTION:
            break
    else:
        raise SynthError(f"no crop with >= {_MIN_VALID_FRACTION:.0%} warped "
                         f"content found in {_CROP_RETRIES} attempts")

    patch_a = copy_a[y0:y0 + p, x0:x0 + p].copy()
    patch_b = warped_b[y0:y0 + p, x0:x0 + p].copy()
    mask_b = valid_b[y0:y0 + p, x0:x0 + p].copy()
    h_crop = crop_adjust_homography(h_full, (x0, y0), (x0, y0))

    patch_a_geo, h_pa = _small_random_crop(patch_a, acfg.photometric.small_crop_max_px, rng)
    patch_a_out = _intensity_augment(patch_a_geo, acfg.photometric, rng)
    patch_b_geo, h_pb = _small_random_crop(patch_b, acfg.photometric.small_crop_max_px, rng)
    patch_b_out = _intensity_augment(patch_b_geo, acfg.photometric, rng)
    if acfg.photometric.small_crop_max_px > 0:
        # resample the validity mask through the same geometry as patch_b
        ys, xs = np.mgrid[0:p, 0:p].astype(np.float64)
        inv = h_pb.inverse().matrix
        mask_b = ndimage.map_coordinates(mask_b.astype(np.float64),
                                         [inv[1, 1] * ys + inv[1, 2],
                                          inv[0, 0] * xs + inv[0, 2]],
                                         order=1) > 0.999

    h_gt = h_pb @ h_crop @ h_pa.inverse()
    provenance = {"source_id": source_id, "seed": int(seed), "mode": mode}
    return SyntheticPair(
        patch_a=patch_a_out, patch_b=patch_b_out, h_gt=h_gt,
        provenance=provenance, valid_mask_b=mask_b,
        pre_photometric=(patch_a_geo, patch_b_geo) if keep_intermediates else None)


def write_pair_manifest(path: str | Path, entries: list[dict]) -> None:
    """JSON-lines manifest of {source_path, seed, mode} enabling regeneration."""
    with open(path, "w") as f:
        for e in entries:
            f.write(json.dumps(e, sort_keys=True) + "\n")


def read_pair_manifest(path: str | Path) -> list[dict]:
    entries = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    for e in entries:
        for key in ("source_path", "seed", "mode"):
            if key not in e:
                raise SynthError(f"manifest entry missing {key!r}: {e}")
    return entries
