"""Corpus loading, preprocessing, augmentation, splits, and the synthetic
shape generator used for desk-scale end-to-end runs.

Corpus layout on disk::

    root/
      images/<id>.png|.jpg|.jpeg
      masks/<id>.png

Images and masks are matched by filename stem. Images are scaled to [0,1]
and bilinearly resized to 224x224; masks are nearest-neighbor resized and
re-thresholded so they stay strictly binary.
"""

import json
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import kernels
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

IMAGE_SIZE = 224
_IMAGE_EXTS = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class Sample:
    id: str
    image_path: Path
    mask_path: Path


@dataclass
class SplitSpec:
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    seed: int = 17

    def __post_init__(self):
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {total}")
        if min(self.train_frac, self.val_frac, self.test_frac) < 0:
            raise ConfigError("split fractions must be nonnegative")


@dataclass
class AugmentationConfig:
    rotation_enabled: bool = True
    rotation_max_degrees: float = 30.0
    hflip_enabled: bool = True
    hflip_prob: float = 0.5


def load_corpus(root_dir, strict=True):
    """Scan root/images and root/masks into Samples, ordered by id.

    Unmatched files are fatal in strict mode and skipped with a warning
    otherwise.
    """
    root = Path(root_dir)
    images_dir = root / "images"
    masks_dir = root / "masks"
    if not images_dir.is_dir() or not masks_dir.is_dir():
        raise DataError(f"corpus root {root} must contain images/ and masks/ directories")
    images = {
        p.stem: p for p in sorted(images_dir.iterdir()) if p.suffix.lower() in _IMAGE_EXTS
    }
    masks = {p.stem: p for p in sorted(masks_dir.iterdir()) if p.suffix.lower() in _IMAGE_EXTS}
    orphans = sorted(set(images) ^ set(masks))
    if orphans:
        if strict:
            raise DataError(f"unmatched image/mask stems: {orphans}")
        log.warning("skipping %d unmatched image/mask stems: %s", len(orphans), orphans)
    matched = sorted(set(images) & set(masks))
    if not matched:
        log.warning("corpus at %s is empty", root)
    return [Sample(id=s, image_path=images[s], mask_path=masks[s]) for s in matched]


def split_corpus(samples, spec):
    """Shuffle by seed and cut into train/val/test.

    Val and test sizes are floored; the remainder goes to train. Splits
    are disjoint, cover the corpus, and are identical for identical seeds.
    """
    n = len(samples)
    if n < 10:
        raise DataError(f"need at least 10 samples to split, got {n}")
    n_val = int(np.floor(spec.val_frac * n))
    n_test = int(np.floor(spec.test_frac * n))
    n_train = n - n_val - n_test
    order = np.random.default_rng(spec.seed).permutation(n)
    picked = [samples[i] for i in order]
    return (
        picked[:n_train],
        picked[n_train : n_train + n_val],
        picked[n_train + n_val :],
    )


# -- preprocessing -------------------------------------------------------


def _nearest_resize(arr_hw, oh, ow):
    h, w = arr_hw.shape
    ys = np.clip(np.round((np.arange(oh) + 0.5) * (h / oh) - 0.5).astype(int), 0, h - 1)
    xs = np.clip(np.round((np.arange(ow) + 0.5) * (w / ow) - 0.5).astype(int), 0, w - 1)
    return arr_hw[ys[:, None], xs[None, :]]


def preprocess_pair(image_chw, mask_hw, size=IMAGE_SIZE):
    """Resize a float image (3,H,W) in [0,1] and a mask (H,W) to the model
    input size; the mask is re-thresholded to stay binary."""
    image = np.asarray(image_chw, dtype=np.float32)
    if image.shape[1] != size or image.shape[2] != size:
        image = kernels.resize_bilinear_forward(image[None], size, size)[0]
    mask = _nearest_resize(np.asarray(mask_hw, dtype=np.float32), size, size)
    mask = (mask >= 0.5).astype(np.float32)[None]
    return image, mask


def _read_image(path, mode):
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert(mode), dtype=np.float32) / 255.0
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc


# Per-channel statistics most pretrained encoders expect (RGB order).
CHANNEL_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
CHANNEL_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def standardize_image(image_chw):
    """Optional per-channel standardization on top of [0,1] scaling, for
    use with externally pretrained encoder weights."""
    return (image_chw - CHANNEL_MEAN[:, None, None]) / CHANNEL_STD[:, None, None]


def preprocess(sample, size=IMAGE_SIZE, standardize=False):
    """Load one sample from disk -> (image (3,size,size) in [0,1] unless
    standardized, binary mask (1,size,size))."""
    image = _read_image(sample.image_path, "RGB").transpose(2, 0, 1)
    mask = _read_image(sample.mask_path, "L")
    image, mask = preprocess_pair(image, mask, size)
    if standardize:
        image = standardize_image(image)
    return image, mask


# -- augmentation --------------------------------------------------------


def rotate_pair(image, mask, angle_degrees):
    """Rotate image and mask by the same angle about the center.

    The image uses reflective border handling; the mask is zero-filled and
    re-thresholded so it stays binary.
    """
    if angle_degrees == 0.0:
        return image, mask
    img = ndimage.rotate(
        image, angle_degrees, axes=(1, 2), reshape=False, order=1, mode="reflect"
    )
    m = ndimage.rotate(
        mask, angle_degrees, axes=(1, 2), reshape=False, order=1, mode="constant", cval=0.0
    )
    return img.astype(np.float32), (m >= 0.5).astype(np.float32)


def flip_pair(image, mask):
    return np.ascontiguousarray(image[..., ::-1]), np.ascontiguousarray(mask[..., ::-1])


def augment(pair, cfg, rng):
    """Apply the configured random transforms; image and mask always
    receive the identical geometry."""
    image, mask = pair
    if cfg.rotation_enabled:
        angle = float(rng.uniform(-cfg.rotation_max_degrees, cfg.rotation_max_degrees))
        image, mask = rotate_pair(image, mask, angle)
    if cfg.hflip_enabled and rng.random() < cfg.hflip_prob:
        image, mask = flip_pair(image, mask)
    return image, mask


def sample_rng(seed, epoch, sample_id):
    """Per-sample augmentation stream, stable across processes and
    independent of iteration order."""
    return np.random.default_rng([seed, epoch, zlib.crc32(sample_id.encode("utf-8"))])


# -- synthetic corpus ----------------------------------------------------

GENERATOR_VERSION = 1
_FG_FRACTION_RANGE = (0.01, 0.5)


def _ellipse_mask(size, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[0:size, 0:size]
    y = yy - cy
    x = xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = (x * ct + y * st) / rx
    v = (-x * st + y * ct) / ry
    return u * u + v * v <= 1.0


def _synthesize_one(rng, size):
    # low-frequency tinted background plus fine noise
    base = np.array([0.52, 0.33, 0.30]) + rng.uniform(-0.08, 0.08, size=3)
    coarse = rng.uniform(-0.09, 0.09, size=(3, 9, 9))
    bg = kernels.resize_bilinear_forward(coarse[None].astype(np.float32), size, size)[0]
    image = base[:, None, None] + bg + rng.normal(0.0, 0.015, size=(3, size, size))

    lo, hi = _FG_FRACTION_RANGE
    for _ in range(64):
        count = int(rng.integers(1, 4))
        params = []
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(count):
            cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
            ry, rx = rng.uniform(0.06 * size, 0.16 * size, size=2)
            theta = rng.uniform(0.0, np.pi)
            params.append((cy, cx, ry, rx, theta))
            mask |= _ellipse_mask(size, cy, cx, ry, rx, theta)
        frac = mask.mean()
        if lo <= frac <= hi:
            break
    for cy, cx, ry, rx, theta in params:
        yy, xx = np.mgrid[0:size, 0:size]
        y = yy - cy
        x = xx - cx
        ct, st = np.cos(theta), np.sin(theta)
        u = (x * ct + y * st) / rx
        v = (-x * st + y * ct) / ry
        r2 = u * u + v * v
        bump = np.exp(-(r2**1.5))
        tint = np.array([0.38, 0.16, 0.10]) * rng.uniform(0.8, 1.2)
        image += tint[:, None, None] * bump[None]
    image = np.clip(image, 0.0, 1.0)
    return image.astype(np.float32), mask


def generate_synthetic(n, seed, out_dir, image_size=IMAGE_SIZE):
    """Write n synthetic image/mask pairs (filled ellipses over smooth
    noise) plus a manifest; byte-identical for identical (n, seed)."""
    if n <= 0:
        raise ConfigError(f"synthetic corpus size must be >= 1, got {n}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        image, mask = _synthesize_one(rng, image_size)
        sid = f"synth_{i:04d}"
        ids.append(sid)
        Image.fromarray(
            (image.transpose(1, 2, 0) * 255.0).round().astype(np.uint8), mode="RGB"
        ).save(out / "images" / f"{sid}.png")
        Image.fromarray((mask * np.uint8(255)), mode="L").save(out / "masks" / f"{sid}.png")
    manifest = {
        "generator": "plutonet-synthetic",
        "version": GENERATOR_VERSION,
        "n": n,
        "seed": seed,
        "image_size": image_size,
        "ids": ids,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out
