"""Dataset ingestion, deterministic splitting, resizing, augmentation, and
batching.

Expected layout: `<root>/images/*.{jpg,png}` and `<root>/masks/*.png` with
matching file stems. All randomness is keyed by one integer seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, ContractError, IngestionError

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")
MASK_BINARIZE_THRESHOLD = 128  # on 8-bit mask values


@dataclass
class SamplePair:
    """One image (3,H,W float in [0,1]) with its binary mask (1,H,W in {0,1})."""

    image: np.ndarray
    mask: np.ndarray
    id: str


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        total = self.train + self.val + self.test
        if min(self.train, self.val, self.test) < 0 or abs(total - 1.0) > 1e-9:
            raise ConfigError(
                f"split ratios must be non-negative and sum to 1, got "
                f"({self.train}, {self.val}, {self.test})"
            )
        if self.seed < 0:
            raise ConfigError(f"split seed must be non-negative, got {self.seed}")


@dataclass(frozen=True)
class AugmentConfig:
    """Probabilities and magnitudes for the training-time transforms.

    Geometric transforms (flips) apply to image and mask alike; photometric
    transforms (noise, blur, brightness/contrast) touch only the image.
    """

    hflip_p: float = 0.5
    vflip_p: float = 0.5
    noise_p: float = 0.2
    noise_sigma: float = 0.02
    blur_p: float = 0.2
    blur_kernel: int = 3
    brightness_contrast_p: float = 0.2
    brightness_delta: float = 0.2
    contrast_range: tuple = (0.8, 1.2)
    augment_validation: bool = False
    seed: Optional[int] = None

    @staticmethod
    def disabled() -> "AugmentConfig":
        return AugmentConfig(hflip_p=0, vflip_p=0, noise_p=0, blur_p=0, brightness_contrast_p=0)

    def to_dict(self) -> dict:
        return {
            "hflip_p": self.hflip_p,
            "vflip_p": self.vflip_p,
            "noise_p": self.noise_p,
            "noise_sigma": self.noise_sigma,
            "blur_p": self.blur_p,
            "blur_kernel": self.blur_kernel,
            "brightness_contrast_p": self.brightness_contrast_p,
            "brightness_delta": self.brightness_delta,
            "contrast_range": list(self.contrast_range),
            "augment_validation": self.augment_validation,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "AugmentConfig":
        d = dict(d)
        if "contrast_range" in d:
            d["contrast_range"] = tuple(d["contrast_range"])
        return AugmentConfig(**d)


@dataclass(frozen=True)
class DataConfig:
    root: str
    image_size: int = 256
    split: SplitSpec = field(default_factory=SplitSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def to_dict(self) -> dict:
        return {
            "root": str(self.root),
            "image_size": self.image_size,
            "split": {
                "train": self.split.train,
                "val": self.split.val,
                "test": self.split.test,
                "seed": self.split.seed,
            },
            "augment": self.augment.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "DataConfig":
        return DataConfig(
            root=d["root"],
            image_size=int(d.get("image_size", 256)),
            split=SplitSpec(**d.get("split", {})),
            augment=AugmentConfig.from_dict(d.get("augment", {})),
        )


# ---------------------------------------------------------------------------
# ingestion


def decode_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as e:
        raise IngestionError(f"unreadable image {path}: {e}") from e
    return arr.transpose(2, 0, 1)


def decode_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except Exception as e:
        raise IngestionError(f"unreadable mask {path}: {e}") from e
    return (arr >= MASK_BINARIZE_THRESHOLD).astype(np.float32)[None]


def load_dataset(images_dir, masks_dir) -> list:
    """Load image/mask pairs matched by file stem, sorted by stem."""
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    for d in (images_dir, masks_dir):
        if not d.is_dir():
            raise IngestionError(f"dataset directory not found: {d}")
    image_paths = sorted(
        (p for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS),
        key=lambda p: p.stem,
    )
    pairs = []
    for img_path in image_paths:
        mask_path = masks_dir / (img_path.stem + ".png")
        if not mask_path.exists():
            raise IngestionError(f"missing mask for image stem {img_path.stem!r}")
        image = decode_image(img_path)
        mask = decode_mask(mask_path)
        if image.shape[1:] != mask.shape[1:]:
            raise IngestionError(
                f"image/mask size mismatch for {img_path.stem!r}: "
                f"{image.shape[1:]} vs {mask.shape[1:]}"
            )
        pairs.append(SamplePair(image=image, mask=mask, id=img_path.stem))
    return pairs


def split(pairs: Sequence, spec: SplitSpec):
    """Deterministic shuffle then contiguous slices:
    floor(train*n), floor(val*n), remainder."""
    n = len(pairs)
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = math.floor(spec.train * n)
    n_val = math.floor(spec.val * n)
    shuffled = [pairs[i] for i in order]
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
    )


# ---------------------------------------------------------------------------
# resizing


def _resize_channel(ch: np.ndarray, size: int, resample) -> np.ndarray:
    im = Image.fromarray(ch, mode="F")
    return np.asarray(im.resize((size, size), resample), dtype=np.float32)


def resize(sample: SamplePair, target: int) -> SamplePair:
    """Bilinear image resize; nearest-neighbor mask resize, re-binarized."""
    if sample.image.shape[1:] == (target, target):
        return sample
    image = np.stack(
        [_resize_channel(ch, target, Image.BILINEAR) for ch in sample.image]
    )
    mask = _resize_channel(sample.mask[0], target, Image.NEAREST)[None]
    mask = (mask >= 0.5).astype(np.float32)
    return SamplePair(image=np.clip(image, 0.0, 1.0), mask=mask, id=sample.id)


# ---------------------------------------------------------------------------
# augmentation


def _box_blur(image: np.ndarray, kernel: int) -> np.ndarray:
    if kernel % 2 == 0 or kernel < 1:
        raise ConfigError(f"blur kernel must be odd and positive, got {kernel}")
    pad = kernel // 2
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    h, w = image.shape[1:]
    out = np.zeros_like(image)
    for di in range(kernel):
        for dj in range(kernel):
            out += padded[:, di : di + h, dj : dj + w]
    return out / (kernel * kernel)


def augment(sample: SamplePair, config: AugmentConfig, rng: np.random.Generator) -> SamplePair:
    """Apply transforms in fixed order: hflip, vflip, noise, blur, then
    brightness/contrast. The image is clamped back to [0, 1]; the mask is
    touched only by the flips."""
    image, mask = sample.image, sample.mask
    if rng.random() < config.hflip_p:
        image = image[:, :, ::-1]
        mask = mask[:, :, ::-1]
    if rng.random() < config.vflip_p:
        image = image[:, ::-1, :]
        mask = mask[:, ::-1, :]
    if rng.random() < config.noise_p:
        image = np.clip(
            image + rng.normal(0.0, config.noise_sigma, image.shape).astype(np.float32), 0.0, 1.0
        )
    if rng.random() < config.blur_p:
        image = _box_blur(np.ascontiguousarray(image, dtype=np.float32), config.blur_kernel)
    if rng.random() < config.brightness_contrast_p:
        delta = rng.uniform(-config.brightness_delta, config.brightness_delta)
        factor = rng.uniform(*config.contrast_range)
        image = np.clip((image - 0.5) * factor + 0.5 + delta, 0.0, 1.0)
    return SamplePair(
        image=np.ascontiguousarray(image, dtype=np.float32),
        mask=np.ascontiguousarray(mask, dtype=np.float32),
        id=sample.id,
    )


# ---------------------------------------------------------------------------
# batching


def batches(
    pairs: Sequence[SamplePair],
    batch_size: int,
    shuffle_seed: int,
    epoch: int,
    transform=None,
) -> Iterator[tuple]:
    """Yield (images, masks) arrays with a per-epoch shuffle keyed by
    (shuffle_seed, epoch). The final partial batch is retained."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if len(pairs) == 0:
        raise ContractError("cannot iterate batches of an empty dataset")
    order = np.random.default_rng((shuffle_seed, epoch)).permutation(len(pairs))
    for start in range(0, len(order), batch_size):
        chunk = [pairs[i] for i in order[start : start + batch_size]]
        if transform is not None:
            chunk = [transform(s) for s in chunk]
        yield (
            np.stack([s.image for s in chunk]),
            np.stack([s.mask for s in chunk]),
        )


def stack_pairs(pairs: Sequence[SamplePair]) -> tuple:
    return np.stack([s.image for s in pairs]), np.stack([s.mask for s in pairs])
