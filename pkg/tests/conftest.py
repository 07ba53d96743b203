import numpy as np
import pytest
from PIL import Image

from roie_net.data import SamplePair


def circle_samples(n, size, seed):
    """Synthetic bright-disk-on-dark images with exact disk masks."""
    rng = np.random.default_rng(seed)
    out = []
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(n):
        cy, cx = rng.uniform(size * 0.3, size * 0.7, 2)
        r = rng.uniform(size * 0.18, size * 0.32)
        mask = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float32)[None]
        base = rng.uniform(0.15, 0.3)
        img = np.full((3, size, size), base, np.float32)
        img += mask * rng.uniform(0.45, 0.6)
        img += rng.normal(0, 0.02, img.shape).astype(np.float32)
        img = np.clip(img, 0.0, 1.0)
        out.append(SamplePair(image=img, mask=mask, id=f"circle_{i:03d}"))
    return out


def write_dataset(root, samples):
    """Write samples as <root>/images/*.png + <root>/masks/*.png."""
    images = root / "images"
    masks = root / "masks"
    images.mkdir(parents=True, exist_ok=True)
    masks.mkdir(parents=True, exist_ok=True)
    for s in samples:
        rgb = (s.image.transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(rgb).save(images / f"{s.id}.png")
        Image.fromarray((s.mask[0] * 255).astype(np.uint8), mode="L").save(masks / f"{s.id}.png")
    return root


@pytest.fixture
def circles8():
    return circle_samples(8, 64, seed=7)


@pytest.fixture
def dataset_dir(tmp_path):
    samples = circle_samples(12, 64, seed=11)
    return write_dataset(tmp_path / "dataset", samples)
