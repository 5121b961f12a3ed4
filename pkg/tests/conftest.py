import numpy as np
import pytest

from rescodec.autodiff import rng
from rescodec.model import EntropyModel, ModelConfig, checkpoint_bytes, checkpoint_from_bytes
from rescodec.ppm import write_image


def tiny_config(channels: int, **overrides) -> ModelConfig:
    kw = dict(d=32, layers=1, heads=2, mixtures=2, patch_size=4,
              global_tokens=4, channels=channels)
    kw.update(overrides)
    return ModelConfig(**kw)


def model_from_seed(cfg: ModelConfig, seed: int, dtype=np.float32) -> EntropyModel:
    """Init -> serialized checkpoint -> model, so checkpoint_hash is set."""
    fresh = EntropyModel.initialize(cfg, seed=seed, dtype=np.float64)
    ckpt = checkpoint_from_bytes(checkpoint_bytes(fresh.to_checkpoint(seed=seed)))
    return EntropyModel.from_checkpoint(ckpt, dtype=dtype)


@pytest.fixture(scope="session")
def rgb_model():
    return model_from_seed(tiny_config(3), seed=105)


@pytest.fixture(scope="session")
def gray_model():
    return model_from_seed(tiny_config(1), seed=7)


def smooth_image(g, h, w, c, noise=2.0):
    """Photo-like content: bilinear-upsampled low-frequency field plus noise."""
    base = g.normal(0.0, 1.0, (h // 8 + 2, w // 8 + 2, c))
    ys = np.linspace(0, base.shape[0] - 1.001, h)
    xs = np.linspace(0, base.shape[1] - 1.001, w)
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    img = ((1 - fy) * (1 - fx) * base[y0][:, x0] + (1 - fy) * fx * base[y0][:, x0 + 1]
           + fy * (1 - fx) * base[y0 + 1][:, x0] + fy * fx * base[y0 + 1][:, x0 + 1])
    img = 128.0 + 60.0 * img + g.normal(0.0, noise, (h, w, c))
    return np.clip(img, 0, 255).astype(np.uint8)


def laplace_textured_image(g, h, w, c, scale=3.0):
    """Smooth base plus discretized-Laplace texture (synthetic residual source)."""
    base = smooth_image(g, h, w, c, noise=0.0).astype(np.float64)
    img = base + np.round(g.laplace(0.0, scale, (h, w, c)))
    return np.clip(img, 0, 255).astype(np.uint8)


def random_test_image(g, h, w, c):
    kind = int(g.integers(0, 3))
    if kind == 0:
        return g.integers(0, 256, (h, w, c)).astype(np.uint8)
    if kind == 1:  # separable gradient
        ramp = (np.arange(h)[:, None, None] * 7 + np.arange(w)[None, :, None] * 3
                + np.arange(c)[None, None, :] * 40 + int(g.integers(0, 256)))
        return (ramp % 256).astype(np.uint8)
    return smooth_image(g, h, w, c)


def write_corpus(path, count, size, channels, seed, maker=smooth_image):
    path.mkdir(parents=True, exist_ok=True)
    g = rng(seed)
    names = []
    for i in range(count):
        img = maker(g, size, size, channels)
        name = path / f"img{i:03d}.{'ppm' if channels == 3 else 'pgm'}"
        write_image(name, img)
        names.append(name)
    return names
