import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def smooth_image(seed: int, size: int = 64) -> np.ndarray:
    """Low-frequency sinusoidal RGB test image in [0.1, 0.9]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    r = np.random.default_rng(100 + seed)
    chans = []
    for _ in range(3):
        f = r.uniform(0.5, 2.5, 2)
        ph = r.uniform(0, 2 * np.pi, 2)
        chans.append(0.5 + 0.2 * np.sin(2 * np.pi * f[0] * xx + ph[0]) + 0.2 * np.cos(2 * np.pi * f[1] * yy + ph[1]))
    return np.stack(chans)


def noisy_pairs(n: int = 4, size: int = 64, sigma: float = 25.0):
    from aiorestore.degrade import add_gaussian_noise
    clean = [smooth_image(i, size) for i in range(n)]
    return [add_gaussian_noise(c, sigma, seed=i) for i, c in enumerate(clean)], clean


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_data(tmp_path):
    """Four noisy/clean PNG pairs with a manifest on disk."""
    from aiorestore import io as imio
    from aiorestore.degrade import generate_dataset, parse_composite
    clean_dir = tmp_path / "clean"
    clean_dir.mkdir()
    for i in range(4):
        imio.write_image(clean_dir / f"img{i}.png", smooth_image(i, 32))
    rows = generate_dataset(clean_dir, tmp_path / "data", [parse_composite("gaussian_noise sigma=25 seed=3")], 4)
    return tmp_path / "data" / "manifest.txt", rows


@pytest.fixture
def tiny_config():
    from aiorestore.config import desk_scale_preset
    return desk_scale_preset().replace(crop_size=16, checkpoint_every=2).with_optimizer(total_iterations=4, batch_size=2)


def guidance_for(cfg, imgs, dtype=torch.float64, dropout_rate=0.0, seed=0):
    """Stub guidance bundle for a list of ``[C, H, W]`` images."""
    from aiorestore.guidance import StubProviders, collate_guidance
    prov = StubProviders.from_config(cfg)
    return collate_guidance([prov.guidance(im) for im in imgs], dtype, dropout_rate=dropout_rate, seed=seed)


ACCEPTANCE = {}


def record_criterion(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
