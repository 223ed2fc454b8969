import sys

import numpy as np
import pytest

from locgen.model import ModelConfig, init_params
from locgen.scene_synth import Scene


def micro_config(**kw):
    base = dict(image_size=8, patch_size=4, d_model=16, n_layers=1, n_heads=2, num_bins=8,
                num_classes=2, in_channels=4)
    base.update(kw)
    return ModelConfig(**base)


def random_params(cfg, seed=0, scale=0.3, dtype=np.float64):
    """Init params plus noise so that every weight (including the head) matters."""
    p = init_params(cfg, dtype=dtype)
    rs = np.random.default_rng(seed)
    for k, a in p.tensors.items():
        a += rs.normal(0, scale, a.shape).astype(dtype)
    return p


def random_scene(cfg, seed=0, scene_id="s0"):
    rs = np.random.default_rng(seed)
    grid = rs.integers(0, 2, (cfg.in_channels, cfg.image_size, cfg.image_size)).astype(np.uint8)
    return Scene(grid, cfg.image_size, scene_id, seed)


@pytest.fixture
def micro():
    cfg = micro_config()
    return cfg, random_params(cfg), random_scene(cfg)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.format_results():
        terminalreporter.write_line(line)
