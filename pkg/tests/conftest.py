from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from wildsplat.scene import OccluderSpec, SceneSpec, generate_scene, load_dataset, save_scene
from wildsplat.trainer import TrainConfig

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_scene_dir(tmp_path_factory):
    """A 32x32, 8-view scene with 15% occluders, written once per session."""
    spec = SceneSpec(n_views=8, width=32, height=32, n_gaussians=80, n_points=60,
                     occluders=OccluderSpec(coverage=0.15, size_range=(0.2, 0.5)))
    root = tmp_path_factory.mktemp("scene")
    save_scene(generate_scene(spec, seed=3), root)
    return root


@pytest.fixture
def tiny_data(tiny_scene_dir):
    return load_dataset(tiny_scene_dir)


def tiny_config(**kw) -> TrainConfig:
    base = dict(total_steps=12, n_static=24, n_transient=16, densify_from=2, densify_interval=2,
                eval_interval=4, n_superpixels=6, mask_warmup=0.0)
    base.update(kw)
    return TrainConfig(**base).validate()


# acceptance criteria report one line each at the end of the run, whatever
# the capture mode
ACCEPTANCE: dict[str, str] = {}


def record_criterion(n: str, ok: bool, detail: str):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
