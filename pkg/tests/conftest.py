import numpy as np
import pytest

from trisdf import scenes
from trisdf.config import Config, ModelConfig, SampleConfig, TrainConfig


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A 3-view 16x16 sphere dataset shared across tests."""
    out = tmp_path_factory.mktemp("ds") / "sphere"
    scenes.generate_dataset("sphere", out, n_views=3, width=16, height=16,
                            seed=0)
    return scenes.load_dataset(str(out))


def tiny_config(**train_kw):
    """A config small enough for per-test training steps."""
    kw = dict(iterations=3, rays_per_batch=16, warmup=2,
              checkpoint_every=0, log_every=1)
    kw.update(train_kw)
    return Config(
        model=ModelConfig(resolutions=(8, 16), n_features=2, windows=(1, 3),
                          geom_width=16, geom_hidden=2, geom_skip_at=1,
                          theta_dim=8, color_width=16, color_hidden=1),
        sample=SampleConfig(n_coarse=4, n_fine=2, fine_rounds=1),
        train=TrainConfig(**kw),
    ).validate()
