import base64
import os
from unittest.mock import patch

import numpy as np
import pytest
from fastapi.testclient import TestClient

# Set env vars before importing the app
os.environ.pop("HGFX_CHECKPOINT", None)
os.environ.setdefault("HGFX_LOG_LEVEL", "WARNING")

from hgfx.config import ModelConfig, reset_settings  # noqa: E402
from hgfx.registry import LoadedModel  # noqa: E402
from hgfx.services.datasets import encode_ppm  # noqa: E402
from hgfx.services.graph_reason import HeteroGraphNet  # noqa: E402


def tiny_config(**overrides) -> ModelConfig:
    """N=4 nodes of width 8, two blocks, 64-bit: small enough for finite differences."""
    fields = dict(
        image_size=8, channels=3, patch_size=4, dim=8, mapped_dim=8, state_dim=4,
        k=2, dilation=1, blocks=2, dropout=0.0, dtype="float64",
    )
    fields.update(overrides)
    return ModelConfig(**fields)


def random_pixels(rng: np.random.Generator, batch: int = 2, size: int = 8, channels: int = 3) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(batch, size, size, channels))


def image_b64(pixels: np.ndarray) -> str:
    return base64.b64encode(encode_ppm(pixels)).decode()


@pytest.fixture(autouse=True)
def fresh_settings():
    reset_settings()
    yield
    reset_settings()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return HeteroGraphNet(tiny_config(), seed=3)


@pytest.fixture
def loaded_model(tiny_model):
    from hgfx.config import RunConfig

    return LoadedModel(tiny_model, RunConfig(model=tiny_model.cfg), "mem://tiny", ["cloud", "smoke"])


@pytest.fixture
def client(loaded_model):
    """A TestClient serving ``loaded_model`` instead of a checkpoint from HGFX_CHECKPOINT."""
    with patch("hgfx.routers.inference.get_model", return_value=loaded_model), \
         patch("hgfx.init_model"):
        from hgfx import app

        with TestClient(app) as c:
            yield c, loaded_model


@pytest.fixture
def empty_client():
    with patch("hgfx.routers.inference.get_model", return_value=None), \
         patch("hgfx.init_model"):
        from hgfx import app

        with TestClient(app) as c:
            yield c
