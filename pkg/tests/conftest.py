from __future__ import annotations

import numpy as np
import pytest

from liftfield.fields import FieldConfig, FieldModel
from liftfield.scenegen import GenConfig, generate_dataset


def micro_field_config(**overrides) -> FieldConfig:
    """A field small enough for exhaustive finite-difference sweeps."""
    base = dict(
        cube_half=1.0,
        density_res=3,
        color_res=3,
        color_channels=2,
        dir_enc_order=0,
        color_hidden=5,
        color_layers=2,
        embed_dim=2,
        instance_hidden=5,
        instance_layers=2,
        semantic_classes=2,
        semantic_hidden=4,
        semantic_layers=2,
    )
    base.update(overrides)
    return FieldConfig(**base)


@pytest.fixture
def micro_model() -> FieldModel:
    return FieldModel.create(micro_field_config(), seed=3)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Four objects, six views, 24x24; shared by anything that needs real frames."""
    cfg = GenConfig(n_objects=4, seed=11, width=24, height=24, views=6)
    return generate_dataset(cfg)
