"""Shared fixtures: small synthetic plants and a tiny encoder config."""

from __future__ import annotations

import numpy as np
import pytest

from thermoscan.encoder import EncoderConfig
from thermoscan.synth import SynthConfig, synth_generate

UNIFORM_MIX = {name: 0.03 for name in
               ("Mh", "Mp", "Sh", "Sp", "Pid", "Cm+", "Cs+", "C", "D", "Chs")}


@pytest.fixture(scope="session")
def tiny_plant_config() -> SynthConfig:
    return SynthConfig(
        plant_id=1,
        base_temp_c=30.0,
        noise_sigma=0.25,
        cells_x=5,
        cells_y=3,
        image_height=24,
        image_width=32,
        fault_mix=dict(UNIFORM_MIX),
        images_per_module=3,
        module_count=40,
        seed=11,
    )


@pytest.fixture(scope="session")
def tiny_plant(tiny_plant_config):
    return synth_generate(tiny_plant_config)


@pytest.fixture(scope="session")
def tiny_target_plant():
    config = SynthConfig(
        plant_id=2,
        base_temp_c=22.0,
        noise_sigma=0.35,
        cells_x=6,
        cells_y=3,
        image_height=20,
        image_width=28,
        fault_mix=dict(UNIFORM_MIX),
        images_per_module=3,
        module_count=30,
        seed=12,
    )
    return synth_generate(config)


@pytest.fixture
def tiny_encoder_config() -> EncoderConfig:
    return EncoderConfig(
        conv_stages=((4, 3, 2), (8, 3, 2)),
        feature_dim=8,
        head_hidden=8,
        embed_dim=4,
        init_seed=5,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
