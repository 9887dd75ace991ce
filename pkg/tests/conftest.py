"""Shared fixtures: default model/hardware profiles and small traces."""

import pytest

import epdsim as E


@pytest.fixture(scope="session")
def model():
    return E.MODEL_PRESETS["llava-1.5-7b"]


@pytest.fixture(scope="session")
def hw():
    return E.DEFAULT_HARDWARE


@pytest.fixture(scope="session")
def slo():
    return E.SloSpec(4.0, 0.08)


@pytest.fixture(scope="session")
def toy_model():
    """Small profile for hand-checkable arithmetic."""
    return E.ModelProfile(
        lang_hidden=64, lang_heads=4, lang_layers=1,
        vision_hidden=64, vision_heads=4, vision_layers=1)


@pytest.fixture(scope="session")
def small_trace(slo):
    return E.synth_trace(seed=3, n_requests=40, rate=3.0,
                         image_count_dist=[0, 1, 1], visual_token_choices=576,
                         prompt_dist=[30, 60], output_dist=[40, 90], slo=slo)
