import numpy as np
import pytest

from event_io import EVENT_DTYPE, BoundingBox, EventStream, Sample, SynthConfig, synth_moving_box
from snn_core import compact_spec


def make_stream(rows, resolution=(8, 8), duration_us=None):
    """Build an EventStream from (x, y, t, p) tuples"""
    events = np.array(rows, dtype=EVENT_DTYPE)
    if duration_us is None:
        duration_us = int(events["t"][-1]) + 1 if len(events) else 0
    return EventStream(events, resolution, duration_us)


@pytest.fixture
def small_stream():
    return make_stream([(0, 0, 0, 1), (1, 2, 5, 0), (3, 3, 10, 1), (3, 3, 12, 1)], duration_us=20)


@pytest.fixture
def tiny_synth_config():
    return SynthConfig(
        resolution=(16, 16),
        box_size=(6, 6),
        duration_us=4000,
        step_us=500,
        window_us=1000,
        noise_rate=0.0,
    )


@pytest.fixture
def tiny_samples(tiny_synth_config):
    return [synth_moving_box(tiny_synth_config, seed) for seed in range(6)]


@pytest.fixture
def tiny_spec():
    return compact_spec(resolution=16, n_out=8, channels=(2, 2, 2, 2), hidden=8)


@pytest.fixture
def static_sample(small_stream):
    return Sample(stream=small_stream, boxes=[BoundingBox(1, 1, 5, 5)], name="static")
