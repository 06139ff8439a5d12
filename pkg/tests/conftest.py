import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from ocvt.worlds import SampleSet, WorldSpec, generate_sample


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny_world():
    return WorldSpec(num_frames=4, height=16, width=16, num_objects=3, seed=11)


@pytest.fixture(scope="session")
def tiny_set(tiny_world):
    return SampleSet.from_records([generate_sample(tiny_world, i) for i in range(48)])


@pytest.fixture(scope="session")
def small_world():
    return WorldSpec(seed=5)


@pytest.fixture(scope="session")
def small_set(small_world):
    return SampleSet.from_records([generate_sample(small_world, i) for i in range(64)])


def rand_boxes(rng: np.random.Generator, O: int, T: int):
    """Valid random box tracks: x1<x2, y1<y2, all in [0,1]."""
    lo = rng.uniform(0.0, 0.6, size=(O, T, 2))
    hi = lo + rng.uniform(0.05, 0.39, size=(O, T, 2))
    boxes = np.stack([lo[..., 0], lo[..., 1], hi[..., 0], hi[..., 1]], axis=-1)
    return torch.from_numpy(boxes.astype(np.float32))
