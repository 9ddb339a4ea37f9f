import numpy as np
import pytest

from propgcn.intervals import Interval, Proposal
from propgcn.synthetic import SyntheticSpec, generate_videos


def _make_proposals(bounds, features=None):
    proposals = []
    for i, (start, end) in enumerate(bounds):
        x = np.ones(2) if features is None else np.asarray(features[i], dtype=np.float64)
        proposals.append(Proposal(i, Interval(start, end), x, np.concatenate([x, x, x])))
    return proposals


@pytest.fixture
def make_proposals():
    """Factory for proposals over (start, end) bounds; unit features unless given."""
    return _make_proposals


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(
        num_videos=2,
        num_classes=2,
        proposals_per_video=12,
        feature_dim=8,
        instances_per_video=2,
        seed=7,
    )


@pytest.fixture
def tiny_records(tiny_spec):
    return generate_videos(tiny_spec)


@pytest.fixture
def five_node_proposals(rng):
    bounds = [(0.0, 10.0), (1.0, 11.0), (2.0, 12.0), (15.0, 25.0), (16.0, 24.0)]
    features = rng.uniform(0.1, 1.0, size=(5, 3))
    return _make_proposals(bounds, features)
