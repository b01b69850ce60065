import numpy as np
import pytest

from birdcrnn.features import FeatureMatrix


def make_labeled_set(n_per_class, n_frames=12, n_bands=8, seed=0, prefix=""):
    """Separable toy set in feature space: positives get a burst in the upper bands."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_per_class):
        neg = rng.standard_normal((n_frames, n_bands)) * 0.3
        out.append((FeatureMatrix(values=neg, clip_id=f"{prefix}neg{i}"), 0))
        pos = rng.standard_normal((n_frames, n_bands)) * 0.3
        onset = int(rng.integers(0, n_frames - 3))
        pos[onset : onset + 3, n_bands // 2 :] += 1.5
        out.append((FeatureMatrix(values=pos, clip_id=f"{prefix}pos{i}"), 1))
    return out


@pytest.fixture
def labeled_set_factory():
    return make_labeled_set
