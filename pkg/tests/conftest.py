import numpy as np
import pytest
from hypothesis import settings

from radplan.trajectory import OfflineDataset, Trajectory

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")


def random_trajectory(rng: np.random.Generator, traj_id: int = 0, length: int | None = None,
                      ds: int = 3, da: int = 2) -> Trajectory:
    T = length or int(rng.integers(2, 40))
    return Trajectory(
        id=traj_id,
        states=rng.normal(size=(T, ds)),
        actions=rng.normal(size=(T, da)),
        rewards=rng.uniform(-1.0, 1.0, size=T),
    )


def random_dataset(rng: np.random.Generator, n_traj: int = 5, **kwargs) -> OfflineDataset:
    trajs = [random_trajectory(rng, traj_id=i, **kwargs) for i in range(n_traj)]
    return OfflineDataset.build(trajs, gamma=0.99)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
