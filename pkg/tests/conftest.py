import pytest
import torch
from hypothesis import HealthCheck, settings

from refguard.backends import make_linear_schedule, make_toy_backend
from refguard.conditioners import default_conditioners

settings.register_profile(
    "desk",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("desk")


def seeded_image(seed: int, h: int = 16, w: int = 16) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.rand(h, w, 3, generator=g)


def fval(t: torch.Tensor) -> float:
    """float() that tolerates grad-carrying tensors."""
    return float(t.detach())


@pytest.fixture(scope="session")
def schedule():
    return make_linear_schedule()


@pytest.fixture(scope="session")
def toy_backend():
    return make_toy_backend(101)


@pytest.fixture(scope="session")
def conditioners():
    return default_conditioners()


@pytest.fixture
def image16():
    return seeded_image(7)


@pytest.fixture
def image32():
    return seeded_image(7, 32, 32)
