import numpy as np
import pytest

from latentseg.generator import Generator, GeneratorSpec, ToyCompositor, ToyCompositorParams


class ConstantGenerator(Generator):
    """Ignores its input and renders one fixed image."""

    generator_id = "test-constant"

    def __init__(self, value=0.0, latent_dim=16, size=16):
        self.spec = GeneratorSpec(latent_dim, size, size)
        self.value = value

    def forward(self, values, labels=None):
        values, labels = self.check_batch(values, labels)
        return np.full((values.shape[0], 3, self.spec.height, self.spec.width), self.value)

    def vjp(self, values, labels, cotangent):
        values, labels = self.check_batch(values, labels)
        return np.zeros_like(values)


class LinearGenerator(Generator):
    """``G(z) = A z + b`` reshaped to an image; exactly linear in ``z``."""

    generator_id = "test-linear"

    def __init__(self, latent_dim=8, size=12, seed=0, gradient_mode="analytic"):
        self.spec = GeneratorSpec(latent_dim, size, size, gradient_mode=gradient_mode)
        rng = np.random.default_rng(seed)
        self.A = 0.05 * rng.standard_normal((3 * size * size, latent_dim))
        self.b = 0.1 * rng.standard_normal(3 * size * size)

    def forward(self, values, labels=None):
        values, labels = self.check_batch(values, labels)
        out = values @ self.A.T + self.b
        return out.reshape(values.shape[0], 3, self.spec.height, self.spec.width)

    def vjp(self, values, labels, cotangent):
        values, labels = self.check_batch(values, labels)
        return np.asarray(cotangent).reshape(values.shape[0], -1) @ self.A


@pytest.fixture(scope="session")
def toy():
    return ToyCompositor(ToyCompositorParams())


@pytest.fixture(scope="session")
def small_toy():
    return ToyCompositor(ToyCompositorParams(height=24, width=24))


def random_unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


@pytest.fixture(scope="session")
def toy_pair(toy):
    """The default-config direction pair on the 64x64 toy (about two minutes)."""
    from latentseg.probe import ProbeConfig, find_direction_pair
    return find_direction_pair(toy, ProbeConfig())
