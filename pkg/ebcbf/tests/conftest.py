"""pytest fixtures for ebcbf"""
import os

import numpy as np
import pytest

from ..gp import PhsGaussianProcess
from ..kernels import KernelHyperparams
from ..sim import MassSpring, Simulation, generate_dataset


here = os.path.abspath(os.path.dirname(__file__))
root = os.path.join(here, os.pardir, os.pardir)
testing_dir = os.path.join(root, 'testing')


def pytest_configure(config):
    """This function has meaning to pytest, for more information, see:
    https://docs.pytest.org/en/stable/reference.html#pytest.hookspec.pytest_configure
    """
    # register our custom markers
    config.addinivalue_line(
        "markers", "slow: desk-scale acceptance run (full fits, Monte-Carlo verification)"
    )


@pytest.fixture
def system():
    return MassSpring()


@pytest.fixture
def phs(system):
    return system.phs()


@pytest.fixture
def hp():
    return KernelHyperparams.from_std(1.0, [1.0, 1.0], 0.05)


@pytest.fixture
def short_sim():
    """Two seconds of the oscillator, every point kept"""
    return Simulation(t_stop=2.0, dt=0.05, noise_std=0.05, keep_probability=1.0, seed=1)


@pytest.fixture
def small_dataset(system, short_sim):
    return generate_dataset(system, short_sim)


@pytest.fixture
def tiny_dataset(system):
    """Five noisy samples at irregular times"""
    sim = Simulation(t_stop=1.0, dt=0.1, noise_std=0.05, keep_probability=1.0, seed=3)
    return generate_dataset(system, sim).subset([0, 1, 3, 4, 7])


@pytest.fixture
def model(small_dataset, phs, hp):
    return PhsGaussianProcess(order=2).condition(small_dataset, phs, hp)


@pytest.fixture
def orbit_dataset(system):
    """One full period of the unit-energy orbit, sparsely sampled"""
    sim = Simulation(
        t_stop=2 * np.pi, dt=0.02, noise_std=0.01, keep_probability=0.25, seed=2, x0=[1.0, 0.0]
    )
    return generate_dataset(system, sim)


@pytest.fixture
def orbit_model(orbit_dataset, phs):
    hp = KernelHyperparams.from_std(1.0, [1.5, 1.5], 0.01)
    return PhsGaussianProcess(order=2).condition(orbit_dataset, phs, hp)


def regime_simulation():
    """20 s of the oscillator driven at resonance from rest, every 4 ms, half kept

    u = 0.2 sin(t) grows the orbit radius by about 0.1 per second, so the
    samples spiral out over the whole [-1.5, 1.5]^2 evaluation grid.
    """
    return Simulation(
        t_stop=20.0, dt=4e-3, noise_std=0.05, keep_probability=0.5, seed=0,
        x0=[0.0, 0.0], input_amplitude=0.2, input_frequency=1 / (2 * np.pi),
    )


@pytest.fixture(scope="session")
def regime_model():
    """Fit on the resonant-excitation data regime

    Slow: only request it from tests marked ``slow``.
    """
    system = MassSpring()
    data = generate_dataset(system, regime_simulation())
    return PhsGaussianProcess(order=2, max_training_points=400).fit(data, system.phs())
