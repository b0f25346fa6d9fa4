import numpy as np
import pytest

from barrierforge.certsynth import compute_levels, synthesize_csc
from barrierforge.datagen import NoiseSpec, collect_trajectory
from barrierforge.models import build_benchmark, representative_subsystem


@pytest.fixture(scope="session")
def duffing_net():
    return build_benchmark("duffing_binary", 7)


@pytest.fixture(scope="session")
def duffing_model(duffing_net):
    return representative_subsystem(duffing_net)


@pytest.fixture(scope="session")
def duffing_record(duffing_model):
    return collect_trajectory(duffing_model, 18, 0.01, NoiseSpec(0.08), seed=0)


@pytest.fixture(scope="session")
def duffing_cert(duffing_model, duffing_record):
    cert = synthesize_csc(duffing_record, duffing_model.public(), lam=0.99, pi=1.0)
    cert.eta, cert.mu = compute_levels(cert.P, duffing_model.X0, duffing_model.Xa)
    return cert


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
