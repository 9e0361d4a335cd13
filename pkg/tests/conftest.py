import numpy as np
import pytest

from fpverify.calibration import build_thresholds, calibrate
from fpverify.engine import DeviceProfile, default_profiles
from fpverify.models import build_chain, build_mlp, build_transformer
from fpverify.tensor import Rng

CORE_PROFILES = default_profiles()
CALIBRATION_EXTRAS = [
    DeviceProfile("perm3", "permuted", perm_seed=3),
    DeviceProfile("blk4", "blocked", block_size=4),
]
COMMITTEE_POOL = CORE_PROFILES + [
    DeviceProfile("perm11", "permuted", perm_seed=11),
    DeviceProfile("blk8", "blocked", block_size=8),
]


@pytest.fixture(scope="session")
def calibrated_mlp():
    spec = build_mlp(seed=0)
    rng = Rng(101)
    dataset = [spec.make_inputs(rng) for _ in range(50)]
    env = calibrate(spec.graph, dataset, CORE_PROFILES + CALIBRATION_EXTRAS)
    thresholds = build_thresholds(env, alpha=3.0)
    return spec, thresholds, env


@pytest.fixture(scope="session")
def calibrated_transformer():
    spec = build_transformer(seed=0)
    rng = Rng(101)
    dataset = [spec.make_inputs(rng) for _ in range(50)]
    env = calibrate(spec.graph, dataset, CORE_PROFILES + CALIBRATION_EXTRAS)
    thresholds = build_thresholds(env, alpha=3.0)
    return spec, thresholds, env


@pytest.fixture(scope="session")
def calibrated_chain_2048():
    """The localization chain: the dispute input is part of the calibration
    set, making honest spine-child comparisons exact replays of calibrated
    samples."""
    spec = build_chain(n_nodes=2048, matmul_period=128, seed=5)
    rng = Rng(9)
    dispute_input = spec.make_inputs(rng)
    dataset = [dispute_input] + [spec.make_inputs(rng) for _ in range(15)]
    env = calibrate(spec.graph, dataset, CORE_PROFILES)
    thresholds = build_thresholds(env, alpha=3.0)
    return spec, dispute_input, thresholds
