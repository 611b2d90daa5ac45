import sys

import numpy as np
import pytest

from ccmtad.clustering import ClusterAssignment
from ccmtad.data import AnomalySegment, SynthSpec, synth_generate
from ccmtad.model import CausalMixerNet, ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_block_dataset():
    """Small planted-structure series: 2 blocks of 3 channels, one mean shift."""
    spec = SynthSpec(
        block_sizes=(3, 3),
        length=1500,
        anomaly_segments=(AnomalySegment(1200, 1260, "mean_shift", 3.0),),
        seed=3,
    )
    return synth_generate(spec)


def make_tiny_net(mixer="causal", L=4, C=3, d=6, n_blocks=2, seed=0, labels=(0, 0, 1)):
    assignment = ClusterAssignment(np.asarray(labels), int(max(labels)) + 1)
    cfg = ModelConfig(L=L, d=d, n_blocks=n_blocks, seed=seed, temporal_mixer=mixer, epochs=1, batch_size=8)
    return CausalMixerNet(C, assignment, cfg)


@pytest.fixture
def tiny_net():
    return make_tiny_net()


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance-criterion lines at the end of the run."""
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(results):
        terminalreporter.write_line(results[cid])
