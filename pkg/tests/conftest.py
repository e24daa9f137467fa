import numpy as np
import pytest

from fedadapt.model import ModelSpec, init_weights
from fedadapt.simnet import ClientSetup
from fedadapt.streams import SequenceSpec, make_domain


@pytest.fixture
def spec():
    return ModelSpec()


@pytest.fixture
def w0(spec):
    return init_weights(spec)


def setup(cid, names, frames, seed, difficulty="easy", **kw):
    """ClientSetup over ``names``, ``frames`` frames per segment."""
    doms = {n: make_domain(n, seed, difficulty, **kw) for n in names}
    seq = SequenceSpec(tuple((n, frames) for n in names))
    return ClientSetup(cid, seq, doms, stream_seed=seed * 100 + cid, rng_seed=seed * 100 + 50 + cid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
