import numpy as np
import pytest

from ppgrhythm.model import ModelSpec, random_weights
from ppgrhythm.signal import Record

TINY_SPEC = ModelSpec(conv_blocks=((2, 5, 4), (2, 3, 4)), lstm_hidden=4)


@pytest.fixture
def tiny_spec():
    return TINY_SPEC


@pytest.fixture
def tiny_weights():
    return random_weights(TINY_SPEC, seed=3)


@pytest.fixture
def default_weights():
    return random_weights(ModelSpec(), seed=11)


def make_record(values, labels=None, subject="s0", fs=20.0):
    values = np.asarray(values, dtype=float)
    if labels is None:
        labels = np.zeros(values.size, dtype=np.int8)
    return Record.from_arrays(subject, values, labels, fs)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
