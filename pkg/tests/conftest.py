import numpy as np
import pytest
import torch

from mintent import synthgen
from mintent.datamodel import EMO_DIM, POSE_DIM, SequenceRecord

torch.set_num_threads(1)


def make_record(T=20, seq_id="s0", participant="p0", env=1, labels=None, seed=0, labeled=True):
    rng = np.random.default_rng(seed)
    pose = rng.uniform(0, 1, size=(T, POSE_DIM))
    emo = rng.dirichlet(np.ones(EMO_DIM), size=T)
    if labels is None and labeled:
        labels = (np.arange(T) >= T // 2).astype(int)
    return SequenceRecord(seq_id, participant, env, pose, emo, labels)


@pytest.fixture
def record_factory():
    return make_record


@pytest.fixture(scope="session")
def small_standard():
    return synthgen.generate(synthgen.preset("standard", n_sequences=24, seed=3))


@pytest.fixture(scope="session")
def small_separable():
    return synthgen.generate(synthgen.preset("separable", n_sequences=24, seed=4))


ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion and fail the test when it does not hold."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
