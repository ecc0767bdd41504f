import sys

import pytest
import torch

from lorapatch.dataio import synth_faces
from lorapatch.model_zoo import GeneratorSpec, build_toy_generator, freeze

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_spec():
    return GeneratorSpec(base_width=16, num_downsample=2, num_residual=2, num_upsample=2, seed=7)


@pytest.fixture(scope="session")
def toy_spec():
    return GeneratorSpec(base_width=32, num_downsample=2, num_residual=2, num_upsample=2, seed=7)


@pytest.fixture
def small_gen(small_spec):
    return freeze(build_toy_generator(small_spec))


@pytest.fixture(scope="session")
def faces32():
    return synth_faces(16, 32, seed=11)


@pytest.fixture(scope="session")
def faces64():
    return synth_faces(8, 64, seed=12)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'} - {detail}")
