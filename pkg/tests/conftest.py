import numpy as np
import pytest

from calibra.data import ShiftConfig, generate_domain_pair
from calibra.nets import CalibratorConfig, build_calibrator, build_classifier, desk_classifier_spec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pair():
    """Tiny 16 px domain pair (inverted + textured target)."""
    shift = ShiftConfig.parse("contrast_inversion, additive_texture(0.4, 0.5)")
    return generate_domain_pair(4, 12, 16, shift, seed=7)


@pytest.fixture
def small_classifier():
    return build_classifier(desk_classifier_spec((1, 16, 16), 4, widths=(3, 4), hidden=8), seed=3)


@pytest.fixture
def small_calibrator():
    return build_calibrator(CalibratorConfig(0.3, width=2, depth=1, blocks=1), (1, 16, 16), seed=5)


def randomize(params, rng, scale=0.3):
    """Fill every tensor with noise so the map is far from the identity."""
    for t in params.values():
        t.data[...] = rng.standard_normal(t.shape) * scale
    return params


# acceptance verdict lines, printed in the terminal summary whatever the capture mode
ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    lines = request.config.stash.setdefault(ACCEPTANCE_LINES, [])

    def record(label: str, passed: bool, detail: str) -> bool:
        lines.append(f"{label:<14} {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
