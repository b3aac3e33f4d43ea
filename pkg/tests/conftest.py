import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from noisyfer.data import SyntheticSpec, generate_synthetic  # noqa: E402
from noisyfer.model import DESK_MODEL, Model  # noqa: E402
from noisyfer.tensor import Rng  # noqa: E402


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def desk_model():
    return Model(DESK_MODEL, seed=7)


@pytest.fixture
def jittered_model():
    """Desk model with non-zero shifts and gate vectors.

    Zero shifts put ReLU inputs on the kink and zero gate vectors make every
    attention weight 0.5; both would let reference checks pass trivially.
    """
    m = Model(DESK_MODEL, seed=7)
    r = Rng(99)
    for name, p in m.named_parameters():
        if ".shift" in name or name in ("channel.w", "frame.w"):
            p.data = p.data + r.normal(0.0, 0.3, p.shape)
    return m


@pytest.fixture(scope="session")
def tiny_data():
    spec = SyntheticSpec(labelled_per_class=3, unlabelled_per_class=6, validation_per_class=2)
    return generate_synthetic(spec, Rng(5))


def random_video(rng: Rng, n: int = 3, side: int = 8) -> np.ndarray:
    return rng.uniform(0.0, 1.0, (n, 9, side, side))


# -- acceptance reporting ---------------------------------------------------------
#
# Tests marked ``@pytest.mark.criterion(n, "title")`` get one PASS/FAIL line
# each in the terminal summary.

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = mark.args
    detail = getattr(item, "criterion_detail", "")
    _CRITERIA[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {status}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
