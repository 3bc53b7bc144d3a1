import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from farbar.audio import write_wav  # noqa: E402

SR = 22050


def harmonic_clip(seconds, f0, seed, noise=0.01):
    """Harmonic tone with a slow amplitude wobble and a small noise floor."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * SR)) / SR
    x = sum(0.2 / k * np.sin(2 * np.pi * f0 * k * t + rng.uniform(0, 6)) for k in range(1, 15))
    x = x * (0.6 + 0.4 * np.sin(2 * np.pi * 1.5 * t + seed))
    return x + noise * rng.standard_normal(t.size)


def write_corpus(directory, n=4, seconds=3.0):
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        write_wav(directory / f"clip{i}.wav", harmonic_clip(seconds, 120 + 30 * i, i), SR)
    return directory


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    return write_corpus(tmp_path_factory.mktemp("corpus"))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion, reported in the summary")


_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    # the call phase records the verdict; a setup or teardown error turns it into FAIL
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    _ACCEPTANCE[number] = f"{status}  criterion {number:>2}: {title}" + (f"  [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
