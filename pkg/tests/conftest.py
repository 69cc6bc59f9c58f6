import functools

import numpy as np
import pytest

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {k}: {detail}")


@functools.lru_cache(maxsize=None)
def synth_case(seed, n_arrows=20, max_tilt_deg=30.0, min_separation_mm=0.0):
    from target_scorer.synth import generate_case

    return generate_case(seed, n_arrows, max_tilt_deg, min_separation_mm=min_separation_mm)


@pytest.fixture(scope="session")
def canonical_face():
    from target_scorer.synth import render_canonical_target

    return render_canonical_target()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
