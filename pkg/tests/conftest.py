import os
import time
from contextlib import contextmanager

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=60
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """10 HGG + 8 LGG (balanced to 8 + 8), 32x32x24 volumes, strong planted signal."""
    from gliomapred.prepare import load_prepared, prepare_dataset
    from gliomapred.synthdata import SynthSpec, generate_cohort

    root = tmp_path_factory.mktemp("small_cohort")
    spec = SynthSpec(n_hgg=10, n_lgg=8, dims=(32, 32, 24), signal_strength=2.0, seed=3)
    ds = generate_cohort(spec, root / "synth")
    prep = prepare_dataset(ds.root, ds.clinical_csv, root / "prepared",
                           positions=spec.cut_positions)
    return load_prepared(prep)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance bookkeeping ------------------------------------------------------

ACCEPTANCE: dict = {}


@contextmanager
def criterion(number: int, title: str, budget_s: float, spent_s: float = 0.0):
    """Record PASS/FAIL for one acceptance criterion, including its time budget.

    ``spent_s`` counts work done earlier on the criterion's behalf (fixtures).
    """
    t0 = time.perf_counter() - spent_s
    try:
        yield
        elapsed = time.perf_counter() - t0
        assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s:.0f}s"
    except BaseException as exc:
        ACCEPTANCE[number] = ("FAIL", title, time.perf_counter() - t0, str(exc).splitlines()[0][:160]
                              if str(exc) else type(exc).__name__)
        raise
    ACCEPTANCE[number] = ("PASS", title, time.perf_counter() - t0, "")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, elapsed, note = ACCEPTANCE[n]
        line = f"criterion {n}: {status}  {title}  ({elapsed:.1f}s)"
        terminalreporter.write_line(line + (f"  -- {note}" if note else ""))
