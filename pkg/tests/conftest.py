import pytest

from ccfkit.featurestore import SyntheticSpec, generate_synthetic

_ACCEPTANCE_LINES = []


def pytest_addoption(parser):
    parser.addoption("--external-bank", default=None,
                     help="real feature bank for the optional external-data acceptance check")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def record_criterion():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary.

    ``ok=None`` records a skipped criterion.
    """

    def record(label: str, ok, detail: str = ""):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        _ACCEPTANCE_LINES.append(f"{status}  {label}  {detail}".rstrip())
        return ok

    return record


@pytest.fixture(scope="session")
def small_bank():
    return generate_synthetic(SyntheticSpec(
        n_base_classes=8, n_val_classes=6, n_novel_classes=6, feature_dim=8,
        samples_per_class=40, within_class_stddev=0.6, centroid_rank=None, seed=3,
    ))
