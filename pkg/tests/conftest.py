import pytest
import torch

from lfstego import imaging, synth


@pytest.fixture
def gen():
    return imaging.seeded_generator(1234)


@pytest.fixture(scope="session")
def natural64():
    return [imaging.quantize(synth.natural_image(i, 64)).double() for i in range(10)]


def rand_image(seed, side=16, dtype=torch.float64):
    return torch.rand(3, side, side, generator=torch.Generator().manual_seed(seed), dtype=dtype)


# one summary line per acceptance criterion, printed after the run
_CRITERIA: dict[int, dict] = {}


def _criterion_number(nodeid: str) -> int | None:
    if "test_acceptance.py::test_criterion_" not in nodeid:
        return None
    return int(nodeid.split("test_criterion_")[1].split("_")[0])


@pytest.fixture
def record(request):
    """Attach measured values to the current acceptance criterion's summary line."""
    entry = _CRITERIA.setdefault(_criterion_number(request.node.nodeid), {})

    def _record(**values):
        entry.setdefault("values", {}).update(values)

    return _record


def pytest_runtest_logreport(report):
    n = _criterion_number(report.nodeid)
    if n is None:
        return
    entry = _CRITERIA.setdefault(n, {})
    entry["title"] = report.nodeid.split("test_criterion_")[1].split("_", 1)[1].replace("_", " ")
    if report.failed:
        entry["outcome"] = "FAIL"
    elif report.skipped:
        entry["outcome"] = "SKIP"
    elif report.when == "call" and "outcome" not in entry:
        entry["outcome"] = "PASS"


def _fmt(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)


def pytest_terminal_summary(terminalreporter):
    if not any(e.get("outcome") for e in _CRITERIA.values()):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(k for k in _CRITERIA if k is not None):
        e = _CRITERIA[n]
        values = ", ".join(f"{k}={_fmt(v)}" for k, v in e.get("values", {}).items())
        terminalreporter.write_line(f"criterion {n:2d} {e.get('outcome', 'NOT RUN'):4s} {e.get('title', '')}"
                                    + (f" | {values}" if values else ""))
