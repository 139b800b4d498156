import pytest

ACCEPTANCE_TITLES = {
    1: "He reference energy",
    2: "orthonormality preservation",
    3: "energy monotonicity",
    4: "Cayley step vs dense solve",
    5: "linear eigenproblem oracle",
    6: "gradient consistency",
    7: "Hartree Gaussian oracle",
    8: "stationarity",
    9: "adaptivity targets the cusp",
    10: "estimator sanity",
}
ACCEPTANCE_RESULTS: dict = {}


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion: ``criterion(n, ok, detail)``."""

    def record(number: int, ok: bool, detail: str = ""):
        prev = ACCEPTANCE_RESULTS.get(number, (True, ""))
        details = "; ".join(d for d in (prev[1], detail) if d)
        ACCEPTANCE_RESULTS[number] = (prev[0] and bool(ok), details)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in ACCEPTANCE_TITLES.items():
        if number in ACCEPTANCE_RESULTS:
            ok, detail = ACCEPTANCE_RESULTS[number]
            status = "PASS" if ok else "FAIL"
        else:
            status, detail = "NOT RUN", "deselected or errored before recording"
        terminalreporter.write_line(f"criterion {number:2d} {status:7s} {title}: {detail}")
