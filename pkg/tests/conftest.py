"""Collects the acceptance verdicts and prints one line per criterion at the end of the run."""
import pytest

_VERDICTS: dict[int, list[tuple[str, str]]] = {}

TITLES = {
    1: "linear solve vs dense QR",
    2: "one linear step vs nonlinear minimiser",
    3: "ICP convergence on the structured scene",
    4: "weighting functions",
    5: "posterior sigma and information matrix",
    6: "feature extraction",
    7: "synthetic loop drift",
    8: "pose graph vs dense minimiser",
    9: "runtime",
    10: "KITTI sequence 04",
}


def _record(criterion: int, status: str, detail: str) -> None:
    _VERDICTS.setdefault(criterion, []).append((status, detail))
    print(f"criterion {criterion} {status}: {detail}")


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records a PASS/FAIL line; ``verdict.skip(n, why)`` a SKIP."""

    class Recorder:
        def __call__(self, criterion: int, ok: bool, detail: str) -> bool:
            _record(criterion, "PASS" if ok else "FAIL", detail)
            return ok

        def skip(self, criterion: int, why: str) -> None:
            _record(criterion, "SKIP", why)

    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        parts = _VERDICTS[n]
        statuses = {s for s, _ in parts}
        overall = "FAIL" if "FAIL" in statuses else ("SKIP" if statuses == {"SKIP"} else "PASS")
        tr.write_line(f"{overall} criterion {n:2d} ({TITLES.get(n, '')}): " + "; ".join(d for _, d in parts))
