import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


class _Recorder:
    def __init__(self, lines):
        self.lines = lines
        self.done = False

    def __call__(self, number: int, title: str, checks: dict, detail: str = "") -> bool:
        """Log one criterion; ``checks`` maps a check name to whether it held."""
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        text = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            text += f"  ({detail})"
        if failed:
            text += f"  failed: {', '.join(failed)}"
        self.lines.append((number, text))
        self.done = True
        print(text)
        return ok


@pytest.fixture
def acceptance(request):
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])
    rec = _Recorder(lines)
    yield rec
    if not rec.done:
        lines.append((None, f"criterion ?: FAIL  {request.node.name} raised before reporting"))


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines, key=lambda x: (x[0] is None, x[0] or 0)):
            terminalreporter.write_line(text)
