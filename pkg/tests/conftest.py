import numpy as np
import pytest


def numeric_grad(f, x, eps=1e-6, index=None):
    """Central differences of scalar ``f()`` w.r.t. ``x`` (modified in place).

    ``index`` restricts the check to a list of flat positions.
    """
    flat = x.reshape(-1)
    positions = range(flat.size) if index is None else index
    out = np.zeros(len(positions) if index is not None else flat.size)
    for k, i in enumerate(positions):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        out[k] = (up - down) / (2 * eps)
    return out if index is not None else out.reshape(x.shape)


def rel_error(a, b):
    a = np.asarray(a, float).ravel()
    b = np.asarray(b, float).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary
# ---------------------------------------------------------------------------

_CRITERIA = {}


@pytest.fixture
def detail(request):
    """Record a measured value next to the criterion's summary line."""
    return lambda text: request.node.user_properties.append(("detail", str(text)))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
    number, title = marker.args
    details = [v for k, v in item.user_properties if k == "detail"]
    _, old, _ = _CRITERIA.get(number, (title, "PASS", []))
    if old == "PASS" or status == "FAIL":
        _CRITERIA[number] = (title, status, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, details = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")
        for d in details:
            terminalreporter.write_line(f"    {d}")
