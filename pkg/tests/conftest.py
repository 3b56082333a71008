import numpy as np
import pytest

from rue_audit.model import MlpArchitecture


def central_difference(fn, x, step=1e-5):
    """Gradient (or Jacobian rows) of ``fn`` at ``x`` by central differences."""
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * step))
    return np.stack(cols, axis=-1)


def scaled_error(actual, expected, floor=1e-5):
    """Max deviation relative to the reference's scale (with an absolute floor)."""
    actual, expected = np.asarray(actual), np.asarray(expected)
    return float(np.abs(actual - expected).max() / max(np.abs(expected).max(), floor))


def random_instance(rng, p=None, h=None, n=None):
    p = p or int(rng.integers(1, 6))
    h = h or int(rng.integers(1, 9))
    n = n or int(rng.integers(2, 31))
    arch = MlpArchitecture(p, h)
    theta = rng.normal(scale=0.7, size=arch.n_params)
    X = rng.normal(size=(n, p))
    y = rng.normal(size=n)
    return arch, theta, X, y


def ridge_problem(rng, n=40, p=3, alpha=1.0, noise=0.3):
    """Linear-Gaussian data plus the exact ridge solution for the linear architecture."""
    X = rng.normal(size=(n, p))
    beta = rng.normal(size=p)
    y = X @ beta + 0.5 + noise * rng.normal(size=n)
    Xb = np.hstack([X, np.ones((n, 1))])
    theta = np.linalg.solve(Xb.T @ Xb + alpha * np.eye(p + 1), Xb.T @ y)
    return MlpArchitecture(p, linear=True), X, y, Xb, theta


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record ``(label, passed, detail)`` and fail the test if it did not pass."""
    log = request.config.stash.setdefault(_VERDICTS, [])

    def record(label, passed, detail=""):
        log.append((label, "PASS" if passed else "FAIL", detail))
        assert passed, f"{label}: {detail}"

    def skip(label, reason):
        log.append((label, "SKIP", reason))
        pytest.skip(reason)

    record.skip = skip
    return record


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(_VERDICTS, [])
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, detail in log:
        terminalreporter.write_line(f"{status} {label}: {detail}")
