import numpy as np
import pytest

from neuralannot import synthdata

# (criterion number, summary line) pairs filled in by test_acceptance
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def body_model():
    return synthdata.gen_model(0, "body")


@pytest.fixture(scope="session")
def hand_model():
    return synthdata.gen_model(0, "hand")


@pytest.fixture(scope="session")
def face_model():
    return synthdata.gen_model(0, "face")


@pytest.fixture(scope="session", params=["body", "hand", "face"])
def any_model(request, body_model, hand_model, face_model):
    return {"body": body_model, "hand": hand_model, "face": face_model}[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotvec(rng, n, max_angle=np.pi - 1e-3):
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    return axis * rng.uniform(0.0, max_angle, size=(n, 1))


def central_diff(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
