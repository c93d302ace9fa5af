import numpy as np
import pytest

from spde_deepsplit.rng import make_stream


@pytest.fixture
def stream():
    return make_stream(1234, 0)


def plain_forward(theta, lay, X, mean=None, var=None, eps=1e-3):
    """Straightforward numpy forward pass used as an oracle.

    With ``mean``/``var`` given (per site lists) it uses them instead of batch stats.
    """
    A = np.asarray(X, dtype=float)
    for i in range(lay.n_layers):
        if lay.n_sites:
            if mean is None:
                mu, v = A.mean(axis=0), A.var(axis=0)
            else:
                mu, v = mean[i], var[i]
            A = lay.bn_scale(theta, i) * (A - mu) / np.sqrt(v + eps) + lay.bn_shift(theta, i)
            if i > 0:
                A = np.tanh(A)
        elif i > 0:
            A = np.tanh(A)
        A = A @ lay.weights(theta, i).T + lay.bias(theta, i)
    return A[:, 0]


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def record(criterion, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
    print(ACCEPTANCE_LINES[-1])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
