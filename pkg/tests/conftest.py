import numpy as np
import pytest

from fitcarl.numeric import Tape, Tensor


def central_diff(f, params, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f().data)
            flat[i] = old - h
            fm = float(f().data)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def analytic(f, params):
    with Tape() as tape:
        loss = f()
    return tape.gradients(loss, params)


def max_rel_err(a, n, floor=1e-6):
    """Elementwise |a-n| / max(|a|, |n|, floor), maximised over entries."""
    worst = 0.0
    for x, y in zip(a, n):
        den = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        if x.size:
            worst = max(worst, float(np.max(np.abs(x - y) / den)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
