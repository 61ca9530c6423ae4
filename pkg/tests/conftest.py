import numpy as np
import pytest


def numeric_grad(f, x, h=1e-6):
    """Central differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts: {criterion: [(part, ok, detail), ...]}
ACCEPTANCE: dict = {}
CRITERIA = ("A1", "A2", "A3", "A4", "A5", "A6", "A7")


def record_acceptance(key, part, ok, detail):
    ACCEPTANCE.setdefault(key, []).append((part, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in CRITERIA:
        parts = ACCEPTANCE.get(key)
        if not parts:
            terminalreporter.write_line(f"{key} NOT RUN")
            continue
        ok = all(p[1] for p in parts)
        # one line per criterion: last detail for each distinct part
        latest = {}
        for part, good, detail in parts:
            if part not in latest or not good:
                latest[part] = detail if good else f"FAILED {detail}"
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: " + " | ".join(latest.values()))
