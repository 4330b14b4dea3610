import numpy as np
import pytest

from downscale_lab.tensor import Tensor

# criterion number -> list of (part, passed, detail), filled by test_acceptance
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def record(criterion: int, part: str, passed: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(criterion, []).append((part, bool(passed), detail))


def central_difference(loss_fn, t: Tensor, index, h: float = 1e-5) -> float:
    """Central difference of ``loss_fn()`` (a float) w.r.t. one entry of ``t``."""
    flat = t.data.reshape(-1)
    orig = flat[index]
    flat[index] = orig + h
    up = loss_fn()
    flat[index] = orig - h
    down = loss_fn()
    flat[index] = orig
    return (up - down) / (2 * h)


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def assert_grads_match(build_loss, tensors, rng=None, n=40, h=1e-5, tol=1e-4):
    """Compare tape gradients of ``build_loss()`` with central differences."""
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    build_loss().backward()
    for t in tensors:
        assert t.grad is not None and t.grad.shape == t.data.shape
        picks = rng.choice(t.data.size, size=min(n, t.data.size), replace=False)
        for j in picks:
            num = central_difference(lambda: build_loss().item(), t, j, h)
            ana = t.grad.reshape(-1)[j]
            assert rel_err(ana, num) < tol, (t.name, j, ana, num)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[num]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        body = "; ".join(f"{name} {'ok' if ok else 'FAILED'} ({detail})" for name, ok, detail in parts)
        terminalreporter.write_line(f"criterion {num}: {verdict}  {body}")
