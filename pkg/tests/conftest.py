import numpy as np
import pytest
import torch


def central_difference(f, x: torch.Tensor, h: float = 1e-5, coords=None) -> torch.Tensor:
    """Central-difference gradient of scalar ``f()`` w.r.t. the tensor ``x`` (perturbed in place).

    Only ``coords`` (flat indices) are evaluated when given; other entries are 0.
    """
    flat = x.data.view(-1)
    grad = torch.zeros_like(flat)
    idx = range(flat.numel()) if coords is None else coords
    for i in idx:
        old = flat[i].item()
        flat[i] = old + h
        fp = float(torch.as_tensor(f()).detach())
        flat[i] = old - h
        fm = float(torch.as_tensor(f()).detach())
        flat[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad.view_as(x)


def rel_err(a, b) -> float:
    a = torch.as_tensor(a, dtype=torch.float64).reshape(-1)
    b = torch.as_tensor(b, dtype=torch.float64).reshape(-1)
    denom = max(a.norm().item(), b.norm().item(), 1e-30)
    return (a - b).norm().item() / denom


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
