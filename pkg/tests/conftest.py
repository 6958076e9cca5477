import numpy as np
import pytest
import torch

from manifoldnerf.field import DTYPE, EncodingConfig, init_params


def central_differences(loss_fn, tensors, step=1e-4):
    """Numerical gradient of ``loss_fn()`` w.r.t. every entry of ``tensors``."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-8):
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.tensor(floor, dtype=a.dtype))
    return float(((a - n).abs() / denom).max())


@pytest.fixture
def small_field():
    """Field with well under 2k parameters for exhaustive gradient checks."""
    cfg = EncodingConfig(2, 1)
    params = init_params(cfg, (16, 16), seed=5)
    # nonzero biases so no hidden unit sits exactly on a ReLU kink
    gen = torch.Generator().manual_seed(5)
    for b in params.biases:
        b.add_(0.1 * torch.randn(b.shape, generator=gen, dtype=DTYPE))
    assert params.num_parameters <= 2000
    return params, cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
