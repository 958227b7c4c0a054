import os
import warnings

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from faithvqa.toyworld import generate_dataset
from faithvqa.vqa import VQATrainConfig, pretrain_vqa

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow,
                                                 HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))
torch.set_num_threads(1)


def central_diff(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """d f / d x by central differences; f maps a tensor like x to a scalar."""
    x = x.detach().clone()
    out = torch.zeros_like(x)
    flat, g = x.view(-1), out.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = float(torch.as_tensor(f(x)).detach())
        flat[i] = old - eps
        lo = float(torch.as_tensor(f(x)).detach())
        flat[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return out


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


@pytest.fixture(scope="session")
def tiny_ds():
    return generate_dataset(120, seed=3)


@pytest.fixture(scope="session")
def tiny_vqa(tiny_ds):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model, _ = pretrain_vqa(tiny_ds.split("train"), len(tiny_ds.vocab),
                                len(tiny_ds.vocab.answers),
                                train_cfg=VQATrainConfig(epochs=40, lr=2e-3))
    return model


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
