import numpy as np
import pytest
import torch

from busmtl.core import RunConfig

torch.set_num_threads(1)

_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(_ACCEPTANCE_KEY, [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, detail in sorted(rows):
        terminalreporter.write_line(f"[{status}] criterion {number}: {title} -- {detail}")


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, title, passed, detail)``."""
    def record(number, title, passed, detail=""):
        status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
        request.config.stash[_ACCEPTANCE_KEY].append((number, title, status, detail))
        return passed
    return record


@pytest.fixture
def tiny_cfg():
    """32 px images, 8 px patches (4x4 grid), 8-dim embeddings."""
    return RunConfig(
        working_resolution=32, patch_size=8, embed_dim=8, heads=2, depth=2, decoder_width=2,
        epochs=3, phase_lengths=(1, 1, 1), batch_size=4, val_fraction=0.0, augment=False,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(fn, tensor, index, h=1e-6):
    """Central finite difference of scalar ``fn()`` w.r.t. ``tensor[index]``."""
    with torch.no_grad():
        original = tensor[index].item()
        tensor[index] = original + h
        plus = float(fn())
        tensor[index] = original - h
        minus = float(fn())
        tensor[index] = original
    return (plus - minus) / (2 * h)


def relative_error(a, b, floor=1e-6):
    # below the floor the check is absolute: |a - b| < tol * floor
    return abs(a - b) / max(abs(a), abs(b), floor)
