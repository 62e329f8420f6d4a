import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from colorflux import micronet  # noqa: E402

# the small configuration used for gradient checks
TINY = micronet.NetConfig(image_size=8, channels=4, depth=2, d_p=4, lora_rank=2, temb_dim=4)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_params():
    """Tiny network with every group (control projections and adapters too) nonzero."""
    p = micronet.init_params(TINY, 1)
    rng = np.random.default_rng(2)
    for k, v in p.arrays.items():
        if not np.any(v):
            p.arrays[k] = 0.1 * rng.standard_normal(v.shape)
    return p


@pytest.fixture(autouse=True)
def _run_root(tmp_path, monkeypatch):
    monkeypatch.setenv("COLORFLUX_RUN_ROOT", str(tmp_path / "runs"))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
