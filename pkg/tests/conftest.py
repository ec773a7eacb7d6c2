import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dscope.model import ForecastModel, ModelConfig  # noqa: E402


def tiny_config(**kw) -> ModelConfig:
    base = dict(layers=3, d_model=8, heads=2, patch_size=4, stride=2, t_in=16, t_out=4, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def random_model(cfg: ModelConfig, seed: int = 0, scale: float = 0.3) -> ForecastModel:
    """Model with larger-than-init random weights so every path is exercised."""
    from dscope.tensor import Tensor

    rng = np.random.default_rng(seed)
    m = ForecastModel.init(cfg)
    params = {
        k: Tensor(p.data + scale * rng.standard_normal(p.shape), requires_grad=True, name=k)
        for k, p in m.params.items()
    }
    return m.with_params(params)


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def model(cfg):
    return random_model(cfg)


@pytest.fixture
def x_batch(cfg):
    rng = np.random.default_rng(7)
    return rng.standard_normal((5, cfg.t_in, 2))


class PipelineRuns:
    """Lazily computed full pipeline runs on the reference synthetic task, keyed by seed."""

    def __init__(self):
        self._runs = {}
        self.seconds = {}

    def __getitem__(self, seed):
        if seed not in self._runs:
            import time

            from dscope.config import build
            from dscope.pipeline import run_pipeline

            t0 = time.process_time()
            self._runs[seed] = run_pipeline(build({"seed": str(seed)}))
            self.seconds[seed] = time.process_time() - t0
        return self._runs[seed]


@pytest.fixture(scope="session")
def pipeline_runs():
    return PipelineRuns()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
