import time
import warnings

import numpy as np
import pytest

from ddrom import mor_ct, mor_dt
from ddrom.config import load_config
from ddrom.experiment import collect_pair

BENCHMARKS = ("ct10", "dt10", "pendulum_ct", "pendulum_dt")

# filled by test_acceptance, printed in the terminal summary
CRITERIA: dict = {}


class Built:
    def __init__(self, cfg, excited, zero, red, seconds):
        self.cfg = cfg
        self.plant = cfg.plant
        self.spec = cfg.spec
        self.excited = excited
        self.zero = zero
        self.red = red
        self.seconds = seconds

    @property
    def boxes(self):
        v = self.cfg.verification
        return dict(x_box=v.x_box, xhat_box=v.xhat_box, uhat_box=v.uhat_box)


def build_benchmark(name, **overrides):
    cfg = load_config(benchmark_id=name)
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        excited, zero = collect_pair(cfg.plant, cfg.spec, cfg.experiment)
    reduce = mor_ct.reduce_ct if cfg.plant.continuous else mor_dt.reduce_dt
    t0 = time.perf_counter()
    red = reduce(excited, zero, cfg.spec, cfg.reduction)
    return Built(cfg, excited, zero, red, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def built():
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = build_benchmark(name)
        return cache[name]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        ok, text = CRITERIA[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {text}")
