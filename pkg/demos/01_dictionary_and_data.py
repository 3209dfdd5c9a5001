"""Dictionary evaluation and data collection on the ct10 benchmark."""

import numpy as np

from ddrom.experiment import ExperimentConfig, collect_pair, rank_report
from ddrom.plant import benchmark, benchmark_dictionary

plant = benchmark("ct10")
spec = benchmark_dictionary("ct10")
print("dictionary size:", spec.size)
print("nonlinear entries:", [(f.kind, f.args) for f in spec.entries[spec.state_dim:]][:6], "...")

excited, zero = collect_pair(plant, spec, ExperimentConfig(T=40, tau=0.01, seed=1,
                                                           oracle_derivatives=True))
print("excited D:", excited.D.shape, rank_report(excited.D))
print("zero-input D:", zero.D.shape, rank_report(zero.D))
print("max |Xdot|:", np.abs(excited.Xplus).max())
