"""Reduce dt10, build the simulation relation and follow a coupled run."""

import numpy as np

from ddrom import mor_dt
from ddrom.config import load_config
from ddrom.experiment import collect_pair

cfg = load_config(benchmark_id="dt10")
e, z = collect_pair(cfg.plant, cfg.spec, cfg.experiment)
red = mor_dt.reduce_dt(e, z, cfg.spec, cfg.reduction)
nu, inferred = cfg.nu()
cert = mor_dt.relation_cert(red, cfg.reduction.eta, nu, inferred)
print("\n".join(cert.lines()))

rep = mor_dt.check_relation_invariance(red, cert, 10_000, 0, cfg.plant, cfg.verification.xhat_box)
print("\n".join(rep.lines()))

rng = np.random.default_rng(0)
U = rng.uniform(-6, 6, (100, 2))
_, X, Xh, _ = mor_dt.simulate_pair_dt(red, cfg.plant, [3.0, -2.0], lambda k, x, xh: U[k], 100)
dev = np.linalg.norm(X - red.R1 @ Xh, axis=0)
print(f"max deviation {dev.max():.3g} <= epsilon {cert.epsilon:.3g}")
