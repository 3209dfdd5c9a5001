"""Reduce ct10 to two states, check the simulation function and print the closeness bound."""

import numpy as np

from ddrom import mor_ct
from ddrom.config import load_config
from ddrom.experiment import collect_pair

cfg = load_config(benchmark_id="ct10")
e, z = collect_pair(cfg.plant, cfg.spec, cfg.experiment)
red = mor_ct.reduce_ct(e, z, cfg.spec, cfg.reduction)
print("Ahat =\n", red.Ahat, "\nR1 =\n", np.round(red.R1, 4))
print(f"alpha={red.alpha:.4g} kappa={red.kappa:.4g} rho={red.rho:.4g}")

v = cfg.verification
rep = mor_ct.verify_sf_ct(red, cfg.plant, 10_000, 0, x_box=v.x_box, xhat_box=v.xhat_box,
                          uhat_box=v.uhat_box)
print("\n".join(rep.lines()))

cert = mor_ct.closeness_certificate(red, 6 * np.sqrt(2))
t = np.linspace(0, 5, 6)
print("envelope:", np.round(cert.envelope(t), 4))
print("sup:", round(cert.envelope_sup(), 4))
