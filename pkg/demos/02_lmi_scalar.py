"""The LMI layer on a one-state example: xdot = -x + u with d = n = 1."""

from ddrom import mor_ct
from ddrom.dictionary import DictionarySpec
from ddrom.experiment import ExperimentConfig, collect_pair
from ddrom.plant import linear_in_dictionary
from ddrom.reduction import ReductionConfig

spec = DictionarySpec.build(1)
plant = linear_in_dictionary("continuous", [[-1.0]], [[1.0]], spec)
e, z = collect_pair(plant, spec, ExperimentConfig(T=6, tau=0.01, seed=0, oracle_derivatives=True))
for kappa_hat in (1.0, 1.5, 1.9):
    red = mor_ct.reduce_ct(e, z, spec, ReductionConfig(nhat=1, kappa_hat=kappa_hat, mu=0.5,
                                                       fixed=[[-1.0]], gamma=0.1))
    print(f"kappa_hat={kappa_hat}: P={red.P.ravel()} rho={red.rho:.3g} kappa={red.kappa}")
