# Invert a clean sample to noise, sample it back, and compare the two
# trajectories step by step.
import numpy as np

from motiontransfer.experiments import dominance_fraction, roundtrip_study
from motiontransfer.models import GaussianMixtureToy, GaussianToy
from motiontransfer.schedule import make_schedule
from motiontransfer.solver import SolverOptions

sch = make_schedule("rectified_flow", 32, 0.02, "uniform_lambda")
models = {
    "gaussian": GaussianToy(sch, [1.0, -0.5], 0.5),
    "mixture": GaussianMixtureToy(sch, [(0.5, [1.5, 0.5], 0.4), (0.5, [-1.0, -1.0], 0.6)]),
}
solvers = [SolverOptions(solver="ddim"), SolverOptions(order=2), SolverOptions(order=3),
           SolverOptions(order=2, midpoint=True)]

for name, model in models.items():
    curves = roundtrip_study(model, sch, range(20), solvers)
    print(name)
    for idx, opts in enumerate(solvers):
        final = np.mean([c[idx][-1] for c in curves.values()])
        line = f"  {opts.label():<14} final mse {final:9.2e}"
        if idx:
            line += f"   below ddim at every step on {dominance_fraction(curves, idx):.0%} of seeds"
        print(line)
