"""Hoelder quotients of the OU field on a (s, t, x) lattice, coarse vs refined."""

import numpy as np

from flowlab import FlowGrid, model_by_name, simulate_flow
from flowlab.estimate import kolmogorov_table

ou = model_by_name("ou")
for n in (5, 9):
    s, x, t = np.linspace(0, 0.5, n), np.linspace(-1, 1, n), np.linspace(0.5, 1, n)
    grid = FlowGrid(anchors=[(a, np.array([b])) for a in s for b in x], time_step=2.0 ** -8,
                    n_paths=1000, record_times=list(t))
    tab = kolmogorov_table(simulate_flow(ou.spec, grid, seed=0), 2.0, (0.5, 1.0))
    print(f"{n}^3 lattice:", {k: round(v, 4) for k, v in tab.quotient_sup.items()})
