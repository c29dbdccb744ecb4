"""Certify every built-in model on its box and fit minimal constants for Ginzburg-Landau."""

import numpy as np

from flowlab import SampleRegion, certify, fit_constants, model_by_name, NAMES

for name in NAMES:
    nm = model_by_name(name)
    rep = certify(nm.spec, SampleRegion(nm.box_lo, nm.box_hi, n_points=256), seed=0)
    worst = min(rep.records, key=lambda r: r.min_margin)
    print(f"{name:18s} passed={rep.passed!s:5s} worst={worst.condition_id} ({worst.min_margin:.3g})")

gl = model_by_name("ginzburg_landau")
fit = fit_constants(gl.spec, SampleRegion(gl.box_lo, gl.box_hi, n_points=256, sampler="grid"), seed=0)
for k, v in fit.as_dict().items():
    print(f"  {k:11s} {v:.6g}")

# halving gamma breaks the growth condition; the witness shows where
half = gl.spec.replace(gamma=0.75)
rec = certify(half, SampleRegion(gl.box_lo, gl.box_hi, n_points=256), seed=0).record("coeff_growth")
print("gamma=0.75 coeff_growth:", rec.passed, np.round(rec.argmin_witness["x"], 3), f"{rec.min_margin:.3g}")
