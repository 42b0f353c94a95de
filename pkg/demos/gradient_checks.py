"""Finite-difference checks of the autodiff engine.

The same suites back ``dbda gradcheck``. Every check perturbs at least 100
coordinates with central differences and compares against backward().
"""
import numpy as np

from dbda import gradcheck
from dbda import tensor as T

results, seconds = gradcheck.run("all", seed=0)
for r in results:
    print(r.line())
print(f"{sum(r.passed for r in results)}/{len(results)} passed in {seconds:.1f}s")

# %% A broken backward is caught
rng = np.random.default_rng(0)
x = rng.standard_normal((10, 12))
w = rng.standard_normal((10, 12))


def wrong_square(a):
    out = T._make(a.data**2, "square", (a,), lambda g: (g * a.data,))  # missing factor 2
    return T.sum_(T.mul(out, w))


print(gradcheck.check("wrong_square", wrong_square, [x], rng).line())
