"""Spectra, the sorted-loss statistic, and its smooth surrogate.

Run: python3 demos/01_spectra_and_smoothing.py
"""
import numpy as np

from lrisk import Spectrum, SmoothingConfig, discretize, l_statistic, smoothed_oracle
from lrisk.data import make_rng

n = 10
losses = make_rng(0).exponential(size=n)

# Each spectrum turns into weights on the sorted losses. Risk-averse ones put
# more weight on the largest losses.
for spectrum in (Spectrum.uniform(), Spectrum.superquantile(0.5), Spectrum.extremile(2.0), Spectrum.esrm(1.0)):
    sigma = discretize(spectrum, n)
    print(f"{spectrum.label:18s} weights {np.round(sigma, 3)}  value {l_statistic(sigma, losses):.4f}")

# The statistic is a max over the permutahedron of sigma. Subtracting a strongly
# convex penalty gives a differentiable surrogate whose gradient is the maximizer.
sigma = discretize(Spectrum.superquantile(0.5), n)
exact = l_statistic(sigma, losses)
print(f"\nsuperquantile value {exact:.6f}")
for nu in (1.0, 0.1, 0.01, 0.001):
    ev = smoothed_oracle(SmoothingConfig(nu), sigma, losses)
    print(f"nu = {nu:<6g} smoothed {ev.value:.6f}  gap {exact - ev.value:.2e}  "
          f"weights on the top half {ev.lam[np.argsort(losses)[n // 2:]].sum():.4f}")
