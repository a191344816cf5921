"""
Distance-based positional encoding
==================================

A trained table whose row cosines follow a Gaussian in grid distance,
next to the usual sinusoidal table whose similarity decays slowly.
"""

import numpy as np

from oat.positional import PEConfig, fit_rmse, gaussian_target, sinusoidal_pe, train_pe

cfg = PEConfig(L=11, d_axis=42, sigma=2.0, lam=1.0, lr=0.01, iters=10000)
dpe = train_pe(cfg, seed=0)
sin = sinusoidal_pe(11, 42)

print("fit RMSE against the Gaussian target:", round(fit_rmse(dpe, 2.0), 4))
print("row norms:", dpe.row_norms().min().round(3), "to", dpe.row_norms().max().round(3))
print("half-width (bins):", dpe.half_width())

# similarity of position 0 to positions 0..10
np.set_printoptions(precision=3, suppress=True)
print("\ndistance     ", np.arange(11))
print("target       ", np.array([gaussian_target(0, j, 2.0) for j in range(11)]))
print("trained      ", dpe.cosine_matrix()[0])
print("sinusoidal   ", sin.cosine_matrix()[0])

# the sinusoidal table stays similar far away, which blurs grid distance
d5 = lambda pe: np.mean([pe.cosine_matrix()[i, i + 5] for i in range(6)])
print(f"\nmean cosine at distance 5: trained {d5(dpe):.3f}, sinusoidal {d5(sin):.3f}")
