"""Tabulate the prior mode pi* and the gate-gradient log term for both hyper-prior families.

For the flattening prior the log term is constant, -log gamma, between the
two thresholds: every unit inside that band feels the same pull towards
zero whatever its current theta. The Beta prior has no such band.
"""
import numpy as np

from varprune.hyperprior import Beta, ClipBounds, Flattening, curve_export, thresholds

cb = ClipBounds(1e-4, 1e-4)
grid = np.array([1e-5, 1e-4, 1e-3, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 0.999])
for hp in (Flattening(1e-2), Flattening(1e-10), Beta(0.9, 10.0)):
    t1, t2 = thresholds(hp, cb)
    print(f"\n{hp}: theta1 = {t1:.3g}, theta2 = {t2:.6g}")
    print(f"{'theta':>10} {'pi*':>12} {'log term':>10}")
    for t, p, r in curve_export(hp, cb, grid):
        print(f"{t:10.5g} {p:12.5g} {r:10.4f}")
