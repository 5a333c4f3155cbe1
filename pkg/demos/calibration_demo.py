"""Noise calibration: recover the power-law noise parameters from per-mode
stationary variances, then pick the hyperdiffusion strength that minimizes
the expected quasi-steady error.

    python3 demos/calibration_demo.py
"""
import numpy as np

from diffusivity_kalman.calibration import (
    calibrate_noise,
    choose_hyperdiffusion,
    quasistationary_variances,
)
from diffusivity_kalman.scenarios import TWIN_SOURCE, twin_config

cfg = twin_config()
var_T, var_theta = quasistationary_variances(cfg)
modes = np.arange(1, cfg.n_modes + 1)
fit = calibrate_noise(var_T, var_theta, cfg, modes=modes)
print("parameter   configured   recovered")
for name in ("alpha1", "beta1", "alpha2", "beta2"):
    print(f"{name:9s}  {getattr(cfg, name):10.3e}  {getattr(fit, name):10.3e}")

best, curve = choose_hyperdiffusion(cfg, TWIN_SOURCE.field(cfg.n_modes), [0.0, 1e-5, 1e-4, 1e-3, 1e-2])
print("\nmu1         expected error")
for mu1, err in curve:
    print(f"{mu1:9.1e}   {err:.4e}")
print(f"chosen mu1 = {best:g}")
