"""Sensor-noise and sensor-count sweeps on a shared truth.  Errors should not
grow as measurements get better or more numerous.

    python3 demos/sweep_demo.py
"""
from diffusivity_kalman.mean_iteration import kappa_relative_error, run_outer_iteration
from diffusivity_kalman.scenarios import TWIN_SOURCE, simulate_twin, twin_config, twin_measurements

truth = simulate_twin(twin_config(), seed=0)
kappa_true = truth.kappa_values()


def final_error(cfg):
    data = twin_measurements(truth, cfg, seed=0)
    res = run_outer_iteration(cfg, data, TWIN_SOURCE, max_iters=10, tol=1e-4)
    return kappa_relative_error(res.means.kappa_values(), kappa_true)


for sigma in (1e-1, 1e-2, 1e-3):
    print(f"sigma = {sigma:.0e}, 16 sensors: error {final_error(twin_config(sigma=sigma)):.4f}")
for m in (4, 8, 16):
    print(f"sigma = 1e-3, {m:2d} sensors: error {final_error(twin_config(n_sensors=m)):.4f}")
