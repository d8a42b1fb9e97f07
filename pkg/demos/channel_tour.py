"""A walk through one episode of the airborne channel.

Prints path loss against distance, the Doppler correlation for the default
mobility, and how the channel of a single HAB link decorrelates over slots.
Run with ``python3 demos/channel_tour.py``.
"""
import numpy as np

from apsbeam.channel import ChannelParams, doppler_rho, large_scale_gain, steering_vector
from apsbeam.env import Environment
from apsbeam.scenario import ScenarioConfig

params = ChannelParams()
cfg = ScenarioConfig()

print("free-space loss (no shadowing)")
for d in (2000.0, 5000.0, 20000.0):
    print(f"  {d / 1000:5.1f} km  {float(large_scale_gain(d, params, return_db=True)):8.2f} dB")

rho = doppler_rho(cfg.v, cfg.T_c, params.f_c)
print(f"\nJakes correlation at v={cfg.v} m/s, T_c={cfg.T_c} s: rho = {rho:.4f}")

a = steering_vector(np.pi / 2, 0.3, 36, params)
print(f"nadir steering vector is all ones: {np.array_equal(a, np.ones(36))}")

env = Environment(cfg, params)
env.reset(seed=0, phase="demo", episode=0)
h0 = env.H_hab[0, 0].copy()
print("\nslot  |h|^2 (HAB 1 -> user 1)   corr with slot 0")
for t in range(8):
    h = env.H_hab[0, 0]
    corr = abs(np.vdot(h0, h)) / (np.linalg.norm(h0) * np.linalg.norm(h))
    print(f"{t:4d}  {np.linalg.norm(h) ** 2:.3e}              {corr:.3f}")
    env.step()
# the LoS part keeps the correlation high even as the scattered part fades
