#!/usr/bin/env python3
"""Conditional flow matching on a toy conditional distribution.

Trains the vector-field MLP to transport Gaussian noise onto
condition-dependent targets, samples with the Euler solver, and shows the
guidance split: classifier-free guidance extrapolates only the latent
dimensions while the analog duration bits bypass it.
"""

import numpy as np

from tada import numerics as nx
from tada.durbits import pack, unpack
from tada.flowhead import FlowConfig, VectorFieldModel, euler_sample, flow_loss

rng = np.random.default_rng(0)
cfg = FlowConfig(d_latent=4, bits=3, d_cond=4, d_time=16, width=64, n_hidden=2, n_steps=10)

# Two "token classes": distinct latents and durations, one-hot-ish conditions
def make_batch(n):
    cls = rng.integers(0, 2, size=n)
    cond = np.eye(2)[cls] @ np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    targets = np.stack([
        pack([2.0, -1, 0, 0.5] if c == 0 else [-2.0, 1, 0.5, 0], 2 + c, 5 - c, cfg.bits)
        for c in cls
    ])
    return targets, cond, cls

model = VectorFieldModel(cfg, rng=rng)
opt = nx.Adam(model.params, lr=2e-3)
for step in range(600):
    targets, cond, _ = make_batch(32)
    opt.zero_grad()
    loss = flow_loss(model, targets, cond, cfg.sigma_min, seed=step)
    loss.backward()
    opt.step()
print(f"final flow loss: {loss.item():.4f}")

for c in (0, 1):
    cond = np.zeros((8, 4))
    cond[:, c] = 1.0
    field_pos = lambda y, t: model.field_np(y, t, cond)
    y = euler_sample(field_pos, None, cfg, seed=42, n_samples=8)
    decoded = [unpack(row, cfg.d_latent, cfg.bits)[1:] for row in y]
    s_mean = np.round(y[:, : cfg.d_latent].mean(axis=0), 2)
    print(f"class {c}: mean sampled latent {s_mean.tolist()}, decoded (f_before, f_after) {decoded[:3]}")

# Guidance only touches the first d_latent dims
zero_neg = lambda y, t: model.field_np(y, t, np.zeros((y.shape[0], 4)))
cond = np.zeros((4, 4)); cond[:, 0] = 1.0
field_pos = lambda y, t: model.field_np(y, t, cond)
guided_cfg = FlowConfig(**{**cfg.__dict__, "cfg_scale": 1.8})
y_guided = euler_sample(field_pos, zero_neg, guided_cfg, seed=7, n_samples=4)
y_plain = euler_sample(field_pos, None, cfg, seed=7, n_samples=4)
print(f"\nguided vs unguided: latent dims moved by "
      f"{np.abs(y_guided[:, :4] - y_plain[:, :4]).mean():.3f}, "
      f"bit dims by {np.abs(y_guided[:, 4:] - y_plain[:, 4:]).mean():.3f} on average")
