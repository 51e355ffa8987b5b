#!/usr/bin/env python3
"""Tour of the minimal reverse-mode tensor engine.

Builds a small computation, walks the tape backward, and verifies the
analytic gradients against central finite differences.
"""

import numpy as np

from tada import numerics as nx
from tada.numerics import finite_difference_check

rng = np.random.default_rng(0)

# A two-layer net: x -> gelu(x W1) W2 -> mean of squares
W1 = nx.tensor(rng.standard_normal((4, 8)) * 0.5)
W2 = nx.tensor(rng.standard_normal((8, 2)) * 0.5)
x = nx.tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)

h = nx.gelu(nx.matmul(x, W1))
loss = nx.mean_(nx.square(nx.matmul(h, W2)))
tape = loss.backward()

print(f"loss = {loss.item():.6f}")
print(f"tape has {len(tape.nodes)} nodes, backward visited {tape.visits}")
print(f"dL/dx row 0: {np.round(x.grad[0], 4)}")

# The same gradient, measured numerically
err = finite_difference_check(
    lambda t: nx.mean_(nx.square(nx.matmul(nx.gelu(nx.matmul(t, W1)), W2))),
    x.data,
)
print(f"max relative error vs central differences: {err:.2e}")

# Masked softmax removes positions from the normalization set entirely:
scores = nx.tensor([[5.0, 100.0, 1.0]])
mask = np.array([[True, False, True]])
print(f"\nmasked softmax over [5, 100, 1] excluding position 2: "
      f"{np.round(nx.softmax_masked(scores, mask).data, 4)}")
print("the excluded 100 got exactly zero weight, not almost-zero")
