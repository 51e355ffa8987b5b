#!/usr/bin/env python3
"""Gray-coded analog bits for frame durations, and the packed flow target.

Consecutive integers differ in exactly one gray bit, so a single borderline
analog dimension at quantization time shifts the decoded count by a small
amount instead of flipping a high-order binary digit.
"""

import numpy as np

from tada import durbits

print("n  binary   gray")
for n in range(8):
    binary = f"{n:03b}"
    gray = "".join(map(str, durbits.gray_encode(n, 3)))
    print(f"{n}  {binary}      {gray}")

print("\nevery adjacent pair differs in exactly one gray bit:")
flips = [
    int(np.sum(durbits.gray_encode(n, 8) != durbits.gray_encode(n + 1, 8)))
    for n in range(255)
]
print(f"  bit flips between n and n+1 over n<255: min={min(flips)} max={max(flips)}")

# A packed flow target: latent, then two analog-bit duration fields
s = np.round(np.random.default_rng(0).standard_normal(8), 2)
y = durbits.pack(s, f_before=17, f_after=3, b=8)
print(f"\npacked target width: {y.size} (8 latent dims + 2 * 8 analog bits)")
print(f"f_before=17 ->  {y[8:16].astype(int).tolist()}")
print(f"f_after=3  ->  {y[16:].astype(int).tolist()}")

# Quantization is a strict sign rule, robust to sub-unit perturbations
noisy = y + np.random.default_rng(1).uniform(-0.9, 0.9, y.size) * 0.9
_, fb, fa = durbits.unpack(noisy, 8, 8)
print(f"\nafter sign-preserving noise: decoded (f_before, f_after) = ({fb}, {fa})")
