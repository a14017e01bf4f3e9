"""Three views of the same state-space recurrence.

The selective-scan mixer discretizes h' = A h + B u per token and rolls out
h_t = Abar_t h_{t-1} + Bbar_t u_t. This demo shows the two equivalences the
implementation is tested against:

 1. the associative parallel scan computes exactly what the sequential
    left-to-right rollout computes (the operator (a1,b1)o(a2,b2) =
    (a1*a2, a2*b1 + b2) is associative), and
 2. with frozen input-independent parameters the scan is a linear
    time-invariant system, so its output equals a convolution with the
    materialized impulse-response kernel.

Run:  python3 demos/02_scan_equivalences.py
"""

import numpy as np

from mddcnet.tensor import Tensor
from mddcnet.ssm import MambaBlockConfig, SsmParams, discretize_zoh, \
    selective_scan_par, selective_scan_seq

rng = np.random.default_rng(1)

cfg = MambaBlockConfig(d_model=8, expand=2, d_state=4)
params = SsmParams(cfg, rng)

print("parallel scan == sequential scan:")
for length in (1, 7, 64, 257):
    u = Tensor(rng.standard_normal((2, length, cfg.d_inner)))
    err = np.max(np.abs(selective_scan_seq(u, params).data
                        - selective_scan_par(u, params, threads=2).data))
    print(f"  L = {length:4d}: max |difference| = {err:.3e}")

# Frozen scan == convolution. Fix delta, B, C to constants (no input
# dependence); then y = sum_k K[k] * u[t-k] with K the impulse response.
d, s, L = 3, 4, 32
a = -np.exp(rng.standard_normal((d, s)) * 0.3)
delta = np.full((1, L, d), 0.1)
b = np.tile(rng.standard_normal(s), (1, L, 1))
c = np.tile(rng.standard_normal(s), (1, L, 1))
abar, bbar = discretize_zoh(Tensor(a), Tensor(b), Tensor(delta))
abar, bbar = abar.data[0, 0], bbar.data[0, 0]        # time-invariant

# impulse response: K[k] = C . (Abar^k Bbar), per channel
K = np.stack([(c[0, 0] * (abar ** k) * bbar).sum(axis=1) for k in range(L)])

u = rng.standard_normal((1, L, d))
y_conv = np.zeros((1, L, d))
for t in range(L):
    for k in range(t + 1):
        y_conv[0, t] += K[k] * u[0, t - k]

from mddcnet.ssm import selective_scan
y_scan = selective_scan(Tensor(u), Tensor(delta), Tensor(a), Tensor(b),
                        Tensor(c), Tensor(np.zeros(d))).data
err = np.max(np.abs(y_scan - y_conv))
print(f"\nfrozen scan == materialized conv kernel: max |difference| = {err:.3e}")
