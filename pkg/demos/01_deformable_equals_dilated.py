"""Deformable convolution degenerates to dilated convolution.

The multi-scale deformable-dilated block predicts one (dy, dx) offset per
kernel tap. When every offset is zero, each branch samples exactly on the
dilated grid, so its output must match a plain dilated convolution to
floating-point roundoff. This is the central correctness oracle for the
sampling arithmetic: any indexing, padding, or interpolation mistake shows
up as a macroscopic disagreement.

Run:  python3 demos/01_deformable_equals_dilated.py
"""

import numpy as np

from mddcnet.tensor import Tensor, conv2d
from mddcnet.msddc import deform_dilated_conv

rng = np.random.default_rng(0)

x = Tensor(rng.standard_normal((1, 3, 12, 12)))
w = Tensor(rng.standard_normal((5, 3, 3, 3)))
b = Tensor(rng.standard_normal(5))
zero_offsets = Tensor(np.zeros((1, 18, 12, 12)))     # 9 taps x (dy, dx)

print("zero offsets vs. plain dilated conv:")
for d in (1, 2, 4):
    deform = deform_dilated_conv(x, zero_offsets, w, b, d)
    plain = conv2d(x, w, b, padding=d, dilation=d)
    err = np.max(np.abs(deform.data - plain.data))
    print(f"  dilation {d}: max |difference| = {err:.3e}")

# A constant integer offset is a rigid shift of the sampling grid: offsetting
# every tap by one pixel right reads the input shifted one pixel left.
shift = np.zeros((1, 18, 12, 12))
shift[0, 1::2] = 1.0                                 # all dx channels = +1
shifted = deform_dilated_conv(x, Tensor(shift), w, b, 1)
reference = conv2d(x, w, b, padding=1)
err = np.max(np.abs(shifted.data[:, :, :, :-2] - reference.data[:, :, :, 1:-1]))
print(f"\ninteger offset acts as a shift: interior max |difference| = {err:.3e}")

# Fractional offsets interpolate bilinearly: on a linear ramp, a half-pixel
# offset reads exactly the midpoint value.
ramp = Tensor(np.tile(np.arange(12.0), (12, 1))[None, None])
center_tap = np.zeros((1, 1, 3, 3)); center_tap[0, 0, 1, 1] = 1.0
half = np.zeros((1, 18, 12, 12)); half[0, 9] = 0.5   # center tap, dx += 0.5
y = deform_dilated_conv(ramp, Tensor(half), Tensor(center_tap), None, 1)
print(f"half-pixel offset on a ramp reads x + 0.5: "
      f"cell (0,4) = {y.data[0, 0, 0, 4]:.3f} (expected 4.500)")
