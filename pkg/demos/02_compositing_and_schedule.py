"""The two small formulas at the heart of the method.

A composite is ``m * I_f + (1 - m) * I_b``. The discriminator's decoder is
trained to mark, on the composite, the pixels that GrabCut calls background
in ``I_f``, and that loss is weighted by a step function of how well the
decoder already does. This script walks through both on toy numbers.
"""

import numpy as np

from sscpgan.compositing import composite
from sscpgan.losses import iou, lambda_schedule, self_supervised_loss, total_discriminator_loss
from sscpgan.numerics import Tensor

fg = np.full((1, 3, 1, 1), 0.8)
bg = np.full((1, 3, 1, 1), 0.4)
for m in (0.0, 0.25, 1.0):
    out = composite(fg, bg, np.full((1, 1, 1, 1), m))
    print(f"mask {m:.2f}: composite pixel {out[0, 0, 0, 0]:.3f}")

# gradient of the composite w.r.t. the mask is I_f - I_b
mask = Tensor(np.full((1, 1, 1, 1), 0.25), requires_grad=True)
composite(Tensor(fg), Tensor(bg), mask).backward(np.ones_like(fg))
print(f"d composite / d mask summed over RGB: {mask.grad.item():.3f} (3 x (0.8 - 0.4))")

print("\nIoU -> self-supervision weight")
for v in (0.0, 0.1, 0.2, 0.5, 0.8, 0.81, 1.0):
    print(f"  {v:.2f} -> {lambda_schedule(v)}")

pseudo = np.array([[0.0, 0.0], [1.0, 1.0]]).reshape(1, 1, 2, 2)
decoder = np.array([[0.9, 0.9], [0.1, 0.1]]).reshape(1, 1, 2, 2)
l_ss = float(self_supervised_loss(Tensor(decoder), pseudo).data)
agreement = iou(decoder, 1 - pseudo)
lam = lambda_schedule(agreement)
print(f"\ndecoder vs 1 - pseudo-label: IoU {agreement:.2f}, L_ss {l_ss:.5f}, weight {lam}")
print(f"L'_D with L_D = 1.3: {total_discriminator_loss(1.3, l_ss, lam):.5f}")
