"""The gradient reversal layer in one page: identical forward, negated backward.

Run:  python demos/gradient_reversal.py
"""

import numpy as np

from cddod import alignment
from cddod.compute import Tensor

rng = np.random.default_rng(0)
model = alignment.DomainAdaptiveModel(seed=0)
src = Tensor(rng.uniform(size=(1, 1, 64, 64)))
tgt = Tensor(rng.uniform(size=(1, 1, 64, 64)))


def fpa(reverse):
    for p in model.params.values():
        p.grad = None
    _, pyr_s = model.detector.features(src)
    _, pyr_t = model.detector.features(tgt)
    loss = alignment.fpa_loss(pyr_s, pyr_t, model.heads, reverse)
    loss.backward()
    return loss.item(), model.params["backbone.s1.conv0.w"].grad.copy(), model.params["fpa1.conv0.w"].grad.copy()


loss_r, bb_r, head_r = fpa(True)
loss_p, bb_p, head_p = fpa(False)
print(f"L_p with reversal {loss_r:.6f}, without {loss_p:.6f}  (2 ln 2 = {2 * np.log(2):.6f})")
print("backbone gradient negated:", np.array_equal(bb_r, -bb_p))
print("discriminator gradient unchanged:", np.array_equal(head_r, head_p))
