"""Fused optimizer update loop.

Loop order is fixed, so results are deterministic run to run. The fastmath
subset allows reciprocal approximations and fused multiply-add but no
reassociation, so the result does not depend on vector width.
"""

import numba
import numpy as np


@numba.njit(cache=True, fastmath={"arcp", "afn", "nsz", "contract"})
def adam_update(p, g, m, v, beta1, beta2, step, eps):
    pf = p.reshape(-1)
    gf = g.reshape(-1)
    mf = m.reshape(-1)
    vf = v.reshape(-1)
    for i in range(pf.size):
        gi = gf[i]
        mi = beta1 * mf[i] + (1.0 - beta1) * gi
        vi = beta2 * vf[i] + (1.0 - beta2) * gi * gi
        mf[i] = mi
        vf[i] = vi
        pf[i] -= step * mi / (np.sqrt(vi) + eps)
