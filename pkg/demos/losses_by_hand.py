"""Loss values you can check with a pencil, next to the library's numbers.

    python3 demos/losses_by_hand.py
"""

import math

import numpy as np

from rclstr import losses as L
from rclstr import ndiff as nd

e = np.eye(3)


def show(label, got, want):
    print(f"{label:<44} {got:.10f}   expected {want:.10f}")


with nd.precision(np.float64):
    # positive aligned with the query, two orthogonal negatives
    for tau in (1.0, 0.5, 0.07):
        got = float(L.info_nce([e[0]], [e[0]], [e[1], e[2]], tau).data)
        show(f"info_nce, orthogonal negatives, tau={tau}", got, math.log(1 + 2 * math.exp(-1 / tau)))

    # two-point bank: each side puts mass e/(1+e) on its own basis vector
    got = float(L.symmetric_kl([e[0]], [e[1]], [e[0], e[1]], 1.0).data)
    show("symmetric_kl, q=e1 p=e2 bank={e1,e2}", got, math.tanh(0.5))

    got = float(L.symmetric_kl([e[0]], [e[0]], [e[1], e[2]], 0.1).data)
    show("symmetric_kl of a vector with itself", got, 0.0)

    cfg = L.LossConfig(alpha=0.0)
    a = L.relational([e[0]], [e[1]], [e[1], e[2]], cfg).data
    b = L.info_nce([e[0]], [e[1]], [e[1], e[2]], cfg.tau_info).data
    print("relational with alpha=0 is info_nce bit for bit:", a.tobytes() == b.tobytes())

    # the subword bin that owns each frame, as used by the cross-level terms
    bins = L.frame_to_bin(16, 4)
    print("frame -> subword bin at T=16:", " ".join(map(str, bins)))
