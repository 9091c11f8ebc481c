"""Root-seed splitting.

Every random stream is seeded from ``SeedSequence([root, subsystem, *counters])``
where ``subsystem`` is a fixed integer per component (see ``SUBSYSTEMS``) and
the counters are e.g. sequence id or epoch. Reconfiguring one component never
shifts the streams of another.
"""

from __future__ import annotations

import numpy as np

SUBSYSTEMS = {
    "data": 1,
    "init": 2,
    "train": 3,
    "generate": 4,
    "fit": 5,
    "synthetic": 6,
}


def derive_seed(root: int, subsystem: str, *counters: int) -> int:
    key = [int(root), SUBSYSTEMS[subsystem], *(int(c) for c in counters)]
    return int(np.random.SeedSequence(key).generate_state(1, np.uint64)[0])


def rng_for(root: int, subsystem: str, *counters: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, subsystem, *counters))
