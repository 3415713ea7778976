"""Small fixtures shared by several test modules."""

import numpy as np

from msvmc import pretraining as pt

# one atom on a line: d(1,2) = 1, d(2,3) = 2, d(1,3) = 3
CHAIN_POSITIONS = {1: 0.0, 2: 1.0, 3: 3.0}

# child/parent overlap where the global polar factor swaps the two orbitals
CORE_DIFFUSE_CROSS = np.array([[0.3, 0.9], [0.9, 0.3]])


def chain_structures(seed: int = 0) -> list:
    return [pt.synth_hf({"id": i, "nuclei": [[x, 0.0, 0.0]], "charges": [1.0], "n_up": 1, "n_down": 1},
                        seed=seed + i)
            for i, x in CHAIN_POSITIONS.items()]


def h2(bond: float, sid=0, seed: int = 0) -> pt.Structure:
    return pt.synth_hf({"id": sid, "nuclei": [[-bond / 2, 0, 0], [bond / 2, 0, 0]], "charges": [1, 1],
                        "n_up": 1, "n_down": 1}, seed=seed)
