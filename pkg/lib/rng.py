"""Counter-based random streams.

Every draw is keyed by (seed, frame, stream) so a frame can be regenerated on
its own, in any order, with identical results on every platform.
"""
import numpy as np

MASK64 = (1 << 64) - 1

LIDAR = 1
VISUAL = 2
MOTION = 3
OUTLIER = 4
LINEARIZATION = 5
NORMALS = 6


def stream(seed: int, frame: int, kind: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & MASK64, counter=[0, 0, int(frame), int(kind)]))
