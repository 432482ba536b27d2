import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Named, independent random stream derived from one run seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])
