"""Named random sub-streams derived from one experiment seed."""
import zlib

import numpy as np
import torch


def derive_seed(seed: int, name: str) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def numpy_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, name))


def torch_gen(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, name))
    return g
