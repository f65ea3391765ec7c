"""Deterministic seed derivation.

Every stochastic component (weight init, sampler noise, SDS draws) gets its
own seed derived from the single run seed, so that adding a stage never
shifts the random stream of another.
"""

import hashlib

import numpy as np
import torch


def derive_seed(master: int, name: str) -> int:
    """Map (master seed, component name) to a stable 63-bit seed."""
    digest = hashlib.blake2b(f"{master}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def numpy_generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def string_seed(text: str, salt: str = "") -> int:
    """Stable seed for text-keyed toy embeddings."""
    digest = hashlib.blake2b(f"{salt}:{text}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1
