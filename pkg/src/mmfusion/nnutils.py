"""Small torch helpers: seeded construction and numpy bridging."""

import contextlib

import numpy as np
import torch


@contextlib.contextmanager
def deterministic_init(seed):
    """Seed torch inside a forked RNG scope.

    Module construction under this context is reproducible without
    disturbing the global torch RNG stream of the caller.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def to_tensor(x, dtype=torch.float32):
    """numpy array / list / tensor -> tensor of the requested dtype (copies numpy)."""
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.array(x), dtype=dtype)
