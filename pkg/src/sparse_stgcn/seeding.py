"""Deterministic seed derivation.

All randomness in a run flows from one non-negative root seed, split
into named sub-streams so that, for example, changing the mask draw can
never perturb parameter initialization or batch order.
"""

from __future__ import annotations

import numpy as np

__all__ = ["STREAMS", "stream_rng", "epoch_rng"]

STREAMS = {"init": 0, "mask": 1, "order": 2, "synth": 3}


def _check_root(root_seed: int) -> int:
    root_seed = int(root_seed)
    if root_seed < 0:
        raise ValueError(f"root seed must be non-negative, got {root_seed}")
    return root_seed


def stream_rng(root_seed: int, stream: str) -> np.random.Generator:
    """Generator for one named sub-stream of the root seed."""
    return np.random.default_rng(
        np.random.SeedSequence([_check_root(root_seed), STREAMS[stream]])
    )


def epoch_rng(root_seed: int, stream: str, epoch: int) -> np.random.Generator:
    """Generator that is a pure function of (root seed, stream, epoch)."""
    return np.random.default_rng(
        np.random.SeedSequence([_check_root(root_seed), STREAMS[stream], int(epoch)])
    )
