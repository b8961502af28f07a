"""Skeleton graphs: joint trees, adjacency, and symmetric normalization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["GraphError", "SkeletonGraph", "build_graph", "human17_parents"]


class GraphError(ValueError):
    """The joint parent map does not describe a single rooted tree."""


# Default 17-joint human-like tree, one bone per non-root joint:
# pelvis -> spine -> chest -> neck -> head, two arms off the chest,
# two legs off the pelvis.
_HUMAN17 = {
    0: 0,  # pelvis (root)
    1: 0,  # spine
    2: 1,  # chest
    3: 2,  # neck
    4: 3,  # head
    5: 2,  # left shoulder
    6: 5,  # left elbow
    7: 6,  # left wrist
    8: 2,  # right shoulder
    9: 8,  # right elbow
    10: 9,  # right wrist
    11: 0,  # left hip
    12: 11,  # left knee
    13: 12,  # left ankle
    14: 0,  # right hip
    15: 14,  # right knee
    16: 15,  # right ankle
}


def human17_parents() -> dict[int, int]:
    """Parent map of the default 17-joint skeleton (root is joint 0)."""
    return dict(_HUMAN17)


@dataclass(frozen=True)
class SkeletonGraph:
    """A rooted joint tree with raw and degree-normalized adjacency.

    ``adjacency`` is the symmetric 0/1 bone matrix without self loops;
    ``normalized`` is D^{-1/2} (A + I) D^{-1/2} where D is the degree
    matrix of A + I.  Both are read-only.
    """

    parents: tuple[int, ...]
    root: int
    adjacency: np.ndarray = field(repr=False)
    normalized: np.ndarray = field(repr=False)

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    def matrix(self, kind: str) -> np.ndarray:
        """Return the requested adjacency: ``raw`` or ``normalized``."""
        if kind == "raw":
            return self.adjacency
        if kind == "normalized":
            return self.normalized
        raise ValueError(f"unknown adjacency kind {kind!r}")


def build_graph(parents) -> SkeletonGraph:
    """Build a skeleton graph from a joint -> parent map.

    ``parents`` maps each joint index to its parent; the root maps to
    itself.  Rejects maps that are not a single rooted tree (no root,
    several roots, cycles, out-of-range parents).
    """
    if isinstance(parents, dict):
        n = len(parents)
        if sorted(parents) != list(range(n)):
            raise GraphError("parent map keys must be exactly 0..n-1")
        plist = [parents[i] for i in range(n)]
    else:
        plist = list(parents)
        n = len(plist)
    if n == 0:
        raise GraphError("empty parent map")
    for i, p in enumerate(plist):
        if not 0 <= p < n:
            raise GraphError(f"joint {i} has out-of-range parent {p}")
    roots = [i for i, p in enumerate(plist) if p == i]
    if len(roots) != 1:
        raise GraphError(f"expected exactly one root joint, found {roots}")
    root = roots[0]
    # every joint must reach the root without revisiting a joint
    for i in range(n):
        seen = set()
        j = i
        while j != root:
            if j in seen:
                raise GraphError(f"cycle detected at joint {j}")
            seen.add(j)
            j = plist[j]
    adjacency = np.zeros((n, n))
    for i, p in enumerate(plist):
        if i != root:
            adjacency[i, p] = 1.0
            adjacency[p, i] = 1.0
    with_self = adjacency + np.eye(n)
    inv_sqrt_deg = 1.0 / np.sqrt(with_self.sum(axis=1))
    normalized = with_self * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]
    adjacency.setflags(write=False)
    normalized.setflags(write=False)
    return SkeletonGraph(
        parents=tuple(plist), root=root, adjacency=adjacency, normalized=normalized
    )
