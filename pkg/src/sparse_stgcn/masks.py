"""Binary masks over maskable parameter groups and how they are produced.

A mask assigns one keep/drop bit to every element of every maskable
group (the spatial ``theta`` and temporal ``omega`` convolution weights;
batch-norm and head parameters are never masked).  Masks come from three
sources: thresholding learned scores (lottery-ticket mode), a seeded
random draw (sparse-generator mode), or a checkpoint's mask section.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sparse_stgcn import autodiff as ad
from sparse_stgcn.autodiff import Tensor
from sparse_stgcn.network import ParamRegistry, STGCNNetwork

__all__ = [
    "MaskError",
    "MaskSet",
    "MaskScores",
    "binarize",
    "random_mask",
    "apply_mask",
    "masked_weights",
    "ste_weights",
    "sparsity_report",
    "SparsityReport",
]


class MaskError(ValueError):
    """A mask does not line up with the registry it is applied to."""


@dataclass(frozen=True)
class MaskSet:
    """Immutable keep/drop bits per maskable group, in registry order.

    ``sparsity`` is the requested zero fraction S; ``seed`` records the
    draw seed for random masks (None for learned or loaded-legacy masks).
    """

    entries: tuple[tuple[str, np.ndarray], ...]
    sparsity: float
    seed: int | None = None

    @classmethod
    def from_entries(cls, entries, sparsity: float, seed: int | None = None) -> "MaskSet":
        frozen = []
        for name, keep in entries:
            keep = np.asarray(keep, dtype=bool).copy()
            keep.setflags(write=False)
            frozen.append((name, keep))
        return cls(tuple(frozen), float(sparsity), seed)

    def keep_by_name(self) -> dict[str, np.ndarray]:
        return dict(self.entries)

    def kept_count(self) -> int:
        return int(sum(keep.sum() for _, keep in self.entries))

    def total_count(self) -> int:
        return int(sum(keep.size for _, keep in self.entries))


@dataclass
class MaskScores:
    """Learnable real-valued scores mirroring the maskable groups."""

    entries: list[tuple[str, Tensor]]

    @classmethod
    def from_registry(
        cls,
        registry: ParamRegistry,
        init: str = "magnitude",
        rng: np.random.Generator | None = None,
    ) -> "MaskScores":
        """Scores init: |W0| per group (default) or uniform random in [0, 1)."""
        entries = []
        for e in registry.maskable():
            if init == "magnitude":
                values = np.abs(e.tensor.data)
            elif init == "uniform":
                if rng is None:
                    raise ValueError("uniform score init requires an rng")
                values = rng.uniform(0.0, 1.0, e.tensor.shape)
            else:
                raise ValueError(f"unknown score init {init!r}")
            entries.append((e.name, Tensor(values, requires_grad=True)))
        return cls(entries)

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.entries]


def _score_arrays(scores) -> list[tuple[str, np.ndarray]]:
    if isinstance(scores, MaskScores):
        return [(name, t.data) for name, t in scores.entries]
    return [(name, np.asarray(a, dtype=np.float64)) for name, a in scores]


def binarize(scores, sparsity: float) -> MaskSet:
    """Zero the globally smallest scores, keep the rest.

    Produces exactly round(S * n) zeros over the concatenation of all
    groups.  Ties at the threshold break deterministically by ascending
    (group index, flat index), achieved with a stable sort over the
    concatenation in registry order.  The ranking only compares score
    values, so any positive rescaling of all scores yields the same mask.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must be in [0, 1], got {sparsity}")
    arrays = _score_arrays(scores)
    sizes = [a.size for _, a in arrays]
    total = int(sum(sizes))
    flat = (
        np.concatenate([a.reshape(-1) for _, a in arrays])
        if total
        else np.empty(0)
    )
    zeros = int(round(sparsity * total))
    order = np.argsort(flat, kind="stable")
    keep_flat = np.ones(total, dtype=bool)
    keep_flat[order[:zeros]] = False
    entries = []
    at = 0
    for (name, a), size in zip(arrays, sizes):
        entries.append((name, keep_flat[at : at + size].reshape(a.shape)))
        at += size
    return MaskSet.from_entries(entries, sparsity)


def random_mask(registry: ParamRegistry, sparsity: float, seed: int) -> MaskSet:
    """Seeded uniform-random mask with the exact global zero count."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    scores = [
        (e.name, rng.uniform(0.0, 1.0, e.tensor.shape)) for e in registry.maskable()
    ]
    mask = binarize(scores, sparsity)
    return MaskSet(mask.entries, mask.sparsity, int(seed))


def _check_alignment(registry: ParamRegistry, mask: MaskSet) -> None:
    maskable = registry.maskable()
    names = [e.name for e in maskable]
    mask_names = [name for name, _ in mask.entries]
    if names != mask_names:
        raise MaskError(f"mask groups {mask_names} do not match registry {names}")
    for e, (_, keep) in zip(maskable, mask.entries):
        if keep.shape != e.tensor.shape:
            raise MaskError(
                f"mask for {e.name} has shape {keep.shape}, parameter is {e.tensor.shape}"
            )


def apply_mask(net: STGCNNetwork, mask: MaskSet | None) -> None:
    """Install a mask so forward passes consume keep ⊙ W (or clear it)."""
    if mask is None:
        net.set_mask(None)
        return
    _check_alignment(net.registry(), mask)
    net.set_mask(mask.keep_by_name())


def masked_weights(registry: ParamRegistry, mask: MaskSet) -> dict[str, Tensor]:
    """Effective weight tensors keep ⊙ W for every maskable group."""
    _check_alignment(registry, mask)
    keep = mask.keep_by_name()
    return {
        e.name: ad.select(e.tensor, keep[e.name]) for e in registry.maskable()
    }


def ste_weights(
    registry: ParamRegistry, scores: MaskScores, sparsity: float
) -> tuple[dict[str, Tensor], MaskSet]:
    """Effective weights S(m) ⊙ W0 with a straight-through backward.

    The mask is re-binarized from the current scores.  Forward produces
    keep ⊙ W0 bit-exactly; backward treats the binarization as identity,
    so the score gradient is the loss gradient at the effective weight
    times W0.  The frozen weights receive no gradient.
    """
    mask = binarize(scores, sparsity)
    keep = mask.keep_by_name()
    by_name = {name: t for name, t in scores.entries}
    out: dict[str, Tensor] = {}
    for e in registry.maskable():
        if e.tensor.requires_grad:
            raise ValueError(
                f"straight-through masking requires frozen weights, but "
                f"{e.name} has requires_grad set"
            )
        score = by_name.get(e.name)
        if score is None or score.shape != e.tensor.shape:
            raise MaskError(f"scores missing or misshapen for group {e.name}")
        w0 = e.tensor.data
        out_data = np.where(keep[e.name], w0, 0.0)
        if not ad._wants_grad(score):
            out[e.name] = Tensor(out_data)
            continue
        eff = Tensor(out_data, requires_grad=True)

        def backward_fn(g, score=score, w0=w0):
            ad._accumulate(score, g * w0)

        ad._record(eff, backward_fn)
        out[e.name] = eff
    return out, mask


@dataclass(frozen=True)
class SparsityReport:
    """Kept/total counts per group plus the global tally."""

    rows: tuple[tuple[str, int, int], ...]
    kept: int
    total: int

    @property
    def kept_fraction(self) -> float:
        return self.kept / self.total if self.total else 1.0

    def lines(self) -> list[str]:
        out = [
            f"{name} kept {kept}/{total} ({kept / total:.4f})"
            for name, kept, total in self.rows
        ]
        out.append(
            f"global kept {self.kept}/{self.total} ({self.kept_fraction:.4f})"
        )
        return out


def sparsity_report(mask: MaskSet, registry: ParamRegistry | None = None) -> SparsityReport:
    """Per-group and global kept counts, ordered like the registry."""
    if registry is not None:
        _check_alignment(registry, mask)
    rows = tuple(
        (name, int(keep.sum()), int(keep.size)) for name, keep in mask.entries
    )
    return SparsityReport(rows, mask.kept_count(), mask.total_count())
