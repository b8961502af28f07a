"""Assembly of sparsity-level model variants and confidence analysis.

Several checkpoints of one architecture — typically trained at different
sparsity levels or on different input modalities — are combined by
averaging their softmax probabilities.  The module also accounts for the
combined kept-parameter budget and summarizes per-sample prediction
confidence (max probability, threshold counts, histogram).

An assembly is described by a small text file::

    ENSEMBLE1
    aggregation mean
    member 0.6 j level060.stgw
    member 0.8 jm level080.stgw

Member lines carry the sparsity level, the input modality (one of j,
jm, b, bm), and the checkpoint path; relative paths are resolved
against the spec file's directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .data import MODALITIES, Dataset, map_modality
from .graph import SkeletonGraph
from .masks import MaskSet, apply_mask
from .network import NetConfig, STGCNNetwork, count_params
from .seeding import stream_rng
from .training import predict_proba

__all__ = [
    "AGGREGATIONS",
    "EnsembleSpecError",
    "Member",
    "EnsembleSpec",
    "load_spec",
    "save_spec",
    "LoadedMember",
    "load_members",
    "member_probabilities",
    "assemble_predict",
    "fuse_streams",
    "param_fraction",
    "ConfidenceReport",
    "confidence_report",
]

AGGREGATIONS = ("mean",)
_MAGIC = "ENSEMBLE1"


class EnsembleSpecError(ValueError):
    """The assembly description is malformed or inconsistent."""


@dataclass(frozen=True)
class Member:
    """One assembly member: a checkpoint plus its level and input kind."""

    path: str
    sparsity: float
    modality: str

    def __post_init__(self):
        if not 0.0 <= self.sparsity < 1.0:
            raise EnsembleSpecError(
                f"member sparsity must lie in [0, 1), got {self.sparsity}"
            )
        if self.modality not in MODALITIES:
            raise EnsembleSpecError(
                f"member modality must be one of {MODALITIES}, got {self.modality!r}"
            )


@dataclass(frozen=True)
class EnsembleSpec:
    """Ordered members plus the aggregation rule."""

    members: tuple[Member, ...]
    aggregation: str = "mean"

    def __post_init__(self):
        if not self.members:
            raise EnsembleSpecError("an assembly needs at least one member")
        if self.aggregation not in AGGREGATIONS:
            raise EnsembleSpecError(
                f"aggregation must be one of {AGGREGATIONS}, "
                f"got {self.aggregation!r}"
            )


def load_spec(path) -> EnsembleSpec:
    """Parse an assembly description file.

    Raises EnsembleSpecError with the offending line number; member
    paths are resolved relative to the file's directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0].strip() != _MAGIC:
        raise EnsembleSpecError(f"line 1: expected {_MAGIC!r} header")
    aggregation = "mean"
    members = []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if key == "aggregation":
            aggregation = rest.strip()
        elif key == "member":
            fields = rest.split(None, 2)
            if len(fields) != 3:
                raise EnsembleSpecError(
                    f"line {lineno}: member needs <sparsity> <modality> <path>"
                )
            raw_s, modality, member_path = fields
            try:
                sparsity = float(raw_s)
            except ValueError:
                raise EnsembleSpecError(
                    f"line {lineno}: bad sparsity {raw_s!r}"
                ) from None
            if not os.path.isabs(member_path):
                member_path = os.path.join(base, member_path)
            try:
                members.append(Member(member_path, sparsity, modality))
            except EnsembleSpecError as exc:
                raise EnsembleSpecError(f"line {lineno}: {exc}") from None
        else:
            raise EnsembleSpecError(f"line {lineno}: unknown key {key!r}")
    try:
        return EnsembleSpec(tuple(members), aggregation)
    except EnsembleSpecError as exc:
        raise EnsembleSpecError(f"{path}: {exc}") from None


def save_spec(path, spec: EnsembleSpec) -> None:
    """Write an assembly description file (paths verbatim)."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"{_MAGIC}\n")
        fh.write(f"aggregation {spec.aggregation}\n")
        for m in spec.members:
            fh.write(f"member {format(m.sparsity, '.17g')} {m.modality} {m.path}\n")


# ---------------------------------------------------------------------------
# member loading


@dataclass(frozen=True)
class LoadedMember:
    """A member's network and mask, ready for inference."""

    member: Member
    net: STGCNNetwork
    mask: MaskSet | None


def load_members(
    spec: EnsembleSpec, config: NetConfig, graph: SkeletonGraph
) -> list[LoadedMember]:
    """Instantiate one network per member and load its checkpoint.

    All members must fit the single given architecture; a member whose
    checkpoint disagrees (missing file, wrong shapes) raises
    EnsembleSpecError naming the member index.
    """
    loaded = []
    for i, member in enumerate(spec.members):
        net = STGCNNetwork(config, graph, stream_rng(0, "init"))
        try:
            mask = load_checkpoint(member.path, net)
        except FileNotFoundError:
            raise EnsembleSpecError(
                f"member {i}: checkpoint {member.path} does not exist"
            ) from None
        except CheckpointError as exc:
            raise EnsembleSpecError(f"member {i}: {exc}") from None
        loaded.append(LoadedMember(member, net, mask))
    return loaded


# ---------------------------------------------------------------------------
# prediction

def member_probabilities(
    net: STGCNNetwork,
    mask: MaskSet | None,
    dataset: Dataset,
    graph: SkeletonGraph,
    modality: str = "j",
    *,
    window: int = 64,
    batch_size: int = 256,
) -> np.ndarray:
    """Softmax probabilities of one member on its input modality.

    The raw sequences are mapped to the member's modality, the mask is
    applied for the duration of the pass, and the prior mask state is
    restored afterwards.
    """
    mapped = map_modality(dataset, graph, modality)
    prior = net.mask
    apply_mask(net, mask)
    try:
        return predict_proba(net, mapped, window=window, batch_size=batch_size)
    finally:
        net.set_mask(prior)


def _aggregate(stacked: np.ndarray) -> np.ndarray:
    """Mean over the member axis, invariant to member order bit-for-bit.

    Each cell's addends are sorted before summation, so any permutation
    of members produces the identical float result.
    """
    return np.sort(stacked, axis=0).sum(axis=0) / stacked.shape[0]


def assemble_predict(
    members: list[LoadedMember],
    dataset: Dataset,
    graph: SkeletonGraph,
    *,
    window: int = 64,
    batch_size: int = 256,
) -> np.ndarray:
    """Averaged class probabilities of all members on one dataset.

    Every member sees the same raw sequences through its own modality
    mapping; the aggregate is the unweighted mean of the members'
    softmax probabilities (rows still sum to 1).
    """
    if not members:
        raise EnsembleSpecError("an assembly needs at least one member")
    classes = members[0].net.config.num_classes
    for i, lm in enumerate(members):
        if lm.net.config.num_classes != classes:
            raise EnsembleSpecError(
                f"member {i}: has {lm.net.config.num_classes} classes, "
                f"member 0 has {classes}"
            )
    probs = np.stack(
        [
            member_probabilities(
                lm.net, lm.mask, dataset, graph, lm.member.modality,
                window=window, batch_size=batch_size,
            )
            for lm in members
        ]
    )
    return _aggregate(probs)


def fuse_streams(
    streams: dict[str, LoadedMember],
    dataset: Dataset,
    graph: SkeletonGraph,
    *,
    modalities: tuple[str, ...] = MODALITIES,
    window: int = 64,
    batch_size: int = 256,
) -> np.ndarray:
    """Average the modality streams' probabilities (all four by default).

    ``streams`` maps modalities to their trained members; a requested
    modality without a stream is a spec error.  Each stream is evaluated
    on the same raw sequences through its own modality mapping.
    """
    unknown = [m for m in modalities if m not in MODALITIES]
    if unknown:
        raise EnsembleSpecError(f"unknown modalities requested: {unknown}")
    missing = [m for m in modalities if m not in streams]
    if missing:
        raise EnsembleSpecError(f"missing modality streams: {missing}")
    members = []
    for modality in modalities:
        lm = streams[modality]
        members.append(
            LoadedMember(
                Member(lm.member.path, lm.member.sparsity, modality),
                lm.net,
                lm.mask,
            )
        )
    return assemble_predict(
        members, dataset, graph, window=window, batch_size=batch_size
    )


# ---------------------------------------------------------------------------
# parameter accounting

def param_fraction(members: list[LoadedMember]) -> float:
    """Combined kept fraction: total kept bits over one backbone's size.

    Unmasked members count as fully kept.  Computed as a single division
    so exact-count masks give exact decimals ({0.6, 0.8, 0.95, 0.99}
    yields 0.66 exactly).
    """
    if not members:
        raise EnsembleSpecError("an assembly needs at least one member")
    totals = {count_params(lm.net.registry(), maskable_only=True) for lm in members}
    if len(totals) != 1:
        raise EnsembleSpecError(
            f"members disagree on maskable parameter count: {sorted(totals)}"
        )
    total = totals.pop()
    kept = sum(
        lm.mask.kept_count() if lm.mask is not None else total for lm in members
    )
    return kept / total


# ---------------------------------------------------------------------------
# confidence analysis

_HIST_BINS = 20


@dataclass(frozen=True)
class ConfidenceReport:
    """Per-sample max-probability summary of one prediction matrix."""

    max_probs: np.ndarray
    threshold: float
    below_count: int
    histogram: np.ndarray  # counts over _HIST_BINS uniform bins on [0, 1]
    mean: float
    median: float
    q1: float
    q3: float

    @property
    def sample_count(self) -> int:
        return int(self.max_probs.size)

    @property
    def below_fraction(self) -> float:
        return self.below_count / self.sample_count

    def save(self, path) -> None:
        """Write one row per sample plus a '#'-prefixed summary block."""
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("sample_id,max_prob,below_threshold\n")
            for i, p in enumerate(self.max_probs):
                fh.write(f"{i},{format(p, '.17g')},{int(p < self.threshold)}\n")
            fh.write(f"# samples {self.sample_count}\n")
            fh.write(f"# threshold {format(self.threshold, '.17g')}\n")
            fh.write(
                f"# below {self.below_count} "
                f"{format(self.below_fraction, '.17g')}\n"
            )
            fh.write(f"# mean {format(self.mean, '.17g')}\n")
            fh.write(f"# median {format(self.median, '.17g')}\n")
            fh.write(f"# q1 {format(self.q1, '.17g')}\n")
            fh.write(f"# q3 {format(self.q3, '.17g')}\n")
            fh.write("# histogram " + " ".join(str(c) for c in self.histogram) + "\n")


def confidence_report(probs: np.ndarray, threshold: float = 0.5) -> ConfidenceReport:
    """Summarize per-sample max probabilities of a prediction matrix.

    Each row must be a probability vector (sum within 1e-6 of 1).  The
    histogram uses 20 uniform bins over [0, 1] and its mass equals the
    sample count.
    """
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError(f"need a nonempty (samples x classes) matrix, got {probs.shape}")
    sums = probs.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-6)
    if bad.size:
        raise ValueError(
            f"row {bad[0]} sums to {sums[bad[0]]!r}, not a probability vector"
        )
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    max_probs = probs.max(axis=1)
    hist, _ = np.histogram(max_probs, bins=_HIST_BINS, range=(0.0, 1.0))
    q1, median, q3 = np.quantile(max_probs, [0.25, 0.5, 0.75])
    report = ConfidenceReport(
        max_probs=max_probs,
        threshold=float(threshold),
        below_count=int(np.sum(max_probs < threshold)),
        histogram=hist,
        mean=float(max_probs.mean()),
        median=float(median),
        q1=float(q1),
        q3=float(q3),
    )
    if int(report.histogram.sum()) != report.sample_count:
        raise AssertionError("histogram mass must equal the sample count")
    return report
