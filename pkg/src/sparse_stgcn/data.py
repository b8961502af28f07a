"""Skeleton sequences, input modalities, preprocessing, synthetic data, file I/O.

The on-disk dataset format is line-oriented text.  The header line is

    SKEL1 num_classes N T d

followed by one record line per sequence:

    label subject_id sample_id v1 v2 ... v(N*T*d)

with feature values flattened joint-major (joint, then frame, then
coordinate) and rendered with 17 significant digits so that float64
values round-trip exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sparse_stgcn.graph import SkeletonGraph

__all__ = [
    "ParseError",
    "SkeletonSequence",
    "Dataset",
    "to_modality",
    "map_modality",
    "preprocess",
    "synth_dataset",
    "save_dataset",
    "load_dataset",
    "MODALITIES",
]

MODALITIES = ("j", "jm", "b", "bm")


class ParseError(ValueError):
    """A dataset file is malformed, truncated, or violates its header."""


@dataclass
class SkeletonSequence:
    """One skeleton clip: features shaped (joints, frames, coords)."""

    features: np.ndarray
    label: int
    subject_id: int = 0
    sample_id: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise ValueError(
                f"sequence features must be (N, T, d), got {self.features.shape}"
            )

    @property
    def num_joints(self) -> int:
        return self.features.shape[0]

    @property
    def num_frames(self) -> int:
        return self.features.shape[1]


@dataclass
class Dataset:
    """A list of sequences plus the label-space size and a split tag."""

    sequences: list[SkeletonSequence]
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        for i, seq in enumerate(self.sequences):
            if not 0 <= seq.label < self.num_classes:
                raise ValueError(
                    f"sequence {i}: label {seq.label} out of range for "
                    f"{self.num_classes} classes"
                )

    def __len__(self) -> int:
        return len(self.sequences)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sequences], dtype=np.int64)


# ---------------------------------------------------------------------------
# modalities


def to_modality(seq: SkeletonSequence, graph: SkeletonGraph, kind: str) -> SkeletonSequence:
    """Derive an input modality from raw joint coordinates.

    ``j``  joints: the input unchanged.
    ``jm`` joint motion: frame difference, final frame zero.
    ``b``  bones: joint minus its parent joint; the root bone is zero.
    ``bm`` bone motion: frame difference of bones, final frame zero.
    """
    x = seq.features
    if kind == "j":
        out = x.copy()
    elif kind == "jm":
        out = _frame_diff(x)
    elif kind == "b":
        out = _bones(x, graph)
    elif kind == "bm":
        out = _frame_diff(_bones(x, graph))
    else:
        raise ValueError(f"unknown modality {kind!r}, expected one of {MODALITIES}")
    return SkeletonSequence(out, seq.label, seq.subject_id, seq.sample_id)


def _frame_diff(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    out[:, :-1, :] = x[:, 1:, :] - x[:, :-1, :]
    return out


def _bones(x: np.ndarray, graph: SkeletonGraph) -> np.ndarray:
    if x.shape[0] != graph.num_joints:
        raise ValueError(
            f"sequence has {x.shape[0]} joints but graph has {graph.num_joints}"
        )
    parents = np.asarray(graph.parents)
    # the root's parent is itself, so its bone comes out exactly zero
    return x - x[parents]


def map_modality(dataset: Dataset, graph: SkeletonGraph, kind: str) -> Dataset:
    """Apply ``to_modality`` to every sequence of a dataset."""
    return Dataset(
        [to_modality(s, graph, kind) for s in dataset.sequences],
        dataset.num_classes,
        dataset.split,
    )


# ---------------------------------------------------------------------------
# preprocessing


def preprocess(
    seq: SkeletonSequence,
    window_T: int,
    augment: bool,
    rng: np.random.Generator | None = None,
    root_joint: int = 0,
) -> SkeletonSequence:
    """Fit a sequence to a fixed temporal window and center it.

    Longer sequences are cropped to ``window_T`` frames: a uniformly
    random start when ``augment`` is true (training), the centered window
    otherwise.  Shorter sequences are loop-padded.  Finally the root
    joint of frame 0 is translated to the origin.
    """
    if window_T < 1:
        raise ValueError(f"window_T must be >= 1, got {window_T}")
    x = seq.features
    t = x.shape[1]
    if t > window_T:
        if augment:
            if rng is None:
                raise ValueError("augment=True requires an rng for the crop draw")
            start = int(rng.integers(0, t - window_T + 1))
        else:
            start = (t - window_T) // 2
        x = x[:, start : start + window_T, :]
    elif t < window_T:
        x = x[:, np.arange(window_T) % t, :]
    x = x - x[root_joint, 0, :]
    return SkeletonSequence(x, seq.label, seq.subject_id, seq.sample_id)


# ---------------------------------------------------------------------------
# synthetic data


def _class_template(c: int, num_classes: int, n: int, t: int, d: int) -> np.ndarray:
    """Deterministic sinusoid trajectory template for one class.

    Joints swing around a fixed base pose with a class-specific frequency
    and phase; each joint and coordinate adds its own phase offset so the
    template varies over the whole skeleton.
    """
    joints = np.arange(n)[:, None, None]
    frames = np.arange(t)[None, :, None]
    coords = np.arange(d)[None, None, :]
    base = (
        np.cos(2.0 * np.pi * np.arange(n) / n)[:, None]
        * ((1.0 + np.arange(d)) / d)[None, :]
    )
    freq = 1.0 + c
    phase = 2.0 * np.pi * c / num_classes
    swing = 0.5 * np.sin(
        2.0 * np.pi * freq * frames / t
        + phase
        + 2.0 * np.pi * joints / n
        + 0.5 * np.pi * coords
    )
    return base[:, None, :] + swing


def synth_dataset(
    num_classes: int,
    samples_per_class: int,
    num_joints: int,
    window_T: int,
    noise_sigma: float,
    seed: int,
    coords: int = 3,
    test_samples_per_class: int | None = None,
) -> tuple[Dataset, Dataset]:
    """Generate a seeded synthetic action-recognition task.

    Each class is one deterministic joint-trajectory template plus i.i.d.
    Gaussian noise per sample.  Train and test are disjoint draws from
    independent sub-streams of the seed.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if samples_per_class < 1 or num_joints < 1 or window_T < 1:
        raise ValueError("samples_per_class, num_joints, window_T must be >= 1")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if test_samples_per_class is None:
        test_samples_per_class = samples_per_class
    train_ss, test_ss = np.random.SeedSequence([int(seed)]).spawn(2)
    templates = [
        _class_template(c, num_classes, num_joints, window_T, coords)
        for c in range(num_classes)
    ]

    def draw(ss, per_class, split):
        rng = np.random.default_rng(ss)
        seqs = []
        sample_id = 0
        for c in range(num_classes):
            for i in range(per_class):
                noise = rng.normal(0.0, noise_sigma, templates[c].shape)
                seqs.append(
                    SkeletonSequence(templates[c] + noise, c, i, sample_id)
                )
                sample_id += 1
        return Dataset(seqs, num_classes, split)

    return draw(train_ss, samples_per_class, "train"), draw(
        test_ss, test_samples_per_class, "test"
    )


# ---------------------------------------------------------------------------
# file format


def save_dataset(path, dataset: Dataset) -> None:
    """Write a dataset in the SKEL1 text format.

    All sequences must share one (N, T, d) shape; an empty dataset is a
    bare header.
    """
    shapes = {s.features.shape for s in dataset.sequences}
    if len(shapes) > 1:
        raise ValueError(f"cannot save mixed sequence shapes {sorted(shapes)}")
    n, t, d = shapes.pop() if shapes else (0, 0, 0)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"SKEL1 {dataset.num_classes} {n} {t} {d}\n")
        for seq in dataset.sequences:
            values = " ".join(
                format(v, ".17g") for v in seq.features.reshape(-1)
            )
            head = f"{seq.label} {seq.subject_id} {seq.sample_id}"
            fh.write(f"{head} {values}\n" if values else f"{head}\n")


def load_dataset(path, split: str = "train") -> Dataset:
    """Read a SKEL1 dataset file, validating the header and every record.

    Raises ParseError with the record index (and the byte offset of the
    offending line) on malformed or truncated input.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = raw.split(b"\n")
    offset = 0
    header = lines[0]
    fields = header.split()
    if len(fields) != 5 or fields[0] != b"SKEL1":
        raise ParseError(f"bad header at byte offset 0: {header[:40]!r}")
    try:
        num_classes, n, t, d = (int(v) for v in fields[1:])
    except ValueError:
        raise ParseError(f"non-integer header field at byte offset 0") from None
    per_record = n * t * d
    offset = len(header) + 1
    sequences = []
    record = 0
    for line in lines[1:]:
        if not line.strip():
            offset += len(line) + 1
            continue
        tokens = line.split()
        if len(tokens) != 3 + per_record:
            raise ParseError(
                f"record {record}: expected {3 + per_record} fields, got "
                f"{len(tokens)} (byte offset {offset})"
            )
        try:
            label, subject, sample = (int(v) for v in tokens[:3])
            values = np.array(tokens[3:], dtype=np.float64)
        except ValueError:
            raise ParseError(
                f"record {record}: unparseable field (byte offset {offset})"
            ) from None
        if not 0 <= label < num_classes:
            raise ParseError(
                f"record {record}: label {label} out of range for "
                f"{num_classes} classes (byte offset {offset})"
            )
        sequences.append(
            SkeletonSequence(values.reshape(n, t, d), label, subject, sample)
        )
        record += 1
        offset += len(line) + 1
    return Dataset(sequences, num_classes, split)
