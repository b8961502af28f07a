"""Spatial-temporal graph convolution networks over skeleton sequences.

Layout is (batch, channels, frames, joints) throughout.  Each block runs
a spatial graph convolution (adjacency propagation then a channels-mixing
linear map), batch norm, relu, a depthwise temporal convolution, batch
norm, relu; when input and output widths match and the residual flag is
set, the block input is added to the temporal convolution output just
before the second batch norm.  Convolutions carry no bias terms: the
batch-norm beta parameters play that role.  A mean pool over frames and
joints plus a linear head produce class logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from sparse_stgcn import autodiff as ad
from sparse_stgcn.autodiff import ShapeError, Tensor
from sparse_stgcn.data import SkeletonSequence
from sparse_stgcn.graph import SkeletonGraph

__all__ = [
    "BatchingError",
    "NetConfig",
    "RegistryEntry",
    "ParamRegistry",
    "count_params",
    "SGCNLayer",
    "TGCNLayer",
    "STGCNBlock",
    "STGCNNetwork",
    "copy_network",
    "stack_batch",
]

MASKABLE_KINDS = ("theta", "omega")


class BatchingError(ValueError):
    """Sequences in one batch do not share a common shape."""


@dataclass(frozen=True)
class NetConfig:
    """Architecture of an ST-GCN classifier.

    ``channels`` lists the output width of every block; the temporal
    kernel spans 2 * temporal_half_window - 1 frames.  ``adjacency``
    selects the joint-propagation matrix: degree-normalized (default)
    or the raw 0/1 bone matrix.
    """

    num_classes: int
    num_joints: int = 17
    in_channels: int = 3
    channels: tuple[int, ...] = (32, 32, 64, 64)
    temporal_half_window: int = 3
    residual: bool = True
    adjacency: str = "normalized"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.channels:
            raise ValueError("channels must list at least one block width")
        if self.temporal_half_window < 1:
            raise ValueError(
                f"temporal_half_window must be >= 1, got {self.temporal_half_window}"
            )
        if self.adjacency not in ("normalized", "raw"):
            raise ValueError(f"adjacency must be 'normalized' or 'raw', got {self.adjacency!r}")

    @property
    def temporal_kernel(self) -> int:
        return 2 * self.temporal_half_window - 1


@dataclass(frozen=True)
class RegistryEntry:
    """One named parameter group: kind is theta, omega, bn, or head."""

    name: str
    kind: str
    tensor: Tensor
    maskable: bool


class ParamRegistry:
    """Ordered, named view of every trainable parameter of a network.

    Order is construction order and is the canonical order for mask
    concatenation, checkpoint payloads, and optimizer state.  Exactly the
    ``theta`` and ``omega`` kinds are maskable.
    """

    def __init__(self, entries: list[RegistryEntry]):
        self.entries = tuple(entries)
        self.by_name = {e.name: e for e in self.entries}
        if len(self.by_name) != len(self.entries):
            raise ValueError("duplicate parameter names in registry")

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def maskable(self) -> list[RegistryEntry]:
        return [e for e in self.entries if e.maskable]


def count_params(registry: ParamRegistry, maskable_only: bool = False) -> int:
    """Total element count over the registry (optionally maskable groups only)."""
    return sum(
        e.tensor.size for e in registry if e.maskable or not maskable_only
    )


def _effective(name, param, overrides, mask):
    if overrides is not None and name in overrides:
        return overrides[name]
    if mask is not None and name in mask:
        return ad.select(param, mask[name])
    return param


class SGCNLayer:
    """Spatial graph convolution: propagate joints, then mix channels."""

    def __init__(self, name: str, c_in: int, c_out: int, adjacency: np.ndarray, rng):
        self.name = f"{name}.theta"
        self.theta = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / c_in), (c_in, c_out)), requires_grad=True
        )
        # transposed once so propagation is a plain right-multiplication
        self._adj_t = np.ascontiguousarray(adjacency.T)

    def forward(self, x: Tensor, overrides=None, mask=None) -> Tensor:
        n = x.shape[-1]
        if n != self._adj_t.shape[0]:
            raise ShapeError(
                f"sgcn: batch has {n} joints but adjacency is {self._adj_t.shape}"
            )
        theta = _effective(self.name, self.theta, overrides, mask)
        return ad.spatial_graph_conv(x, self._adj_t, theta)


class TGCNLayer:
    """Depthwise temporal convolution with a per-channel kernel."""

    def __init__(self, name: str, channels: int, kernel: int, rng):
        self.name = f"{name}.omega"
        self.omega = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / kernel), (channels, kernel)),
            requires_grad=True,
        )

    def forward(self, x: Tensor, overrides=None, mask=None) -> Tensor:
        omega = _effective(self.name, self.omega, overrides, mask)
        return ad.depthwise_time_conv(x, omega)


class _BatchNorm:
    """Channel batch norm with running statistics buffers.

    When ``refresh`` is set, the next train-mode forward replaces the
    running buffers with that batch's statistics instead of blending
    them in; the flag then clears itself.  An exponential average needs
    many epochs to follow a large shift in activation scale, so callers
    that change the network discontinuously (hard-zeroing most weights)
    re-bootstrap the buffers this way.
    """

    def __init__(self, name: str, channels: int):
        self.name = name
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.refresh = False

    def forward(self, x: Tensor, training: bool) -> Tensor:
        momentum = 0.1
        if training and self.refresh:
            momentum = 1.0
            self.refresh = False
        return ad.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training,
            momentum=momentum,
        )


class STGCNBlock:
    """sgcn -> bn -> relu -> tgcn (+ residual) -> bn -> relu."""

    def __init__(self, name, c_in, c_out, kernel, adjacency, residual, rng):
        self.name = name
        self.sgcn = SGCNLayer(f"{name}.sgcn", c_in, c_out, adjacency, rng)
        self.tgcn = TGCNLayer(f"{name}.tgcn", c_out, kernel, rng)
        self.bn1 = _BatchNorm(f"{name}.bn1", c_out)
        self.bn2 = _BatchNorm(f"{name}.bn2", c_out)
        self.residual = residual and c_in == c_out

    def forward(self, x: Tensor, training: bool, overrides=None, mask=None) -> Tensor:
        h = self.sgcn.forward(x, overrides, mask)
        h = ad.relu(self.bn1.forward(h, training))
        h = self.tgcn.forward(h, overrides, mask)
        if self.residual:
            h = ad.add(h, x)
        return ad.relu(self.bn2.forward(h, training))


class STGCNNetwork:
    """Stack of ST-GCN blocks with a mean-pool linear classification head."""

    def __init__(self, config: NetConfig, graph: SkeletonGraph, rng: np.random.Generator):
        if graph.num_joints != config.num_joints:
            raise ValueError(
                f"graph has {graph.num_joints} joints, config expects {config.num_joints}"
            )
        self.config = config
        self.graph = graph
        adjacency = graph.matrix(config.adjacency)
        self.blocks: list[STGCNBlock] = []
        c_in = config.in_channels
        for i, c_out in enumerate(config.channels, start=1):
            self.blocks.append(
                STGCNBlock(
                    f"block{i}", c_in, c_out, config.temporal_kernel,
                    adjacency, config.residual, rng,
                )
            )
            c_in = c_out
        self.head_weight = Tensor(
            rng.normal(0.0, np.sqrt(1.0 / c_in), (c_in, config.num_classes)),
            requires_grad=True,
        )
        self.head_bias = Tensor(np.zeros(config.num_classes), requires_grad=True)
        self._mask: dict[str, np.ndarray] | None = None

    # -- parameters and buffers ------------------------------------------

    def registry(self) -> ParamRegistry:
        entries = []
        for blk in self.blocks:
            entries.append(RegistryEntry(blk.sgcn.name, "theta", blk.sgcn.theta, True))
            entries.append(RegistryEntry(blk.tgcn.name, "omega", blk.tgcn.omega, True))
            for bn in (blk.bn1, blk.bn2):
                entries.append(RegistryEntry(f"{bn.name}.gamma", "bn", bn.gamma, False))
                entries.append(RegistryEntry(f"{bn.name}.beta", "bn", bn.beta, False))
        entries.append(RegistryEntry("head.weight", "head", self.head_weight, False))
        entries.append(RegistryEntry("head.bias", "head", self.head_bias, False))
        return ParamRegistry(entries)

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        """Running batch-norm statistics, in block order."""
        out = []
        for blk in self.blocks:
            for bn in (blk.bn1, blk.bn2):
                out.append((f"{bn.name}.running_mean", bn.running_mean))
                out.append((f"{bn.name}.running_var", bn.running_var))
        return out

    def refresh_running_stats(self) -> None:
        """Rebuild every running buffer from the next train-mode batch."""
        for blk in self.blocks:
            blk.bn1.refresh = True
            blk.bn2.refresh = True

    # -- masking -----------------------------------------------------------

    def set_mask(self, keep_by_name: Mapping[str, np.ndarray] | None) -> None:
        """Install (or clear) per-group boolean keep masks used by forward."""
        if keep_by_name is None:
            self._mask = None
            return
        self._mask = {k: np.asarray(v, dtype=bool) for k, v in keep_by_name.items()}

    @property
    def mask(self) -> dict[str, np.ndarray] | None:
        return self._mask

    # -- forward -----------------------------------------------------------

    def forward(
        self,
        x: Tensor,
        mode: str = "train",
        overrides: Mapping[str, Tensor] | None = None,
    ) -> Tensor:
        """Class logits for a (B, C, T, N) batch.

        ``mode`` selects batch-norm behavior (train statistics vs running
        buffers).  ``overrides`` substitutes effective weight tensors for
        maskable groups by registry name, taking precedence over any
        installed mask.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"network input must be (B, {self.config.in_channels}, T, N), got {x.shape}"
            )
        training = mode == "train"
        h = x
        for blk in self.blocks:
            h = blk.forward(h, training, overrides, self._mask)
        pooled = ad.mean_pool(h)
        return ad.add_bias(ad.matmul(pooled, self.head_weight), self.head_bias)


def copy_network(net: STGCNNetwork) -> STGCNNetwork:
    """Deep copy: same architecture, parameter values, buffers, and mask."""
    twin = STGCNNetwork(net.config, net.graph, np.random.default_rng(0))
    source = net.registry().by_name
    for entry in twin.registry():
        entry.tensor.data = source[entry.name].tensor.data.copy()
    source_buffers = dict(net.buffers())
    for name, buf in twin.buffers():
        buf[...] = source_buffers[name]
    twin.set_mask(dict(net.mask) if net.mask is not None else None)
    return twin


def stack_batch(sequences: list[SkeletonSequence]) -> tuple[Tensor, np.ndarray]:
    """Stack sequences into a (B, C, T, N) input tensor plus labels.

    Every sequence must share one (N, T, d) shape.
    """
    if not sequences:
        raise BatchingError("empty batch")
    shapes = {s.features.shape for s in sequences}
    if len(shapes) != 1:
        raise BatchingError(f"inconsistent sequence shapes in batch: {sorted(shapes)}")
    feats = np.stack([np.transpose(s.features, (2, 1, 0)) for s in sequences])
    labels = np.array([s.label for s in sequences], dtype=np.int64)
    return Tensor(feats), labels
