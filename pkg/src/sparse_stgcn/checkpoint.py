"""Binary checkpoint container for networks and their masks.

Layout, in order:

    STGW1\n
    tensors <count>\n
    <name> <kind> <maskable 0|1> <ndim> <dim...>\n     (one per tensor)
    raw little-endian float64 payloads, manifest order
    mask <sparsity> <seed>\n + bit-packed keep bits     (or: nomask\n)

The manifest covers every trainable parameter in registry order followed
by the batch-norm running statistics (kind ``bn``), so a load restores
evaluation behavior exactly.  Keep bits concatenate maskable groups in
registry order, most significant bit first within each byte.  Round
trips are bit-exact.
"""

from __future__ import annotations

import math

import numpy as np

from sparse_stgcn.masks import MaskSet
from sparse_stgcn.network import STGCNNetwork

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint"]

_MAGIC = b"STGW1\n"


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the architecture."""


def _manifest(net: STGCNNetwork) -> list[tuple[str, str, bool, np.ndarray]]:
    rows = [(e.name, e.kind, e.maskable, e.tensor.data) for e in net.registry()]
    rows.extend((name, "bn", False, buf) for name, buf in net.buffers())
    return rows


def save_checkpoint(path, net: STGCNNetwork, mask: MaskSet | None = None) -> None:
    """Write parameters, running statistics, and an optional mask."""
    rows = _manifest(net)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(f"tensors {len(rows)}\n".encode("ascii"))
        for name, kind, maskable, arr in rows:
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(
                f"{name} {kind} {int(maskable)} {arr.ndim}"
                f"{' ' + dims if dims else ''}\n".encode("ascii")
            )
        for _, _, _, arr in rows:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if mask is None:
            fh.write(b"nomask\n")
        else:
            seed = -1 if mask.seed is None else int(mask.seed)
            fh.write(
                f"mask {format(mask.sparsity, '.17g')} {seed}\n".encode("ascii")
            )
            bits = np.concatenate(
                [keep.reshape(-1) for _, keep in mask.entries]
            ).astype(np.uint8)
            fh.write(np.packbits(bits).tobytes())


def _read_line(buf: bytes, pos: int) -> tuple[bytes, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise CheckpointError(f"truncated checkpoint at byte offset {pos}")
    return buf[pos:end], end + 1


def load_checkpoint(path, net: STGCNNetwork) -> MaskSet | None:
    """Restore a network in place; returns the embedded mask, if any.

    The file's manifest must match the network's registry and buffers
    exactly (names, kinds, shapes, maskable flags).
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(_MAGIC):
        raise CheckpointError(f"bad magic {buf[:6]!r}, expected {_MAGIC!r}")
    pos = len(_MAGIC)
    line, pos = _read_line(buf, pos)
    parts = line.split()
    if len(parts) != 2 or parts[0] != b"tensors":
        raise CheckpointError(f"bad tensor count line {line!r}")
    count = int(parts[1])
    expected = _manifest(net)
    if count != len(expected):
        raise CheckpointError(
            f"checkpoint has {count} tensors, architecture has {len(expected)}"
        )
    shapes = []
    for i, (name, kind, maskable, arr) in enumerate(expected):
        line, pos = _read_line(buf, pos)
        fields = line.split()
        if len(fields) < 4:
            raise CheckpointError(f"bad manifest row {i}: {line!r}")
        got_name = fields[0].decode("ascii")
        got_kind = fields[1].decode("ascii")
        got_maskable = fields[2] == b"1"
        shape = tuple(int(v) for v in fields[4 : 4 + int(fields[3])])
        if (got_name, got_kind, got_maskable, shape) != (
            name,
            kind,
            maskable,
            arr.shape,
        ):
            raise CheckpointError(
                f"manifest row {i} is {got_name}/{got_kind}/shape {shape}, "
                f"architecture expects {name}/{kind}/shape {arr.shape}"
            )
        shapes.append(shape)
    registry = net.registry()
    for (name, kind, maskable, arr), shape in zip(expected, shapes):
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 8 * size
        if pos + nbytes > len(buf):
            raise CheckpointError(f"truncated payload for {name} at byte offset {pos}")
        values = np.frombuffer(buf[pos : pos + nbytes], dtype="<f8").reshape(shape)
        pos += nbytes
        # parameters are reassigned; running-stat buffers are filled in place
        entry = registry.by_name.get(name)
        if entry is not None:
            entry.tensor.data = values.copy()
        else:
            arr[...] = values
    line, pos = _read_line(buf, pos)
    if line == b"nomask":
        if pos != len(buf):
            raise CheckpointError(f"trailing bytes after nomask at offset {pos}")
        return None
    fields = line.split()
    if len(fields) != 3 or fields[0] != b"mask":
        raise CheckpointError(f"bad mask header {line!r}")
    sparsity = float(fields[1])
    seed = int(fields[2])
    maskable_entries = registry.maskable()
    total = sum(e.tensor.size for e in maskable_entries)
    nbytes = math.ceil(total / 8)
    if pos + nbytes != len(buf):
        raise CheckpointError(
            f"mask section is {len(buf) - pos} bytes, expected {nbytes}"
        )
    bits = np.unpackbits(
        np.frombuffer(buf[pos:], dtype=np.uint8), count=total
    ).astype(bool)
    entries = []
    at = 0
    for e in maskable_entries:
        keep = bits[at : at + e.tensor.size].reshape(e.tensor.shape)
        entries.append((e.name, keep))
        at += e.tensor.size
    return MaskSet.from_entries(entries, sparsity, None if seed < 0 else seed)
