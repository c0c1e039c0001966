"""Named-tensor container: text manifest + raw little-endian float32 payload.

Layout:
    line 0:            ``tensors <count>``
    next <count> lines: ``<name> <rank> <extent0> <extent1> ...``
    then:              the tensors' float32 values, little-endian, row-major,
                       in manifest order.

Round-trips are bit-exact.
"""

from __future__ import annotations

import numpy as np


class CheckpointError(RuntimeError):
    pass


def save(path, tensors: dict[str, np.ndarray]) -> None:
    names = list(tensors)
    lines = [f"tensors {len(names)}"]
    for name in names:
        arr = np.asarray(tensors[name])
        lines.append(f"{name} {arr.ndim} " + " ".join(str(e) for e in arr.shape))
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for name in names:
            f.write(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    try:
        head, _, rest = blob.partition(b"\n")
        kind, count_s = head.decode("ascii").split()
        if kind != "tensors":
            raise ValueError(head)
        count = int(count_s)
    except ValueError as e:
        raise CheckpointError(f"bad container header in {path}") from e
    entries = []
    for _ in range(count):
        line, _, rest = rest.partition(b"\n")
        fields = line.decode("ascii").split()
        name, rank = fields[0], int(fields[1])
        shape = tuple(int(x) for x in fields[2:])
        if len(shape) != rank:
            raise CheckpointError(f"manifest rank mismatch for tensor {name!r}")
        entries.append((name, shape))
    out = {}
    offset = 0
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        chunk = rest[offset:offset + 4 * n]
        if len(chunk) != 4 * n:
            raise CheckpointError(f"truncated payload at tensor {name!r}")
        out[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        offset += 4 * n
    if offset != len(rest):
        raise CheckpointError(f"trailing bytes after last tensor in {path}")
    return out
