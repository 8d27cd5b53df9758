"""Named-tensor file format.

Header: one line per tensor, ``name dim0 dim1 ...``, terminated by a
single blank line. Payload: raw little-endian float32 values, tensors in
header order, row-major.
"""

from __future__ import annotations

import numpy as np


class FormatError(ValueError):
    pass


def write_tensors(fh, tensors):
    """Write an ordered mapping of name -> ndarray to a binary stream."""
    lines = []
    for name, arr in tensors.items():
        if " " in name or "\n" in name:
            raise FormatError(f"tensor name {name!r} contains whitespace")
        dims = " ".join(str(d) for d in np.asarray(arr).shape)
        lines.append(f"{name} {dims}".rstrip())
    header = "\n".join(lines) + "\n\n"
    fh.write(header.encode("ascii"))
    for arr in tensors.values():
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensors(fh):
    """Read the format written by :func:`write_tensors`; returns dict."""
    entries = []
    while True:
        line = _read_line(fh)
        if line == "":
            break
        parts = line.split()
        name, dims = parts[0], tuple(int(d) for d in parts[1:])
        entries.append((name, dims))
    out = {}
    for name, dims in entries:
        count = int(np.prod(dims)) if dims else 1
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise FormatError(f"truncated payload for tensor {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
    return out


def _read_line(fh):
    buf = bytearray()
    while True:
        ch = fh.read(1)
        if ch == b"" or ch == b"\n":
            return buf.decode("ascii")
        buf.extend(ch)
