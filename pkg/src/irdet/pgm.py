"""8-bit binary PGM (P5) reading and writing.

Layout: ``P5\\n<w> <h>\\n255\\n`` followed by w*h raw bytes, row-major.
Masks use 0 = background, 255 = target.
"""

from __future__ import annotations

import numpy as np


class PgmError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def write_pgm(path, values):
    """Write a (h, w) uint8-compatible array."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {arr.shape}")
    arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise PgmError("bad magic number, expected P5", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tok = data[start:pos]
        if not tok.isdigit():
            raise PgmError(f"expected integer header field, got {tok!r}", start)
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise PgmError(f"unsupported maxval {maxval}", pos)
    pos += 1  # single whitespace after maxval
    if len(data) - pos < w * h:
        raise PgmError(f"payload short: need {w * h} bytes", pos)
    return np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def write_mask(path, mask):
    write_pgm(path, np.asarray(mask, dtype=bool).astype(np.uint8) * 255)


def read_mask(path):
    return (read_pgm(path) >= 128).astype(np.uint8)


def write_gray(path, image):
    """Quantize a [0, 1] float image to 8 bits."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    write_pgm(path, np.round(arr * 255.0).astype(np.uint8))


def read_gray(path):
    return read_pgm(path).astype(np.float64) / 255.0
