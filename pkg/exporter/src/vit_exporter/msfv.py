"""Writer for the packed feature-file format the training engine consumes.

Layout (little-endian): 4-byte magic "MSFV", u8 version, u32 vector
dimension, u64 record count, u32 label cardinality, then one record per
example: u32 label followed by the vector as 32-bit floats.  The writer
is intentionally independent of the reader in the msdem package; the
test suite checks the two agree byte for byte.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ExportError

MAGIC = b"MSFV"
VERSION = 1
_HEADER = struct.Struct("<4sBIQI")


def write_feature_file(path, labels: np.ndarray, vectors: np.ndarray, label_cardinality: int) -> Path:
    """Atomically write labels [n] and vectors [n, d] to `path`.

    The file appears only once fully written: the payload goes to a
    temporary file in the same directory which is then renamed over the
    destination, so a crash mid-export never leaves a partial file.
    """
    path = Path(path)
    labels = np.asarray(labels)
    vectors = np.ascontiguousarray(np.asarray(vectors, dtype="<f4"))
    if vectors.ndim != 2:
        raise ExportError(f"vectors must be 2-d, got shape {vectors.shape}")
    n, dim = vectors.shape
    if labels.shape != (n,):
        raise ExportError(f"{n} vectors but label shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= label_cardinality):
        raise ExportError(
            f"labels out of range: [{labels.min()}, {labels.max()}] with cardinality {label_cardinality}"
        )
    if not np.all(np.isfinite(vectors)):
        raise ExportError("feature vectors contain non-finite values")

    body = np.empty((n, 4 + 4 * dim), dtype=np.uint8)
    body[:, :4] = labels.astype("<u4").view(np.uint8).reshape(n, 4)
    body[:, 4:] = vectors.view(np.uint8).reshape(n, 4 * dim)

    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_HEADER.pack(MAGIC, VERSION, dim, n, label_cardinality))
            f.write(body.tobytes())
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise
    return path
