"""Raw float32 array files with JSON sidecar headers, plus 8-bit image export.

Every array artifact in this package (patterns, captures, scene maps,
reconstruction maps) is stored as little-endian float32, row-major, next to a
JSON sidecar describing at least its shape. The format is deliberately
trivial to parse from any language.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ParseError

__all__ = ["save_raw", "load_raw", "save_png", "tonemap_png"]


def save_raw(path, array: np.ndarray, **header) -> None:
    """Write ``array`` as little-endian float32 + ``<path>.json`` sidecar."""
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f4")
    path.write_bytes(arr.tobytes())
    meta = {"shape": list(arr.shape), "dtype": "<f4", **header}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1))


def load_raw(path) -> tuple[np.ndarray, dict]:
    """Read a raw float32 file and its sidecar; verifies the byte count."""
    path = Path(path)
    side = Path(str(path) + ".json")
    if not side.exists():
        raise ParseError(f"missing sidecar {side}")
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"bad sidecar {side}: {e}") from e
    shape = tuple(meta.get("shape", ()))
    data = path.read_bytes()
    expected = int(np.prod(shape)) * 4 if shape else 0
    if len(data) != expected:
        raise ParseError(
            f"{path}: payload is {len(data)} bytes, sidecar shape {shape} "
            f"needs {expected} (mismatch at byte offset {min(len(data), expected)})"
        )
    arr = np.frombuffer(data, dtype="<f4").reshape(shape)
    return arr.astype(np.float64), meta


def save_png(path, array: np.ndarray) -> None:
    """Export values already in [0, 1] as an 8-bit grayscale or RGB PNG."""
    a = np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim == 3 and a.shape[2] == 2:
        a = np.concatenate([a, np.zeros_like(a[..., :1])], axis=2)
    img = (a * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(img).save(Path(path))


def tonemap_png(path, array: np.ndarray, gamma: float = 2.2) -> None:
    """Export an HDR-ish image for inspection: normalize by its max, gamma."""
    a = np.asarray(array, dtype=np.float64)
    peak = a.max()
    if peak > 0:
        a = a / peak
    save_png(path, np.clip(a, 0.0, 1.0) ** (1.0 / gamma))
