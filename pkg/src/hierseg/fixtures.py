"""Array fixture files for dumping and replaying model outputs.

A fixture is a ``.npz`` container of named float32 little-endian arrays in
row-major layout, accompanied by a ``<stem>.meta.json`` sidecar that records
array shapes, head order, and the configuration that produced the arrays.
Fixtures are the substitution point that lets evaluation and tests run the
full pipeline without any pretrained model.

Well-known array names: ``maps`` (attention stacks), ``Q``/``K``/``V``
(projection matrices), ``scores`` (per-location category scores).
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import DataError, ValidationError

META_SUFFIX = ".meta.json"
FIXTURE_DTYPE = np.dtype("<f4")


def meta_path(fixture_path: str | os.PathLike) -> Path:
    p = Path(fixture_path)
    return p.with_name(p.stem + META_SUFFIX)


def save_fixture(path: str | os.PathLike, arrays: dict[str, np.ndarray],
                 meta: dict | None = None) -> Path:
    """Write named arrays as float32-LE ``.npz`` plus a JSON sidecar.

    Returns the path of the ``.npz`` file actually written (the ``.npz``
    suffix is appended if missing).
    """
    if not arrays:
        raise ValidationError("fixture must contain at least one array")
    p = Path(path)
    if p.suffix != ".npz":
        p = p.with_suffix(".npz")
    p.parent.mkdir(parents=True, exist_ok=True)

    converted = {}
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr), dtype=FIXTURE_DTYPE)
        if not np.all(np.isfinite(a)):
            raise ValidationError(f"fixture array {name!r} contains non-finite values")
        converted[name] = a
    np.savez(p, **converted)

    sidecar = {
        "format": "hierseg-fixture-v1",
        "dtype": "float32-le",
        "layout": "row-major",
        "arrays": {name: list(a.shape) for name, a in converted.items()},
    }
    if meta:
        sidecar.update(meta)
    meta_path(p).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return p


def load_fixture(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Load a fixture, returning (arrays, sidecar metadata).

    The sidecar is optional on read; a missing file yields empty metadata.
    """
    p = Path(path)
    if p.suffix != ".npz":
        p = p.with_suffix(".npz")
    if not p.exists():
        raise DataError(f"fixture not found: {p}")
    try:
        with np.load(p) as z:
            arrays = {name: z[name] for name in z.files}
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read fixture {p}: {e}") from e
    mp = meta_path(p)
    meta = json.loads(mp.read_text()) if mp.exists() else {}
    return arrays, meta
