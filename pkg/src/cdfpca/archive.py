"""Deterministic zip archives of JSON metadata plus flat binary arrays.

Arrays are stored as one ``.npy`` entry each (row-major, dimensions in the
npy header), metadata as a single ``meta.json``. Entry timestamps are fixed
and entries are written in sorted order, so identical content produces
byte-identical archives.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_archive(path, meta: dict, arrays: dict) -> None:
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(meta, indent=2, sort_keys=True))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_EPOCH)
            zf.writestr(info, buf.getvalue())


def read_archive(path):
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json").decode("utf-8"))
        arrays = {}
        for entry in zf.namelist():
            if entry.startswith("arrays/") and entry.endswith(".npy"):
                name = entry[len("arrays/") : -len(".npy")]
                arrays[name] = np.load(io.BytesIO(zf.read(entry)), allow_pickle=False)
    return meta, arrays
