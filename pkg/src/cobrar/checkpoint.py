"""Checkpoint files.

A checkpoint is an uncompressed zip (readable by ``numpy.load``) holding a
``meta.json`` header and one ``.npy`` member per parameter tensor, stored
little-endian in row-major order. Zip timestamps are fixed so identical
models give byte-identical files.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from cobrar.evaluation import ScoreMatrix
from cobrar.models import ProfileModel, build_model

FORMAT = "cobrar-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class FingerprintMismatch(ValueError):
    def __init__(self, expected: dict, found: dict):
        super().__init__(f"checkpoint was trained on dataset {found}, but the prepared dataset is {expected}")
        self.expected = expected
        self.found = found


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    little = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
    np.lib.format.write_array(buf, little, allow_pickle=False)
    return buf.getvalue()


def save(path, model, fingerprint: dict, train_config: dict | None = None, extra: dict | None = None) -> None:
    """Write ``model`` (a ProfileModel or ScoreMatrix) with its dataset fingerprint."""
    if isinstance(model, ScoreMatrix):
        tensors = {"scores": model.scores}
        meta = {"kind": "scores"}
    else:
        tensors = model.parameters()
        meta = {
            "kind": model.kind,
            "layer_sizes": model.layer_sizes,
            "dropout_rate": model.dropout_rate,
            "mu": model.mu,
            "dtype": str(model.dtype),
            "n_users": model.n_users,
            "n_items": model.n_items,
        }
    meta.update({
        "format": FORMAT,
        "version": VERSION,
        "byteorder": "little",
        "layout": "row-major",
        "tensors": {k: list(v.shape) for k, v in tensors.items()},
        "fingerprint": fingerprint,
        "train_config": train_config,
    })
    if extra:
        meta.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        _write_member(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True).encode())
        for name, arr in tensors.items():
            _write_member(zf, f"{name}.npy", _npy_bytes(arr))


def read_meta(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    if meta.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return meta


def load(path, expected_fingerprint: dict | None = None) -> tuple[ProfileModel | ScoreMatrix, dict]:
    """Rebuild the model; refuse if its fingerprint differs from ``expected_fingerprint``."""
    meta = read_meta(path)
    if expected_fingerprint is not None and meta["fingerprint"] != expected_fingerprint:
        raise FingerprintMismatch(expected_fingerprint, meta["fingerprint"])
    with zipfile.ZipFile(path) as zf:
        tensors = {}
        for name in meta["tensors"]:
            with zf.open(f"{name}.npy") as fh:
                tensors[name] = np.lib.format.read_array(fh, allow_pickle=False)
    if meta["kind"] == "scores":
        return ScoreMatrix(tensors["scores"]), meta
    model = build_model(meta["kind"], meta["n_users"], meta["n_items"], meta["layer_sizes"],
                        meta["dropout_rate"], meta["mu"], rng=0, dtype=np.dtype(meta["dtype"]))
    model.load_parameters(tensors)
    return model, meta
