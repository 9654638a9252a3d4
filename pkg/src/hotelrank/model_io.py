"""Versioned binary envelope for fitted models and pipelines.

Layout (documented contract, see README):
  line 1: ``HOTELRANK_MODEL 1\n``
  line 2: canonical JSON header ``{"kind", "meta", "arrays": [...]}\n``
          (sorted keys, no whitespace)
  then:   for each entry of header["arrays"], in order, the raw C-order
          little-endian bytes of that array.

Array entries are sorted by name so identical states serialize to identical
bytes. Loading dispatches on "kind" through the model registry.
"""

from __future__ import annotations

import json

import numpy as np

from .base import MODEL_REGISTRY

MAGIC = b"HOTELRANK_MODEL 1\n"


def _json_default(obj):
    if isinstance(obj, (np.integer, np.floating, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def _canonical_json(data) -> bytes:
    return json.dumps(
        data, sort_keys=True, separators=(",", ":"), default=_json_default
    ).encode("utf-8")


def save_envelope(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]):
    entries = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {"kind": kind, "meta": meta, "arrays": entries}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_canonical_json(header))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_envelope(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != MAGIC:
            raise ValueError(f"{path}: not a hotelrank model file")
        header = json.loads(fh.readline().decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise ValueError(f"{path}: truncated array {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return header["kind"], header["meta"], arrays


def model_state(model) -> tuple[dict, dict[str, np.ndarray]]:
    meta, arrays = model.state()
    if "kind" not in meta:
        meta["kind"] = model.kind
    return meta, arrays


def model_from_state(meta: dict, arrays: dict[str, np.ndarray]):
    kind = meta["kind"]
    cls = MODEL_REGISTRY.get(kind)
    if cls is None:
        raise ValueError(f"unknown model kind: {kind}")
    return cls.from_state(meta, arrays)


def save_model(path, model):
    meta, arrays = model_state(model)
    save_envelope(path, meta["kind"], meta, arrays)


def load_model(path):
    kind, meta, arrays = load_envelope(path)
    return model_from_state(meta, arrays)


def _merge_prefixed(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {
        name[len(prefix):]: arr for name, arr in arrays.items() if name.startswith(prefix)
    }


def save_bundle(path, pipeline, model):
    """A trained artifact: fitted feature pipeline plus the model on top."""
    from .base import columns_hash

    pipe_meta, pipe_arrays = pipeline.state()
    model_meta, model_arrays = model_state(model)
    meta = {
        "kind": "bundle",
        "pipeline": pipe_meta,
        "model": model_meta,
        "schema_hash": columns_hash(model.feature_columns),
    }
    arrays = {}
    for name, arr in pipe_arrays.items():
        arrays[f"pipeline/{name}"] = arr
    for name, arr in model_arrays.items():
        arrays[f"model/{name}"] = arr
    save_envelope(path, "bundle", meta, arrays)


def load_bundle(path):
    from .features import FittedPipeline

    kind, meta, arrays = load_envelope(path)
    if kind != "bundle":
        raise ValueError(f"{path}: expected a trained bundle, found kind={kind}")
    pipeline = FittedPipeline.from_state(
        meta["pipeline"], _merge_prefixed(arrays, "pipeline/")
    )
    model = model_from_state(meta["model"], _merge_prefixed(arrays, "model/"))
    return pipeline, model
