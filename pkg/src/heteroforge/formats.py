"""On-disk formats: graph dataset directories, feature files, array containers.

Dataset directory::

    schema.json            vertex types + counts, edge types, feature dims, mask/label files
    edges_<relation>.bin   little-endian u64 pairs (src typed ID, dst typed ID)
    feat_<type>.bin        16-byte header (b"HFG1", u32 rows, u32 cols, u32 reserved) + f32 rows
    efeat_<relation>.bin   same layout, edge features (optional)
    mask_<type>.bin        u8 per vertex (0 none, 1 train, 2 val, 3 test)
    labels_<type>.bin      little-endian i64 per vertex, -1 = unlabeled (optional)

All binary data is little-endian.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import GraphIOError, StructuralError
from .graph import FeatureMatrix, HeteroSchema, HomogenizedGraph, homogenize, typed_edge_lists

FEATURE_MAGIC = b"HFG1"
ARRAYS_MAGIC = b"HFA1"
SCHEMA_FORMAT = "heteroforge-graph/1"

_DTYPES = {0: "<i8", 1: "u1", 2: "<f4", 3: "<u8", 4: "<i4"}


def _read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise GraphIOError(f"cannot read {path}: {exc.strerror or exc}") from exc


def write_feature_file(path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values)
    if values.dtype != np.float32 or values.ndim != 2:
        raise StructuralError(f"{path}: features must be a 2-D float32 array")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC + struct.pack("<III", values.shape[0], values.shape[1], 0))
        f.write(values.astype("<f4", copy=False).tobytes())


def read_feature_file(path) -> np.ndarray:
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 16 or raw[:4] != FEATURE_MAGIC:
        raise GraphIOError(f"{path}: not a feature file (bad magic)")
    rows, cols, _ = struct.unpack_from("<III", raw, 4)
    if len(raw) != 16 + 4 * rows * cols:
        raise GraphIOError(f"{path}: header says {rows}x{cols} but file has {len(raw) - 16} payload bytes")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(rows, cols).astype(np.float32)


def write_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Named-array container: magic, u32 count, then per array
    (u16 name length, name, u8 dtype code, u8 ndim, u64 dims, raw data)."""
    with open(path, "wb") as f:
        f.write(ARRAYS_MAGIC + struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            code = next((c for c, dt in _DTYPES.items() if np.dtype(dt) == arr.dtype.newbyteorder("<")), None)
            if code is None:
                raise StructuralError(f"unsupported dtype {arr.dtype} for array {name!r}")
            key = name.encode()
            f.write(struct.pack("<H", len(key)) + key + struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype(_DTYPES[code], copy=False).tobytes())


def read_arrays(path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = _read_bytes(path)
    if raw[:4] != ARRAYS_MAGIC:
        raise GraphIOError(f"{path}: bad magic")
    out = {}
    try:
        (count,) = struct.unpack_from("<I", raw, 4)
        pos = 8
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + klen].decode()
            pos += klen
            code, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            dt = np.dtype(_DTYPES[code])
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(raw):
                raise GraphIOError(f"{path}: truncated array {name!r}")
            out[name] = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise GraphIOError(f"{path}: corrupt array container ({exc})") from exc
    return out


def _schema_dict(schema: HeteroSchema, feat_dims, efeat_dims, has_masks, has_labels) -> dict:
    vts = []
    for name, count in zip(schema.vertex_types, schema.num_vertices):
        vts.append(
            {
                "name": name,
                "count": count,
                "feat_dim": feat_dims.get(name),
                "mask": f"mask_{name}.bin" if has_masks else None,
                "labels": f"labels_{name}.bin" if has_labels else None,
            }
        )
    ets = [
        {"src": s, "relation": r, "dst": d, "feat_dim": efeat_dims.get(r)}
        for s, r, d in schema.edge_types
    ]
    return {"format": SCHEMA_FORMAT, "vertex_types": vts, "edge_types": ets}


def save_graph(directory, g: HomogenizedGraph, features: Mapping[str, FeatureMatrix] | None = None) -> None:
    """Write a dataset directory readable by :func:`load_graph`."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    features = dict(features or {})
    schema = g.schema
    for name, fm in features.items():
        write_feature_file(d / (f"feat_{name}.bin" if name in schema.vertex_types else f"efeat_{name}.bin"), fm.values)
    for (_, rel, _), pairs in zip(schema.edge_types, typed_edge_lists(g)):
        (d / f"edges_{rel}.bin").write_bytes(pairs.astype("<u8").tobytes())
    has_labels = g.labels is not None
    for t, name in enumerate(schema.vertex_types):
        lo, hi = g.vertex_type_offsets[t], g.vertex_type_offsets[t + 1]
        (d / f"mask_{name}.bin").write_bytes(g.masks[lo:hi].astype(np.uint8).tobytes())
        if has_labels:
            (d / f"labels_{name}.bin").write_bytes(g.labels[lo:hi].astype("<i8").tobytes())
    feat_dims = {k: v.row_width for k, v in features.items() if k in schema.vertex_types}
    efeat_dims = {k: v.row_width for k, v in features.items() if k in schema.relations}
    meta = _schema_dict(schema, feat_dims, efeat_dims, True, has_labels)
    (d / "schema.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def read_schema(directory) -> tuple[HeteroSchema, dict]:
    path = Path(directory) / "schema.json"
    try:
        meta = json.loads(_read_bytes(path).decode("utf-8"))
        vts = meta["vertex_types"]
        schema = HeteroSchema(
            tuple(v["name"] for v in vts),
            tuple(int(v["count"]) for v in vts),
            tuple((e["src"], e["relation"], e["dst"]) for e in meta.get("edge_types", [])),
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise GraphIOError(f"{path}: corrupt schema ({exc})") from exc
    return schema, meta


def load_graph(directory) -> tuple[HeteroSchema, HomogenizedGraph, dict[str, FeatureMatrix]]:
    d = Path(directory)
    if not d.is_dir():
        raise GraphIOError(f"{d}: dataset directory not found")
    schema, meta = read_schema(d)

    edge_lists = []
    for _, rel, _ in schema.edge_types:
        path = d / f"edges_{rel}.bin"
        raw = _read_bytes(path)
        if len(raw) % 16:
            raise GraphIOError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
        edge_lists.append(np.frombuffer(raw, dtype="<u8").reshape(-1, 2).astype(np.int64))

    masks, labels, any_labels = [], [], False
    for v in meta["vertex_types"]:
        count = int(v["count"])
        m = np.zeros(count, dtype=np.uint8)
        if v.get("mask"):
            path = d / v["mask"]
            m = np.frombuffer(_read_bytes(path), dtype=np.uint8).copy()
            if m.size != count:
                raise StructuralError(f"{path}: {m.size} mask entries for {count} vertices")
        masks.append(m)
        lab = np.full(count, -1, dtype=np.int64)
        if v.get("labels"):
            any_labels = True
            path = d / v["labels"]
            lab = np.frombuffer(_read_bytes(path), dtype="<i8").astype(np.int64)
            if lab.size != count:
                raise StructuralError(f"{path}: {lab.size} labels for {count} vertices")
        labels.append(lab)

    g = homogenize(
        schema,
        edge_lists,
        masks=np.concatenate(masks) if masks else None,
        labels=np.concatenate(labels) if any_labels else None,
    )

    features = {}
    for v in meta["vertex_types"]:
        if v.get("feat_dim") is None:
            continue
        path = d / f"feat_{v['name']}.bin"
        vals = read_feature_file(path)
        if vals.shape != (int(v["count"]), int(v["feat_dim"])):
            raise StructuralError(
                f"{path}: shape {vals.shape} does not match schema ({v['count']}, {v['feat_dim']})"
            )
        features[v["name"]] = FeatureMatrix(v["name"], vals)
    for e, et in enumerate(meta.get("edge_types", [])):
        if et.get("feat_dim") is None:
            continue
        path = d / f"efeat_{et['relation']}.bin"
        vals = read_feature_file(path)
        count = int(g.edge_type_offsets[e + 1] - g.edge_type_offsets[e])
        if vals.shape != (count, int(et["feat_dim"])):
            raise StructuralError(f"{path}: shape {vals.shape} does not match ({count}, {et['feat_dim']})")
        features[et["relation"]] = FeatureMatrix(et["relation"], vals)
    return schema, g, features
