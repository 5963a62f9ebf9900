"""PAMG model checkpoints.

Layout (little-endian)::

    b"PAMG" | u32 version | u16 label_len | label | u32 layer_count
    per layer: u32 kind_tag | u16 name_len | name | u32 n_inputs | u32[n_inputs]
               | u32 n_hyper | f64[n_hyper]
    u32 n_params  | per tensor: u32 ndim | u32[ndim] | f32 data
    u32 n_buffers | per buffer: u32 ndim | u32[ndim] | f32 data

Parameters appear in ``ModelGraph.named_parameters`` order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .graph import HYPERPARAMS, LAYER_KINDS, LayerSpec, ModelGraph, Node

MAGIC = b"PAMG"
VERSION = 1


def _write_array(buf: io.BytesIO, a: np.ndarray) -> None:
    buf.write(struct.pack("<I", a.ndim))
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_array(view: memoryview, pos: int) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<I", view, pos)
    pos += 4
    shape = struct.unpack_from(f"<{ndim}I", view, pos)
    pos += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(view, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
    return arr, pos + 4 * count


def dumps(model: ModelGraph) -> bytes:
    buf = io.BytesIO()
    label = model.label.encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<IH", VERSION, len(label)))
    buf.write(label)
    buf.write(struct.pack("<I", len(model.nodes)))
    for node in model.nodes:
        name = node.name.encode("utf-8")
        values = node.spec.values()
        buf.write(struct.pack("<IH", LAYER_KINDS.index(node.spec.kind), len(name)))
        buf.write(name)
        buf.write(struct.pack(f"<I{len(node.inputs)}I", len(node.inputs), *node.inputs))
        buf.write(struct.pack(f"<I{len(values)}d", len(values), *values))
    params = model.parameters()
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        _write_array(buf, p.data)
    buffers = model.named_buffers()
    buf.write(struct.pack("<I", len(buffers)))
    for _, b in buffers:
        _write_array(buf, b)
    return buf.getvalue()


def loads(raw: bytes) -> ModelGraph:
    view = memoryview(raw)
    if bytes(view[:4]) != MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(view[:4])!r}")
    try:
        version, label_len = struct.unpack_from("<IH", view, 4)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos = 10
        label = bytes(view[pos : pos + label_len]).decode("utf-8")
        pos += label_len
        (n_layers,) = struct.unpack_from("<I", view, pos)
        pos += 4
        nodes = []
        for _ in range(n_layers):
            tag, name_len = struct.unpack_from("<IH", view, pos)
            pos += 6
            name = bytes(view[pos : pos + name_len]).decode("utf-8")
            pos += name_len
            (n_in,) = struct.unpack_from("<I", view, pos)
            inputs = struct.unpack_from(f"<{n_in}I", view, pos + 4)
            pos += 4 + 4 * n_in
            (n_h,) = struct.unpack_from("<I", view, pos)
            values = struct.unpack_from(f"<{n_h}d", view, pos + 4)
            pos += 4 + 8 * n_h
            kind = LAYER_KINDS[tag]
            nodes.append(Node(name, LayerSpec(kind, dict(zip(HYPERPARAMS[kind], values))), tuple(inputs)))
        model = ModelGraph(nodes, label=label, dtype=np.float32)
        (n_params,) = struct.unpack_from("<I", view, pos)
        pos += 4
        params = model.parameters()
        if n_params != len(params):
            raise FormatError(f"checkpoint has {n_params} parameter tensors, graph needs {len(params)}")
        for p in params:
            arr, pos = _read_array(view, pos)
            if arr.shape != p.shape:
                raise FormatError(f"parameter {p.name}: stored shape {arr.shape}, expected {p.shape}")
            p.data = arr
        (n_buf,) = struct.unpack_from("<I", view, pos)
        pos += 4
        buffers = model.named_buffers()
        if n_buf != len(buffers):
            raise FormatError("buffer count mismatch")
        for _, b in buffers:
            arr, pos = _read_array(view, pos)
            b[...] = arr
    except (struct.error, IndexError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(raw):
        raise FormatError("trailing bytes after checkpoint")
    return model


def save(path, model: ModelGraph) -> None:
    Path(path).write_bytes(dumps(model))


def load(path) -> ModelGraph:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"model checkpoint not found: {p}")
    return loads(p.read_bytes())
