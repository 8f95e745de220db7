"""Versioned binary checkpoints for multi-path models and their ensembles.

Layout::

    b"MPCK" | u32 version | u32 header_bytes | header (UTF-8 JSON) | payload

The JSON header describes every network layer by layer and lists each
parameter array's shape and dtype; the payload is those arrays back to
back, little-endian, in the order listed.  Loading restores values bit for
bit.
"""

import json
import struct

import numpy as np

from .ensembles import WeightedEnsemble
from .errors import BadMagicError, FormatError, TruncatedError, VersionMismatchError
from .multipath import MultiPathModel, PathSpec
from .tensor import Activation, Conv3D, Dense, Flatten, LayerParams, MaxPool3D, Network

MAGIC = b"MPCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def describe_network(net):
    out = []
    for layer in net.layers:
        if isinstance(layer, Conv3D):
            w = layer.params.weights
            out.append(["conv", w.shape[2], w.shape[0], w.shape[1], layer.stride])
        elif isinstance(layer, MaxPool3D):
            out.append(["pool", layer.window])
        elif isinstance(layer, Activation):
            out.append([layer.kind])
        elif isinstance(layer, Flatten):
            out.append(["flatten"])
        elif isinstance(layer, Dense):
            out.append(["dense", *layer.params.weights.shape])
        else:
            raise TypeError(f"cannot serialise layer {type(layer).__name__}")
    return out


def network_from_description(desc, dtype):
    layers = []
    for d in desc:
        kind = d[0]
        if kind == "conv":
            k, out_c, in_c, stride = d[1:]
            w = np.zeros((out_c, in_c, k, k, k), dtype=dtype)
            layers.append(Conv3D(LayerParams(w, np.zeros(out_c, dtype=dtype), "conv3d"), stride))
        elif kind == "pool":
            layers.append(MaxPool3D(d[1]))
        elif kind in ("relu", "sigmoid"):
            layers.append(Activation(kind))
        elif kind == "flatten":
            layers.append(Flatten())
        elif kind == "dense":
            out_f, in_f = d[1:]
            w = np.zeros((out_f, in_f), dtype=dtype)
            layers.append(Dense(LayerParams(w, np.zeros(out_f, dtype=dtype), "dense")))
        else:
            raise FormatError(f"unknown layer kind {kind!r} in checkpoint")
    return Network(layers)


def _model_header(model):
    params = model.all_parameters()
    return {
        "n_classes": model.n_classes,
        "dim": model.dim,
        "frozen_paths": model.frozen_paths,
        "specs": [s.to_dict() for s in model.specs],
        "paths": [describe_network(p) for p in model.paths],
        "head": describe_network(model.head),
        "dtype": np.dtype(params[0].dtype).str if params else "<f4",
        "params": [{"shape": list(p.shape), "dtype": np.dtype(p.dtype).newbyteorder("<").str}
                   for p in params],
    }


def save_checkpoint(obj, path):
    """Write a :class:`MultiPathModel` or a :class:`WeightedEnsemble` of them."""
    if isinstance(obj, MultiPathModel):
        models, header = [obj], {"kind": "multipath"}
    elif isinstance(obj, WeightedEnsemble):
        models = obj.members
        header = {"kind": "ensemble", "ensemble_kind": obj.kind,
                  "weights": [float(w) for w in obj.weights], "n_classes": obj.n_classes}
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")
    header["models"] = [_model_header(m) for m in models]
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for m in models:
            for p in m.all_parameters():
                fh.write(np.ascontiguousarray(p, dtype=np.dtype(p.dtype).newbyteorder("<")).tobytes())


def _read_model(h, raw, offset):
    dtype = np.dtype(h["dtype"])
    paths = [network_from_description(d, dtype) for d in h["paths"]]
    head = network_from_description(h["head"], dtype)
    specs = [PathSpec.from_dict(s) for s in h["specs"]]
    model = MultiPathModel(paths, head, h["n_classes"], specs, h["dim"], h["frozen_paths"])
    targets = model.all_parameters()
    if len(targets) != len(h["params"]):
        raise FormatError("parameter list does not match the described layers")
    for dst, meta in zip(targets, h["params"]):
        dt = np.dtype(meta["dtype"])
        n = int(np.prod(meta["shape"])) * dt.itemsize
        if offset + n > len(raw):
            raise TruncatedError("checkpoint payload cut short")
        if list(dst.shape) != meta["shape"]:
            raise FormatError(f"parameter shape {meta['shape']} does not fit layer {dst.shape}")
        dst[...] = np.frombuffer(raw, dtype=dt, count=int(np.prod(meta["shape"])),
                                 offset=offset).reshape(dst.shape)
        offset += n
    return model, offset


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a multipath checkpoint")
    if len(raw) < _PREFIX.size:
        raise TruncatedError(f"{path}: header cut short")
    _, version, n_header = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    start = _PREFIX.size
    if start + n_header > len(raw):
        raise TruncatedError(f"{path}: header cut short")
    try:
        header = json.loads(raw[start:start + n_header].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    offset = start + n_header
    models = []
    for h in header["models"]:
        model, offset = _read_model(h, raw, offset)
        models.append(model)
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    if header["kind"] == "multipath":
        return models[0]
    return WeightedEnsemble(models, header["weights"], header["n_classes"], header["ensemble_kind"])
