"""Versioned binary checkpoints.

Layout::

    b"LIDCKPT1"      8 bytes
    version          u32 little-endian (= 1)
    header length    u64 little-endian
    header           UTF-8 JSON: config echo, class count, label names,
                     epsilon, step counter, Adam hyper-parameters and the
                     tensor table [{name, shape, offset}] (offsets in floats)
    payload          float64 little-endian tensors, row-major, concatenated

Tensor names: the trainable parameters under their registry names, the
frozen projection as ``omega``, and Adam moments as ``adam.m.<name>`` /
``adam.v.<name>``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .attention import AttentionConfig, FeatureMap, ProjectionWeights
from .head import ClassifierWeights
from .training import AdamState, LidModel

MAGIC = b"LIDCKPT1"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, adam=None, label_names=None, extra=None):
    tensors = dict(model.parameters())
    if model.feature_map is not None:
        tensors["omega"] = model.feature_map.omega
    adam = adam or AdamState()
    for name, m in adam.m.items():
        tensors[f"adam.m.{name}"] = m
    for name, v in adam.v.items():
        tensors[f"adam.v.{name}"] = v
    table, offset = [], 0
    for name, a in tensors.items():
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
    header = {
        "config": model.config.to_dict(),
        "n_classes": model.n_classes,
        "label_names": list(label_names) if label_names is not None else None,
        "epsilon": model.epsilon,
        "step": adam.step,
        "adam": {"beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "registry": [name for name, _ in model.registry()],
        "tensors": table,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in tensors.values())
    Path(path).write_bytes(_PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + payload)


def read_header(buf):
    if len(buf) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(buf) < _PREFIX.size + hlen:
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(buf[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    return header, _PREFIX.size + hlen


def load_checkpoint(path):
    """Returns ``(model, adam_state, header)``."""
    buf = Path(path).read_bytes()
    header, start = read_header(buf)
    total = sum(int(np.prod(t["shape"], dtype=np.int64)) for t in header["tensors"])
    if len(buf) != start + 8 * total:
        raise CheckpointError(f"payload has {len(buf) - start} bytes, expected {8 * total}")
    flat = np.frombuffer(buf, dtype="<f8", offset=start).astype(np.float64)
    tensors = {}
    for t in header["tensors"]:
        size = int(np.prod(t["shape"], dtype=np.int64))
        tensors[t["name"]] = flat[t["offset"]:t["offset"] + size].reshape(t["shape"]).copy()

    config = AttentionConfig.from_dict(header["config"])
    try:
        projections = ProjectionWeights(**{k: tensors[k] for k in ("Wq", "Wk", "Wv", "bq", "bk", "bv")})
        classifier = ClassifierWeights(tensors["W_out"], tensors["b_out"])
    except KeyError as exc:
        raise CheckpointError(f"missing tensor {exc}") from exc
    fm = FeatureMap(tensors["omega"]) if "omega" in tensors else None
    model = LidModel(config, header["n_classes"], projections, classifier,
                     tensors.get("dwc_kernel"), fm, header["epsilon"])
    adam = AdamState(step=header["step"], **header["adam"])
    for name, a in tensors.items():
        if name.startswith("adam.m."):
            adam.m[name[len("adam.m."):]] = a
        elif name.startswith("adam.v."):
            adam.v[name[len("adam.v."):]] = a
    return model, adam, header
