"""Checkpoint container and its binary file format.

Layout: magic "RQCK", version u16, then repeated tensor records
{name_len u16, name utf-8, dtype u8 (0 = float32), rank u8, dims u32 x rank,
payload little-endian float32}, a zero name_len terminator record, then a
metadata block of UTF-8 key=value lines.  All integers little-endian.
Training keeps float64 tensors in memory; only the file is 32-bit.

Loading then saving reproduces the file byte for byte: tensor records and
metadata lines are written in sorted order.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .models import ModelSpec
from .regularizers import SatNLConfig

MAGIC = b"RQCK"
VERSION = 1
_QUANT_PREFIX = "quant/"


@dataclass
class Checkpoint:
    params: dict                      # name -> float64 latent tensor
    spec: ModelSpec
    meta: dict = field(default_factory=dict)   # str -> str
    quant: dict | None = None         # {"weights": {layer: {"bits", "step"}},
                                      #  "acts": {layer: {"bits", "step"}}}

    def copy(self) -> "Checkpoint":
        return Checkpoint({k: v.copy() for k, v in self.params.items()},
                          self.spec, dict(self.meta),
                          None if self.quant is None else
                          {kind: {l: {"bits": s["bits"], "step": np.array(s["step"])}
                                  for l, s in group.items()}
                           for kind, group in self.quant.items()})


def _spec_meta(spec: ModelSpec) -> dict:
    meta = {
        "spec.architecture": spec.architecture,
        "spec.in_dim": str(spec.in_dim),
        "spec.hidden": ",".join(str(h) for h in spec.hidden),
        "spec.in_shape": ",".join(str(s) for s in spec.in_shape),
        "spec.channels": ",".join(str(c) for c in spec.channels),
        "spec.fc_width": str(spec.fc_width),
        "spec.classes": str(spec.classes),
    }
    if spec.satnl is None:
        meta["satnl.kind"] = "none"
    else:
        meta["satnl.kind"] = spec.satnl.kind
        if spec.satnl.enabled is None:
            meta["satnl.layers"] = "all"
        else:
            meta["satnl.layers"] = ",".join(sorted(k for k, v in spec.satnl.enabled.items() if v))
    return meta


def _spec_from_meta(meta: dict) -> ModelSpec:
    def ints(key):
        raw = meta.get(key, "")
        return tuple(int(v) for v in raw.split(",") if v != "")

    satnl = None
    if meta.get("satnl.kind", "none") != "none":
        layers = meta.get("satnl.layers", "all")
        enabled = None if layers == "all" else {name: True for name in layers.split(",") if name}
        satnl = SatNLConfig(kind=meta["satnl.kind"], enabled=enabled)
    return ModelSpec(
        architecture=meta["spec.architecture"],
        in_dim=int(meta["spec.in_dim"]),
        hidden=ints("spec.hidden"),
        in_shape=ints("spec.in_shape"),
        channels=ints("spec.channels"),
        fc_width=int(meta["spec.fc_width"]),
        classes=int(meta["spec.classes"]),
        satnl=satnl,
    )


def _write_record(buf, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    arr32 = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<BB", 0, arr32.ndim))
    for dim in arr32.shape:
        buf.write(struct.pack("<I", dim))
    buf.write(arr32.tobytes())


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    tensors = dict(ckpt.params)
    meta = dict(ckpt.meta)
    meta.update(_spec_meta(ckpt.spec))
    if ckpt.quant is not None:
        for kind, group in ckpt.quant.items():
            for layer, state in group.items():
                tensors[f"{_QUANT_PREFIX}{kind}/{layer}/step"] = np.atleast_1d(state["step"])
                meta[f"quant.{kind}.{layer}.bits"] = str(int(state["bits"]))
    for name in sorted(tensors):
        _write_record(buf, name, tensors[name])
    buf.write(struct.pack("<H", 0))
    for key in sorted(meta):
        value = str(meta[key])
        if "\n" in key or "\n" in value or "=" in key:
            raise ValueError(f"metadata key/value not encodable: {key!r}")
        buf.write(f"{key}={value}\n".encode("utf-8"))
    return buf.getvalue()


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version = struct.unpack_from("<H", raw, 4)[0]
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 6
    tensors = {}
    while True:
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        if name_len == 0:
            break
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        dtype, rank = struct.unpack_from("<BB", raw, off)
        off += 2
        if dtype != 0:
            raise ValueError(f"unknown dtype tag {dtype} for tensor {name!r}")
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        tensors[name] = arr.astype(np.float64)
    meta = {}
    for line in raw[off:].decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        meta[key] = value

    params, quant = {}, {}
    for name, arr in tensors.items():
        if name.startswith(_QUANT_PREFIX):
            kind, layer, _ = name[len(_QUANT_PREFIX):].split("/")
            bits = int(meta.pop(f"quant.{kind}.{layer}.bits"))
            quant.setdefault(kind, {})[layer] = {"bits": bits, "step": arr}
        else:
            params[name] = arr
    spec = _spec_from_meta(meta)
    for key in list(meta):
        if key.startswith("spec.") or key.startswith("satnl."):
            del meta[key]
    return Checkpoint(params, spec, meta, quant or None)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
