"""Checkpoint container for heads and optimizer state.

Layout (little-endian):
  magic "APEC" | version u32 = 1 | meta_len u32 | meta (canonical JSON)
  | n_tensors u32 | tensors

Each tensor: name_len u32 | name utf-8 | ndim u32 | dims u32 * ndim | f32 data.
Head parameters come in declaration order, then optimizer moments. The meta
block carries the head structure, the temperature value, the step counter
and the semantic run config used for resume-compatibility checks. Canonical
JSON (sorted keys, fixed separators) plus raw f32 payloads make a
read -> write round trip byte-exact. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .heads import AlignmentHead, HeadConfig
from .optim import AdamW

MAGIC = b"APEC"
VERSION = 1


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def head_meta(config: HeadConfig) -> dict:
    return {
        "kind": config.kind,
        "d_tok": config.d_tok,
        "d_img": config.d_img,
        "d_out": config.d_out,
        "layers": config.layers,
        "hidden": config.hidden,
        "vocab_size": config.vocab_size,
        "image_layers": config.image_layers,
        "image_hidden": config.image_hidden,
        "temperature_init": config.temperature_init,
        "temperature_max": config.temperature_max,
    }


def save_checkpoint(
    path,
    head: AlignmentHead,
    optimizer: AdamW | None = None,
    step: int = 0,
    run_config: dict | None = None,
    run_state: dict | None = None,
) -> None:
    meta = {
        "head": head_meta(head.config),
        "log_scale": head.log_scale.data.item(),
        "step": int(step),
        "optimizer": None,
        "run": run_config,
        "run_state": run_state,
    }
    tensors: list[tuple[str, np.ndarray]] = [
        (p.name, p.data) for p in head.parameters() if p.name != "log_scale"
    ]
    if optimizer is not None:
        meta["optimizer"] = {
            "t": optimizer.t,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
        }
        tensors.extend(sorted(optimizer.state_tensors().items()))

    meta_blob = _canonical_json(meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray]

    @property
    def step(self) -> int:
        return int(self.meta["step"])

    def head_config(self) -> HeadConfig:
        return HeadConfig(**self.meta["head"])

    def build_head(self) -> AlignmentHead:
        head = AlignmentHead(self.head_config())
        for p in head.parameters():
            if p.name == "log_scale":
                continue
            if p.name not in self.tensors:
                raise DataError(f"checkpoint missing parameter tensor {p.name}")
            arr = self.tensors[p.name]
            if arr.shape != p.data.shape:
                raise DataError(
                    f"checkpoint tensor {p.name} shape {arr.shape} != expected {p.data.shape}"
                )
            p.data = arr.astype(p.data.dtype)
        head.log_scale.data = np.full_like(head.log_scale.data, self.meta["log_scale"])
        return head

    def build_optimizer(self, head: AlignmentHead) -> AdamW | None:
        if self.meta.get("optimizer") is None:
            return None
        o = self.meta["optimizer"]
        opt = AdamW(
            head.named_parameters(),
            weight_decay=o["weight_decay"],
            beta1=o["beta1"],
            beta2=o["beta2"],
            eps=o["eps"],
        )
        opt.load_state(o["t"], self.tensors)
        return opt


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise DataError(f"not a checkpoint file: {path}")
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    pos = 12
    if pos + meta_len > len(blob):
        raise DataError(f"truncated checkpoint meta block in {path}")
    meta = json.loads(blob[pos: pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n_tensors,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos: pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        if pos + 4 * count > len(blob):
            raise DataError(f"truncated tensor {name} in {path}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
    if pos != len(blob):
        raise DataError(f"{len(blob) - pos} trailing bytes in checkpoint {path}")
    return Checkpoint(meta=meta, tensors=tensors)
