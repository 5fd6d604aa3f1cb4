"""Versioned checkpoint container.

Layout: b"PSCK" | u32 version | u32 header length | header JSON (sorted keys) |
raw little-endian tensor bytes at the offsets listed in the header. Writing
is deterministic, so save -> load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..oim import LookupTable, OimConfig, UnlabeledQueue
from ..psmodel import BackboneSize, BackboneSpec, ModelConfig, PersonSearchModel

MAGIC = b"PSCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    backbone: BackboneSpec
    model_cfg: ModelConfig
    oim_cfg: OimConfig
    params: dict[str, np.ndarray]
    lut: LookupTable
    queue: UnlabeledQueue
    step: int = 0
    meta: dict = field(default_factory=dict)

    def build_model(self, dtype=torch.float32) -> PersonSearchModel:
        model = PersonSearchModel(self.backbone, self.model_cfg)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.params.items() if not k.startswith("adapter.")}
        model.load_state_dict(state)
        return model.to(dtype)

    def to_bytes(self) -> bytes:
        tensors = dict(sorted(self.params.items()))
        tensors["oim.lut"] = np.asfortranarray(self.lut.V).T  # column-major, columns contiguous
        tensors["oim.queue"] = np.ascontiguousarray(self.queue.U.T)
        entries, blobs, offset = [], [], 0
        for name, arr in tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "f4",
                            "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {
            "backbone": {"size": self.backbone.size.value, "widths": list(self.backbone.widths),
                         "strides": list(self.backbone.strides), "rpn_channels": self.backbone.rpn_channels,
                         "roi_hidden": self.backbone.roi_hidden},
            "model": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.model_cfg).items()},
            "oim": asdict(self.oim_cfg),
            "lut": {"frozen": self.lut.frozen, "skipped_updates": self.lut.skipped_updates},
            "queue": {"cursor": self.queue.cursor, "filled": self.queue.filled},
            "step": self.step,
            "meta": self.meta,
            "tensors": entries,
        }
        raw_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<II", VERSION, len(raw_header)) + raw_header + b"".join(blobs)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        header = json.loads(data[12:12 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    body = data[12 + hlen:]
    tensors = {}
    for e in header["tensors"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"checkpoint truncated inside tensor {e['name']}")
        tensors[e["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    b = header["backbone"]
    spec = BackboneSpec(BackboneSize(b["size"]), tuple(b["widths"]), tuple(b["strides"]),
                        b["rpn_channels"], b["roi_hidden"])
    mcfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in header["model"].items()})
    lut = LookupTable(tensors.pop("oim.lut").T, frozen=header["lut"]["frozen"])
    lut.skipped_updates = header["lut"]["skipped_updates"]
    qarr = tensors.pop("oim.queue")
    queue = UnlabeledQueue(qarr.shape[1], qarr.shape[0])
    queue.U[:] = qarr.T
    queue.cursor = header["queue"]["cursor"]
    queue.filled = header["queue"]["filled"]
    return Checkpoint(spec, mcfg, OimConfig(**header["oim"]), tensors, lut, queue,
                      header["step"], header["meta"])


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def model_params(model: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().to(torch.float32).numpy().copy() for k, v in model.state_dict().items()}


def params_checksum(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
