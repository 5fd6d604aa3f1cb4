"""Online Instance Matching: labeled lookup table, unlabeled circular queue, and the loss."""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import numerics as nx

logger = logging.getLogger(__name__)

UNLABELED = -1
LUT_MAGIC = b"OLUT"
LUT_VERSION = 1


class LutFormatError(ValueError):
    pass


@dataclass
class OimConfig:
    embed_dim: int = 32
    num_labeled: int = 16
    queue_size: int = 32
    temperature: float = 0.1
    lut_momentum: float = 0.5
    lambda_oim: float | None = None  # None: 1.0, or 0.1 once a teacher LUT is attached
    freeze_queue: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"OIM temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.lut_momentum <= 1.0:
            raise ValueError(f"LUT momentum must lie in [0, 1], got {self.lut_momentum}")
        if self.lambda_oim is not None and self.lambda_oim < 0:
            raise ValueError(f"lambda_oim must be non-negative, got {self.lambda_oim}")


class LookupTable:
    """D x P table of identity prototypes, stored as float32 columns."""

    def __init__(self, V: np.ndarray, frozen: bool = False):
        V = np.asarray(V, dtype=np.float32)
        if V.ndim != 2:
            raise ValueError(f"LUT must be a D x P matrix, got shape {V.shape}")
        self.V = np.array(V, dtype=np.float32, order="F")
        self.frozen = frozen
        self.skipped_updates = 0

    @property
    def dim(self) -> int:
        return self.V.shape[0]

    @property
    def num_labeled(self) -> int:
        return self.V.shape[1]

    def to_bytes(self) -> bytes:
        d, p = self.V.shape
        header = LUT_MAGIC + struct.pack("<IIII", LUT_VERSION, d, p, 32)
        return header + self.V.astype("<f4").tobytes(order="F")

    def checksum(self) -> str:
        return hashlib.sha256(self.V.astype("<f4").tobytes(order="F")).hexdigest()

    def copy(self, frozen: bool | None = None) -> "LookupTable":
        return LookupTable(self.V.copy(order="F"), self.frozen if frozen is None else frozen)


def lut_from_bytes(data: bytes) -> LookupTable:
    if len(data) < 20 or data[:4] != LUT_MAGIC:
        raise LutFormatError("not a LUT file (bad magic)")
    version, d, p, precision = struct.unpack("<IIII", data[4:20])
    if version != LUT_VERSION:
        raise LutFormatError(f"unsupported LUT version {version} (expected {LUT_VERSION})")
    if precision != 32:
        raise LutFormatError(f"unsupported LUT precision {precision}")
    body = data[20:]
    if len(body) != 4 * d * p:
        raise LutFormatError(f"LUT body has {len(body)} bytes, expected {4 * d * p} for D={d}, P={p}")
    V = np.frombuffer(body, dtype="<f4").reshape((d, p), order="F")
    return LookupTable(V.astype(np.float32))


def write_lut(lut: LookupTable, path) -> None:
    Path(path).write_bytes(lut.to_bytes())


def read_lut(path) -> LookupTable:
    return lut_from_bytes(Path(path).read_bytes())


class UnlabeledQueue:
    """D x Q FIFO of recent unlabeled embeddings; only filled slots take part in the softmax."""

    def __init__(self, dim: int, size: int):
        self.U = np.zeros((dim, size), dtype=np.float32)
        self.cursor = 0
        self.filled = 0

    @property
    def size(self) -> int:
        return self.U.shape[1]

    def enqueue(self, x: np.ndarray) -> None:
        if self.size == 0:
            return
        self.U[:, self.cursor] = x
        self.cursor = (self.cursor + 1) % self.size
        self.filled = min(self.filled + 1, self.size)

    def active(self) -> np.ndarray:
        # slots are written in order, so the filled ones are always the first `filled`
        return self.U[:, :self.filled]


def init_lut(dim: int, num_labeled: int, mode: str = "random", seed: int = 0,
             source: LookupTable | None = None) -> LookupTable:
    """RANDOM: unit-norm Gaussian columns, trainable. COPY: bit-exact frozen copy of ``source``."""
    mode = mode.lower()
    if mode == "random":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4C5554]))
        V = rng.normal(size=(dim, num_labeled))
        V /= np.linalg.norm(V, axis=0, keepdims=True)
        return LookupTable(V.astype(np.float32), frozen=False)
    if mode == "copy":
        if source is None:
            raise ValueError("COPY mode needs a source table")
        if source.V.shape != (dim, num_labeled):
            raise ValueError(f"LUT dimension mismatch: source is D={source.dim}, P={source.num_labeled}, "
                             f"target expects D={dim}, P={num_labeled}")
        return source.copy(frozen=True)
    raise ValueError(f"unknown LUT init mode {mode!r}")


def oim_logits(x: torch.Tensor, lut: LookupTable, queue: UnlabeledQueue | None) -> torch.Tensor:
    V = torch.from_numpy(np.ascontiguousarray(lut.V)).to(x.dtype)
    parts = [nx.matmul(x, V)]
    if queue is not None and queue.filled:
        U = torch.from_numpy(np.ascontiguousarray(queue.active())).to(x.dtype)
        parts.append(nx.matmul(x, U))
    return torch.cat(parts, dim=1)


def oim_forward(x: torch.Tensor, labels, lut: LookupTable, queue: UnlabeledQueue | None,
                temperature: float):
    """OIM loss over a batch of unit embeddings.

    Returns ``(loss, probs)``: loss is the mean of -log p_t over labeled rows;
    probs is (N, P + Q), zero on queue slots not yet written.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if x.ndim != 2 or x.shape[1] != lut.dim or len(labels) != x.shape[0]:
        raise nx.ShapeError(f"oim_forward: embeddings {tuple(x.shape)}, labels {labels.shape}, LUT D={lut.dim}")
    bad = labels[(labels >= lut.num_labeled) | (labels < UNLABELED)]
    if len(bad):
        raise ValueError(f"oim_forward: label {int(bad[0])} outside [0, {lut.num_labeled})")
    logp = nx.log_softmax(oim_logits(x, lut, queue), dim=1, temperature=temperature)
    q = 0 if queue is None else queue.size
    probs = torch.zeros(x.shape[0], lut.num_labeled + q, dtype=x.dtype)
    probs[:, :logp.shape[1]] = torch.exp(logp.detach())
    labeled = np.flatnonzero(labels >= 0)
    if len(labeled) == 0:
        logger.warning("oim_forward: batch has no labeled samples; loss is 0")
        return x.sum() * 0.0, probs
    idx = torch.as_tensor(labeled)
    picked = logp[idx, torch.as_tensor(labels[labeled])]
    return -nx.mean(picked), probs


def oim_update(x, labels, lut: LookupTable, queue: UnlabeledQueue | None, momentum: float,
               freeze_queue: bool = False) -> None:
    """Moving-average LUT update for labeled rows, enqueue for unlabeled rows.

    A frozen LUT is left untouched; each labeled row it would have written is
    counted in ``lut.skipped_updates``.
    """
    x = np.asarray(x.detach().numpy() if isinstance(x, torch.Tensor) else x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    for xi, t in zip(x, labels):
        if t >= 0:
            if lut.frozen:
                lut.skipped_updates += 1
                continue
            if momentum >= 1.0:
                continue
            col = momentum * lut.V[:, t].astype(np.float64) + (1.0 - momentum) * xi
            n = np.linalg.norm(col)
            if n > 0:
                lut.V[:, t] = (col / n).astype(np.float32)
        elif queue is not None and not freeze_queue:
            queue.enqueue((xi / max(np.linalg.norm(xi), 1e-12)).astype(np.float32))
