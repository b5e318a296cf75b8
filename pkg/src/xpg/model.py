"""Synthetic MoE model geometry and the raw bf16 weight container.

Every expert owns two weight tensors: a fused gate/up projection of shape
(2F, H) and a down projection of shape (H, F), stored as little-endian bf16.
The on-disk container (magic ``XPGW``) lays tensors out row-major in
(layer, expert, kind) order so that byte offsets are a closed form of the id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import ContainerFormatError, OutOfRangeError

MAGIC_WEIGHTS = b"XPGW"
CONTAINER_VERSION = 1
# magic + version u32 + N, L, H, F as u64, all little-endian
HEADER_STRUCT = struct.Struct("<4sIQQQQ")
HEADER_SIZE = HEADER_STRUCT.size

BF16_WIDTH = 2
WEIGHT_STD = 0.02


class TensorKind(IntEnum):
    GATE_UP = 1  # fused gate/up projection, (2F, H)
    DOWN = 2     # down projection, (H, F)


@dataclass(frozen=True)
class ModelSpec:
    """Geometry of a synthetic MoE model."""

    num_layers: int
    experts_per_layer: int
    hidden_dim: int
    intermediate_dim: int

    def __post_init__(self):
        if self.num_layers < 2:
            raise OutOfRangeError(f"num_layers must be >= 2, got {self.num_layers}")
        if self.experts_per_layer < 1:
            raise OutOfRangeError(
                f"experts_per_layer must be >= 1, got {self.experts_per_layer}"
            )
        if self.hidden_dim < 1 or self.intermediate_dim < 1:
            raise OutOfRangeError("hidden_dim and intermediate_dim must be >= 1")

    def sigma(self, kind: TensorKind) -> int:
        """Byte size of one tensor of the given kind."""
        if kind == TensorKind.GATE_UP:
            return BF16_WIDTH * self.hidden_dim * 2 * self.intermediate_dim
        return BF16_WIDTH * self.intermediate_dim * self.hidden_dim

    @property
    def sigma_gate_up(self) -> int:
        return self.sigma(TensorKind.GATE_UP)

    @property
    def sigma_down(self) -> int:
        return self.sigma(TensorKind.DOWN)

    @property
    def expert_bytes(self) -> int:
        return self.sigma_gate_up + self.sigma_down

    @property
    def layer_bytes(self) -> int:
        return self.experts_per_layer * self.expert_bytes

    @property
    def total_bytes(self) -> int:
        return self.num_layers * self.layer_bytes

    def value_count(self, kind: TensorKind) -> int:
        return self.sigma(kind) // BF16_WIDTH

    def tensor_shape(self, kind: TensorKind) -> tuple[int, int]:
        if kind == TensorKind.GATE_UP:
            return (2 * self.intermediate_dim, self.hidden_dim)
        return (self.hidden_dim, self.intermediate_dim)


@dataclass(frozen=True, order=True)
class ExpertTensorId:
    """Identity of one expert weight tensor: 1-based layer and expert."""

    layer: int
    expert: int
    kind: TensorKind

    def __str__(self):
        return f"L{self.layer}E{self.expert}K{int(self.kind)}"


def check_id(tid: ExpertTensorId, spec: ModelSpec) -> None:
    if not 1 <= tid.layer <= spec.num_layers:
        raise OutOfRangeError(f"layer {tid.layer} outside [1, {spec.num_layers}]")
    if not 1 <= tid.expert <= spec.experts_per_layer:
        raise OutOfRangeError(
            f"expert {tid.expert} outside [1, {spec.experts_per_layer}]"
        )
    if tid.kind not in (TensorKind.GATE_UP, TensorKind.DOWN):
        raise OutOfRangeError(f"unknown tensor kind {tid.kind!r}")


def iter_tensor_ids(spec: ModelSpec):
    """All 2*N*L tensor ids in container order (layer, expert, kind)."""
    for layer in range(1, spec.num_layers + 1):
        for expert in range(1, spec.experts_per_layer + 1):
            for kind in (TensorKind.GATE_UP, TensorKind.DOWN):
                yield ExpertTensorId(layer, expert, kind)


def tensor_offset(tid: ExpertTensorId, spec: ModelSpec) -> int:
    """Byte offset of a tensor inside the container payload."""
    check_id(tid, spec)
    offset = (tid.layer - 1) * spec.layer_bytes
    offset += (tid.expert - 1) * spec.expert_bytes
    if tid.kind == TensorKind.DOWN:
        offset += spec.sigma_gate_up
    return offset


def float32_to_bf16(values: np.ndarray) -> np.ndarray:
    """Round float32 to bf16 bit patterns (round-to-nearest-even, finite inputs)."""
    bits = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)
    rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
    return rounded.astype(np.uint16)


def bf16_to_float32(words: np.ndarray) -> np.ndarray:
    out = np.asarray(words, dtype=np.uint16).astype(np.uint32) << 16
    return out.view(np.float32)


class WeightContainer:
    """Immutable raw bf16 weight store for all experts of a model."""

    def __init__(self, spec: ModelSpec, payload: bytes):
        if len(payload) != spec.total_bytes:
            raise ContainerFormatError(
                f"payload is {len(payload)} bytes, expected {spec.total_bytes}"
            )
        self.spec = spec
        self._payload = bytes(payload)

    @property
    def payload(self) -> bytes:
        return self._payload

    def tensor_bytes(self, tid: ExpertTensorId) -> bytes:
        offset = tensor_offset(tid, self.spec)
        return self._payload[offset : offset + self.spec.sigma(tid.kind)]

    def tensor_words(self, tid: ExpertTensorId) -> np.ndarray:
        return np.frombuffer(self.tensor_bytes(tid), dtype="<u2")

    def tensor_f32(self, tid: ExpertTensorId) -> np.ndarray:
        shape = self.spec.tensor_shape(tid.kind)
        return bf16_to_float32(self.tensor_words(tid)).reshape(shape)

    def to_bytes(self) -> bytes:
        spec = self.spec
        header = HEADER_STRUCT.pack(
            MAGIC_WEIGHTS,
            CONTAINER_VERSION,
            spec.num_layers,
            spec.experts_per_layer,
            spec.hidden_dim,
            spec.intermediate_dim,
        )
        return header + self._payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "WeightContainer":
        if len(raw) < HEADER_SIZE:
            raise ContainerFormatError(f"container shorter than header ({len(raw)} bytes)")
        magic, version, n, l, h, f = HEADER_STRUCT.unpack_from(raw, 0)
        if magic != MAGIC_WEIGHTS:
            raise ContainerFormatError(f"bad magic {magic!r}, expected {MAGIC_WEIGHTS!r}")
        if version != CONTAINER_VERSION:
            raise ContainerFormatError(f"unsupported container version {version}")
        spec = ModelSpec(n, l, h, f)
        payload = raw[HEADER_SIZE:]
        if len(payload) != spec.total_bytes:
            raise ContainerFormatError(
                f"payload is {len(payload)} bytes, header implies {spec.total_bytes}"
            )
        return cls(spec, payload)

    def write(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def read(cls, path) -> "WeightContainer":
        return cls.from_bytes(Path(path).read_bytes())


def generate_synthetic_model(spec: ModelSpec, seed: int) -> WeightContainer:
    """Deterministic Gaussian(0, 0.02) weights rounded to bf16.

    Identical (spec, seed) pairs produce bit-identical containers.
    """
    rng = np.random.default_rng(seed)
    count = spec.total_bytes // BF16_WIDTH
    values = rng.standard_normal(count, dtype=np.float32) * np.float32(WEIGHT_STD)
    words = float32_to_bf16(values)
    return WeightContainer(spec, words.astype("<u2").tobytes())
