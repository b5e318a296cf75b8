"""Lossless selective compression of bf16 tensors.

Only the 8 exponent bits of each value are entropy-coded (canonical Huffman,
one table per model); the sign and mantissa bits travel raw, one byte per
value. Decompression is bit-exact, including NaN, infinities and subnormals.

Bitstream convention: codewords are packed most-significant-bit first within
bytes; canonical codes are assigned in (length, symbol) ascending order, so a
table is fully reconstructible from its 256 code lengths.
"""

from __future__ import annotations

import heapq
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ContainerFormatError,
    EmptyHistogramError,
    InvalidCodeError,
    OddLengthError,
    SymbolNotInTableError,
    TruncatedStreamError,
)
from .model import (
    CONTAINER_VERSION,
    ExpertTensorId,
    ModelSpec,
    WeightContainer,
    iter_tensor_ids,
)

MAGIC_COMPRESSED = b"XPGC"
XPGC_HEADER_STRUCT = struct.Struct("<4sIQQQQ")
TENSOR_RECORD_STRUCT = struct.Struct("<QQ")
# per-tensor record header: value_count u64 + bitstream byte length u64
TENSOR_HEADER_BYTES = TENSOR_RECORD_STRUCT.size

NUM_SYMBOLS = 256
MAX_CODE_LENGTH = 32


def exponent_bytes(data: bytes) -> np.ndarray:
    """Extract the biased-exponent byte of every bf16 word in `data`."""
    if len(data) % 2 != 0:
        raise OddLengthError(f"bf16 payload has odd length {len(data)}")
    words = np.frombuffer(data, dtype="<u2")
    return ((words >> 7) & 0xFF).astype(np.uint8)


def sign_mantissa_bytes(data: bytes) -> np.ndarray:
    """Pack sign (bit 7) and mantissa (bits 6..0) of every value into one byte."""
    if len(data) % 2 != 0:
        raise OddLengthError(f"bf16 payload has odd length {len(data)}")
    words = np.frombuffer(data, dtype="<u2")
    return (((words >> 8) & 0x80) | (words & 0x7F)).astype(np.uint8)


@dataclass(frozen=True)
class ExponentHistogram:
    counts: tuple

    def __post_init__(self):
        if len(self.counts) != NUM_SYMBOLS:
            raise ValueError("histogram needs exactly 256 bins")

    @property
    def total(self) -> int:
        return sum(self.counts)

    def entropy_bits(self) -> float:
        """Shannon entropy of the exponent distribution, in bits per value."""
        total = self.total
        if total == 0:
            return 0.0
        counts = np.array(self.counts, dtype=np.float64)
        probs = counts[counts > 0] / total
        return float(-(probs * np.log2(probs)).sum())


def build_histogram(data: bytes) -> ExponentHistogram:
    exps = exponent_bytes(data)
    counts = np.bincount(exps, minlength=NUM_SYMBOLS)
    return ExponentHistogram(tuple(int(c) for c in counts))


def _huffman_lengths(counts) -> list[int]:
    """Code lengths of an optimal prefix code, deterministic tie-breaking."""
    heap = [(c, sym, None) for sym, c in enumerate(counts) if c > 0]
    if not heap:
        raise EmptyHistogramError("cannot build a table from an empty histogram")
    if len(heap) == 1:
        lengths = [0] * NUM_SYMBOLS
        lengths[heap[0][1]] = 1
        return lengths
    heapq.heapify(heap)
    order = NUM_SYMBOLS
    # internal nodes: (count, tiebreak, (left, right))
    while len(heap) > 1:
        a = heapq.heappop(heap)
        b = heapq.heappop(heap)
        heapq.heappush(heap, (a[0] + b[0], order, (a, b)))
        order += 1
    lengths = [0] * NUM_SYMBOLS

    stack = [(heap[0], 0)]
    while stack:
        (count, sym, children), depth = stack.pop()
        if children is None:
            lengths[sym] = depth
        else:
            stack.append((children[0], depth + 1))
            stack.append((children[1], depth + 1))
    return lengths


def _limit_lengths(lengths: list[int], cap: int) -> list[int]:
    """Rebalance code lengths so none exceeds `cap` while keeping Kraft <= 1.

    Standard overflow repair: clamp long codes, then shorten the cheapest
    symbols until the Kraft sum fits again. Unreachable for realistic
    256-symbol histograms, but keeps the decoder's tables provably bounded.
    """
    if max(lengths) <= cap:
        return lengths
    lengths = [min(l, cap) if l else 0 for l in lengths]
    kraft = sum(1 << (cap - l) for l in lengths if l)
    budget = 1 << cap
    # lengthen the longest-but-cheapest codes until the code is feasible again
    while kraft > budget:
        for l in range(cap - 1, 0, -1):
            sym = next((s for s, ln in enumerate(lengths) if ln == l), None)
            if sym is not None:
                lengths[sym] += 1
                kraft -= 1 << (cap - l - 1)
                break
    return lengths


@dataclass(frozen=True)
class HuffmanTable:
    """Canonical Huffman table over the 256 exponent byte values."""

    code_lengths: tuple
    codes: tuple = field(repr=False, default=())

    @classmethod
    def from_lengths(cls, lengths) -> "HuffmanTable":
        lengths = tuple(int(l) for l in lengths)
        if len(lengths) != NUM_SYMBOLS:
            raise ValueError("need exactly 256 code lengths")
        if any(l < 0 or l > MAX_CODE_LENGTH for l in lengths):
            raise ValueError(f"code lengths must lie in [0, {MAX_CODE_LENGTH}]")
        present = [(l, sym) for sym, l in enumerate(lengths) if l > 0]
        if not present:
            raise EmptyHistogramError("table has no symbols")
        kraft = sum(2.0 ** -l for l, _ in present)
        if kraft > 1.0 + 1e-12:
            raise ValueError(f"code lengths violate the Kraft inequality ({kraft})")
        codes = [0] * NUM_SYMBOLS
        code = 0
        prev_len = 0
        for l, sym in sorted(present):
            code <<= l - prev_len
            codes[sym] = code
            code += 1
            prev_len = l
        return cls(code_lengths=lengths, codes=tuple(codes))

    @property
    def table_id(self) -> int:
        return zlib.crc32(bytes(self.code_lengths))

    def expected_bits(self, hist: ExponentHistogram) -> float:
        total = hist.total
        bits = sum(c * self.code_lengths[s] for s, c in enumerate(hist.counts) if c)
        return bits / total if total else 0.0

    def _decode_tables(self):
        """first_code / first_rank per length plus rank-ordered symbols."""
        by_length = {}
        for sym, l in enumerate(self.code_lengths):
            if l:
                by_length.setdefault(l, []).append(sym)
        symbols = []
        first_code = {}
        first_rank = {}
        code = 0
        prev_len = 0
        for l in sorted(by_length):
            code <<= l - prev_len
            first_code[l] = code
            first_rank[l] = len(symbols)
            syms = sorted(by_length[l])
            symbols.extend(syms)
            code += len(syms)
            prev_len = l
        return first_code, first_rank, symbols


def build_table(hist: ExponentHistogram) -> HuffmanTable:
    """Optimal canonical prefix code for a histogram (lengths capped at 32)."""
    if hist.total < 1:
        raise EmptyHistogramError("histogram is empty")
    lengths = _huffman_lengths(hist.counts)
    lengths = _limit_lengths(lengths, MAX_CODE_LENGTH)
    return HuffmanTable.from_lengths(lengths)


@dataclass(frozen=True)
class CompressedTensor:
    value_count: int
    sign_mantissa_plane: bytes
    exponent_bitstream: bytes
    exponent_bit_count: int
    table_id: int
    tensor_id: ExpertTensorId | None = None

    @property
    def compressed_bytes(self) -> int:
        return TENSOR_HEADER_BYTES + self.value_count + len(self.exponent_bitstream)

    def effective_bits_per_value(self) -> float:
        """Raw sign/mantissa byte plus the coded exponent cost per value."""
        if self.value_count < 1:
            raise ValueError("effective bits undefined for an empty tensor")
        return 8.0 + self.exponent_bit_count / self.value_count


def compress(
    data: bytes, table: HuffmanTable, tensor_id: ExpertTensorId | None = None
) -> CompressedTensor:
    exps = exponent_bytes(data)
    sm_plane = sign_mantissa_bytes(data)
    lengths = table.code_lengths
    if exps.size:
        present = np.bincount(exps, minlength=NUM_SYMBOLS) > 0
        missing = [s for s in np.nonzero(present)[0] if lengths[s] == 0]
        if missing:
            raise SymbolNotInTableError(
                f"exponent bytes {missing[:4]} have no codeword; wrong table?"
            )
    codes = table.codes
    acc = 0
    nbits = 0
    total_bits = 0
    out = bytearray()
    append = out.append
    for e in exps.tolist():
        l = lengths[e]
        acc = (acc << l) | codes[e]
        nbits += l
        total_bits += l
        while nbits >= 8:
            nbits -= 8
            append((acc >> nbits) & 0xFF)
        acc &= (1 << nbits) - 1
    if nbits:
        append((acc << (8 - nbits)) & 0xFF)
    return CompressedTensor(
        value_count=int(exps.size),
        sign_mantissa_plane=sm_plane.tobytes(),
        exponent_bitstream=bytes(out),
        exponent_bit_count=total_bits,
        table_id=table.table_id,
        tensor_id=tensor_id,
    )


def decompress(ct: CompressedTensor, table: HuffmanTable) -> bytes:
    if ct.table_id != table.table_id:
        raise SymbolNotInTableError(
            f"tensor was coded with table {ct.table_id:#x}, got {table.table_id:#x}"
        )
    n = ct.value_count
    if len(ct.sign_mantissa_plane) != n:
        raise ContainerFormatError(
            f"sign/mantissa plane is {len(ct.sign_mantissa_plane)} bytes for {n} values"
        )
    if n == 0:
        return b""
    first_code, first_rank, ranked = table._decode_tables()
    max_len = max(first_code)
    # last admissible code value per length, for O(1) membership tests
    last_code = {}
    lens_sorted = sorted(first_code)
    for i, l in enumerate(lens_sorted):
        nxt = first_rank[lens_sorted[i + 1]] if i + 1 < len(lens_sorted) else len(ranked)
        last_code[l] = first_code[l] + (nxt - first_rank[l]) - 1
    exps = np.empty(n, dtype=np.uint8)
    out_i = 0
    code = 0
    length = 0
    fc = [first_code.get(l, 1 << 40) for l in range(max_len + 1)]
    lc = [last_code.get(l, -1) for l in range(max_len + 1)]
    fr = [first_rank.get(l, 0) for l in range(max_len + 1)]
    stream = ct.exponent_bitstream
    done = False
    for byte_i, byte in enumerate(stream):
        if done:
            break
        for shift in (7, 6, 5, 4, 3, 2, 1, 0):
            code = (code << 1) | ((byte >> shift) & 1)
            length += 1
            if length <= max_len and fc[length] <= code <= lc[length]:
                exps[out_i] = ranked[fr[length] + code - fc[length]]
                out_i += 1
                if out_i == n:
                    done = True
                    break
                code = 0
                length = 0
            elif length > max_len:
                raise InvalidCodeError(
                    f"no codeword matches a {length}-bit pattern at byte {byte_i}"
                )
    if not done:
        raise TruncatedStreamError(
            f"bitstream ended after {out_i} of {n} values",
            byte_offset=len(stream),
            tensor_id=ct.tensor_id,
        )
    sm = np.frombuffer(ct.sign_mantissa_plane, dtype=np.uint8).astype(np.uint16)
    words = ((sm & 0x80) << 8) | (exps.astype(np.uint16) << 7) | (sm & 0x7F)
    return words.astype("<u2").tobytes()


def optimal_code_cost_bits(hist: ExponentHistogram) -> int:
    """Total bits of an optimal prefix code, by summing pairwise merges.

    Independent of the table construction above; used as an oracle for the
    coded exponent-plane size (single-symbol histograms cost 1 bit/value).
    """
    counts = sorted(c for c in hist.counts if c > 0)
    if not counts:
        raise EmptyHistogramError("histogram is empty")
    if len(counts) == 1:
        return counts[0]
    heapq.heapify(counts)
    total = 0
    while len(counts) > 1:
        merged = heapq.heappop(counts) + heapq.heappop(counts)
        total += merged
        heapq.heappush(counts, merged)
    return total


class CompressedModel:
    """A whole model compressed with one shared exponent table."""

    def __init__(self, spec: ModelSpec, table: HuffmanTable, tensors: dict):
        self.spec = spec
        self.table = table
        self.tensors = tensors

    @classmethod
    def from_container(cls, container: WeightContainer) -> "CompressedModel":
        spec = container.spec
        hist = build_histogram(container.payload)
        table = build_table(hist)
        tensors = {}
        for tid in iter_tensor_ids(spec):
            tensors[tid] = compress(container.tensor_bytes(tid), table, tid)
        return cls(spec, table, tensors)

    def tensor_bytes(self, tid: ExpertTensorId) -> bytes:
        return decompress(self.tensors[tid], self.table)

    @property
    def compressed_payload_bytes(self) -> int:
        return sum(ct.compressed_bytes for ct in self.tensors.values())

    @property
    def ratio(self) -> float:
        """Compressed payload size over raw payload size."""
        return self.compressed_payload_bytes / self.spec.total_bytes

    def to_bytes(self) -> bytes:
        spec = self.spec
        parts = [
            XPGC_HEADER_STRUCT.pack(
                MAGIC_COMPRESSED,
                CONTAINER_VERSION,
                spec.num_layers,
                spec.experts_per_layer,
                spec.hidden_dim,
                spec.intermediate_dim,
            ),
            bytes(self.table.code_lengths),
        ]
        for tid in iter_tensor_ids(spec):
            ct = self.tensors[tid]
            parts.append(
                TENSOR_RECORD_STRUCT.pack(ct.value_count, len(ct.exponent_bitstream))
            )
            parts.append(ct.sign_mantissa_plane)
            parts.append(ct.exponent_bitstream)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CompressedModel":
        if len(raw) < XPGC_HEADER_STRUCT.size:
            raise ContainerFormatError("compressed container shorter than header")
        magic, version, n, l, h, f = XPGC_HEADER_STRUCT.unpack_from(raw, 0)
        if magic != MAGIC_COMPRESSED:
            raise ContainerFormatError(f"bad magic {magic!r}, expected {MAGIC_COMPRESSED!r}")
        if version != CONTAINER_VERSION:
            raise ContainerFormatError(f"unsupported container version {version}")
        spec = ModelSpec(n, l, h, f)
        pos = XPGC_HEADER_STRUCT.size
        if len(raw) < pos + NUM_SYMBOLS:
            raise ContainerFormatError("compressed container truncated in code lengths")
        table = HuffmanTable.from_lengths(raw[pos : pos + NUM_SYMBOLS])
        pos += NUM_SYMBOLS
        tensors = {}
        for tid in iter_tensor_ids(spec):
            if len(raw) < pos + TENSOR_HEADER_BYTES:
                raise TruncatedStreamError(
                    f"record header for {tid} truncated", byte_offset=pos, tensor_id=tid
                )
            value_count, stream_len = TENSOR_RECORD_STRUCT.unpack_from(raw, pos)
            pos += TENSOR_HEADER_BYTES
            if value_count != spec.value_count(tid.kind):
                raise ContainerFormatError(
                    f"{tid}: value count {value_count} does not match geometry"
                )
            end = pos + value_count + stream_len
            if len(raw) < end:
                raise TruncatedStreamError(
                    f"payload for {tid} truncated", byte_offset=pos, tensor_id=tid
                )
            sm = raw[pos : pos + value_count]
            stream = raw[pos + value_count : end]
            pos = end
            tensors[tid] = CompressedTensor(
                value_count=value_count,
                sign_mantissa_plane=sm,
                exponent_bitstream=stream,
                # bit count is not stored; recovered below for reporting
                exponent_bit_count=0,
                table_id=table.table_id,
                tensor_id=tid,
            )
        model = cls(spec, table, tensors)
        model._restore_bit_counts()
        return model

    def _restore_bit_counts(self):
        lengths = self.table.code_lengths
        for tid, ct in list(self.tensors.items()):
            if ct.exponent_bit_count:
                continue
            data = decompress(ct, self.table)
            counts = np.bincount(exponent_bytes(data), minlength=NUM_SYMBOLS)
            bits = int(sum(int(c) * lengths[s] for s, c in enumerate(counts) if c))
            self.tensors[tid] = CompressedTensor(
                value_count=ct.value_count,
                sign_mantissa_plane=ct.sign_mantissa_plane,
                exponent_bitstream=ct.exponent_bitstream,
                exponent_bit_count=bits,
                table_id=ct.table_id,
                tensor_id=tid,
            )

    def write(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def read(cls, path) -> "CompressedModel":
        return cls.from_bytes(Path(path).read_bytes())
