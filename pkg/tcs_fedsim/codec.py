"""
Bit-exact wire encoding of sparse client updates.

Payload layout (header little-endian, body MSB-first)::

    header  23 bytes   d u32 | round u32 | K_global u32 | K_local u32 |
                       block_size u32 | quantizer u8 | P u16
    levels  4*L bytes  level table as float32 (L = 0 none, 1 scaled_sign, P fractional)
    body    bits       K_global value codes | local position bitstream |
                       K_local value codes | zero padding to a byte boundary

Positions of the global section are never transmitted; the receiver supplies its
own copy of the global mask when decoding.
"""
import logging
import math
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .compressors import SparseUpdate
from .config import QUANTIZER_KIND_CODES, QuantizerSpec, ratio_to_count
from .exceptions import ContractViolationError, MalformedPayloadError
from .tensor import LayerLayout, Mask, substream
from .types import BitArray, FloatArray, IndexArray, PositionCoding, QuantizerKind

logger = logging.getLogger(__name__)

HEADER_FORMAT = "<IIIIIBH"
HEADER_BYTES = struct.calcsize(HEADER_FORMAT)
HEADER_BITS = HEADER_BYTES * 8
LEVEL_BITS = 32
_U32_MAX = 0xFFFFFFFF
_KIND_BY_CODE = {code: kind for kind, code in QUANTIZER_KIND_CODES.items()}


# Bit helpers

def _shifts(width: int) -> np.ndarray:
    return np.arange(width - 1, -1, -1, dtype=np.uint64)


def _uint_bits(values: np.ndarray, width: int) -> BitArray:
    """MSB-first bits of each unsigned value, concatenated"""
    if width == 0 or values.size == 0:
        return np.empty(0, dtype=np.uint8)
    v = np.asarray(values, dtype=np.uint64)[:, None]
    return ((v >> _shifts(width)) & np.uint64(1)).astype(np.uint8).reshape(-1)


def _read_uints(bits: BitArray, start: int, count: int, width: int) -> np.ndarray:
    if width == 0 or count == 0:
        return np.zeros(count, dtype=np.uint64)
    chunk = bits[start:start + count * width].astype(np.uint64).reshape(count, width)
    return (chunk << _shifts(width)).sum(axis=1, dtype=np.uint64)


def intra_block_width(block_size: int) -> int:
    """Bits per intra-block offset, ceil(log2 block_size)"""
    return (int(block_size) - 1).bit_length()


def block_size_for(phi: float, d: int) -> int:
    """Nominal block size ceil(1/phi), capped at d; one block when phi is 0"""
    if phi <= 0:
        return max(d, 1)
    return max(1, min(math.ceil(1.0 / phi - 1e-9), max(d, 1)))


# Position bitstream

@dataclass(frozen=True)
class PositionBitstream:
    """Block-coded sparse positions of a length-``d`` vector"""
    bits: BitArray
    d: int
    block_size: int

    @property
    def num_blocks(self) -> int:
        return -(-self.d // self.block_size)

    @property
    def width(self) -> int:
        return intra_block_width(self.block_size)

    @property
    def bit_length(self) -> int:
        return int(self.bits.size)

    def to_bitstring(self) -> str:
        return "".join("1" if b else "0" for b in self.bits.tolist())

    def to_bytes(self) -> bytes:
        return np.packbits(self.bits).tobytes()

    @classmethod
    def from_bitstring(cls, text: str, d: int, block_size: int) -> "PositionBitstream":
        if set(text) - {"0", "1"}:
            raise ContractViolationError("bit strings may only contain 0 and 1")
        return cls(np.frombuffer(text.encode("ascii"), dtype=np.uint8) - ord("0"), d, block_size)


def encode_positions(positions: Union[Sequence[int], IndexArray], d: int, block_size: int) -> PositionBitstream:
    """
    Block-code increasing positions.

    Each block emits ``1`` plus a ``w``-bit offset per position it holds, then a
    terminating ``0``; ``w = ceil(log2 block_size)``.

    Raises:
        ContractViolationError: If positions are out of range or not strictly
            increasing, or block_size < 1
    """
    if block_size < 1:
        raise ContractViolationError("block_size must be at least 1")
    p = np.asarray(positions, dtype=np.int64).reshape(-1)
    if p.size and (p[0] < 0 or p[-1] >= d):
        raise ContractViolationError(f"position outside [0, {d})")
    if np.any(np.diff(p) <= 0):
        raise ContractViolationError("positions must be strictly increasing")

    w = intra_block_width(block_size)
    num_blocks = -(-d // block_size)
    bits = np.zeros(p.size * (w + 1) + num_blocks, dtype=np.uint8)
    blocks, offsets = np.divmod(p, block_size)
    # Every earlier block has emitted its terminator before this marker
    starts = np.arange(p.size, dtype=np.int64) * (w + 1) + blocks
    bits[starts] = 1
    if w and p.size:
        bits[(starts[:, None] + 1 + np.arange(w)).reshape(-1)] = _uint_bits(offsets, w)
    return PositionBitstream(bits, d, block_size)


def _scan_positions(
    bits: BitArray,
    start: int,
    limit: int,
    d: int,
    block_size: int,
    base_offset: int = 0,
) -> Tuple[List[int], int]:
    """Walk a block-coded stream in bits[start:limit]; returns positions and end offset"""
    w = intra_block_width(block_size)
    num_blocks = -(-d // block_size)
    stream = bits[start:limit]
    flags = stream.tolist()
    if w and stream.size > w:
        windows = np.lib.stride_tricks.sliding_window_view(stream[1:].astype(np.int64), w)
        offsets = (windows << np.arange(w - 1, -1, -1)).sum(axis=1).tolist()
    else:
        offsets = []
    n = len(flags)

    out: List[int] = []
    ptr = 0
    block = 0
    last = -1
    while block < num_blocks:
        if ptr >= n:
            raise MalformedPayloadError("position stream truncated", base_offset + start + ptr)
        if not flags[ptr]:
            block += 1
            last = -1
            ptr += 1
            continue
        if ptr + w >= n:
            raise MalformedPayloadError("intra-block offset truncated", base_offset + start + ptr)
        offset = offsets[ptr] if w else 0
        position = block * block_size + offset
        if offset >= block_size or position >= d:
            raise MalformedPayloadError(f"offset {offset} outside block {block}", base_offset + start + ptr + 1)
        if offset <= last:
            raise MalformedPayloadError("positions not increasing within block", base_offset + start + ptr + 1)
        out.append(position)
        last = offset
        ptr += w + 1
    return out, start + ptr


def decode_positions(stream: PositionBitstream) -> IndexArray:
    """
    Inverse of encode_positions.

    Raises:
        MalformedPayloadError: If the stream is truncated, holds an offset beyond its
            block (or beyond ``d``), or has bits left after the last terminator
    """
    if stream.block_size < 1 or stream.d < 0:
        raise MalformedPayloadError("invalid stream geometry", 0)
    bits = np.asarray(stream.bits, dtype=np.uint8)
    positions, end = _scan_positions(bits, 0, bits.size, stream.d, stream.block_size)
    if end != bits.size:
        raise MalformedPayloadError("bits after the final block terminator", end)
    return np.asarray(positions, dtype=np.int64)


# Quantizers

def _mean_magnitude(magnitudes: FloatArray) -> float:
    return float(np.sum(magnitudes) / magnitudes.size)


def scaled_sign_quantize(u: Union[Sequence[float], FloatArray]) -> FloatArray:
    """Scaled sign: every value becomes mean|u| with its own sign (sign(0) = +1)"""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if u.size == 0:
        raise ContractViolationError("cannot quantize an empty block")
    scale = _mean_magnitude(np.abs(u))
    return np.where(u < 0, -scale, scale)


@dataclass(frozen=True)
class FractionalQuantization:
    """Level table plus per-value level index and sign"""
    levels: FloatArray
    indices: IndexArray
    negative: np.ndarray
    sigma: float

    @property
    def gamma(self) -> float:
        """Relative error bound (1 - sigma) / sigma"""
        return (1.0 - self.sigma) / self.sigma

    def dequantize(self) -> FloatArray:
        return np.where(self.negative, -1.0, 1.0) * self.levels[self.indices]


def fractional_quantize(u: Union[Sequence[float], FloatArray], levels: int) -> FractionalQuantization:
    """
    Geometric-interval magnitude quantizer.

    Magnitudes are split into ``levels`` intervals between u_max and u_min with ratio
    sigma = (u_min/u_max)^(1/P). A magnitude exactly on a boundary belongs to the
    smaller interval; u_max is in the first and u_min in the last. Each level is the
    mean magnitude of its members; an empty interval gets its geometric midpoint.

    Raises:
        ContractViolationError: If ``u`` is empty, contains a zero, or P < 1
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if u.size == 0:
        raise ContractViolationError("cannot quantize an empty block")
    if levels < 1:
        raise ContractViolationError("P must be at least 1")
    if np.any(u == 0):
        raise ContractViolationError("fractional quantization is undefined for zero values")

    mags = np.abs(u)
    u_max = float(mags.max())
    u_min = float(mags.min())
    negative = u < 0
    if u_min == u_max:
        return FractionalQuantization(
            np.full(levels, u_max), np.zeros(u.size, dtype=np.int64), negative, 1.0
        )

    sigma = (u_min / u_max) ** (1.0 / levels)
    ascending = u_max * sigma ** np.arange(levels - 1, 0, -1, dtype=np.float64)
    # number of boundaries at or above each magnitude
    indices = (levels - 1) - np.searchsorted(ascending, mags, side="left")
    indices = indices.astype(np.int64)
    indices[mags == u_max] = 0
    indices[mags == u_min] = levels - 1

    table = u_max * sigma ** (np.arange(levels, dtype=np.float64) + 0.5)
    for p in np.unique(indices):
        table[p] = _mean_magnitude(mags[indices == p])
    return FractionalQuantization(table, indices, negative, sigma)


@dataclass(frozen=True)
class QuantizedValues:
    """Wire form of one payload's values"""
    levels: FloatArray
    codes: np.ndarray
    dequantized: FloatArray


def quantize_values(values: FloatArray, spec: QuantizerSpec) -> QuantizedValues:
    """
    Quantize all values of a payload jointly.

    ``codes`` are raw float32 bit patterns for ``none``, otherwise the sign bit
    (1 = negative) followed by the level index. Levels are rounded to float32, the
    precision they travel with, and ``dequantized`` is what the receiver decodes.
    Exact zeros take the smallest level with a positive sign under fractional
    quantization.
    """
    values = np.asarray(values, dtype=np.float64)
    if spec.kind == "none":
        raw = values.astype(np.float32)
        return QuantizedValues(np.empty(0), raw.view(np.uint32).astype(np.uint64), raw.astype(np.float64))

    n = values.size
    negative = values < 0
    indices = np.zeros(n, dtype=np.int64)
    if spec.kind == "scaled_sign":
        levels = np.array([_mean_magnitude(np.abs(values)) if n else 0.0])
    else:
        levels = np.zeros(spec.levels)
        nonzero = values != 0
        indices[~nonzero] = spec.levels - 1
        if nonzero.any():
            fq = fractional_quantize(values[nonzero], spec.levels)
            levels = fq.levels
            indices[nonzero] = fq.indices

    levels32 = levels.astype(np.float32).astype(np.float64)
    codes = (negative.astype(np.uint64) << np.uint64(spec.index_bits)) | indices.astype(np.uint64)
    dequantized = np.where(negative, -1.0, 1.0) * levels32[indices] if n else np.empty(0)
    return QuantizedValues(levels32, codes, dequantized)


def _dequantize_codes(codes: np.ndarray, levels: FloatArray, spec: QuantizerSpec, offset: int) -> FloatArray:
    if spec.kind == "none":
        values = codes.astype(np.uint32).view(np.float32).astype(np.float64)
        if not np.all(np.isfinite(values)):
            raise MalformedPayloadError("non-finite raw value", offset)
        return values
    index_mask = np.uint64((1 << spec.index_bits) - 1)
    indices = (codes & index_mask).astype(np.int64)
    if np.any(indices >= levels.size):
        raise MalformedPayloadError("level index beyond level table", offset)
    negative = (codes >> np.uint64(spec.index_bits)) & np.uint64(1)
    return np.where(negative == 1, -1.0, 1.0) * levels[indices]


# Payload framing

@dataclass(frozen=True)
class EncodedPayload:
    """One client's uplink message"""
    d: int
    round: int
    k_global: int
    k_local: int
    block_size: int
    quantizer: QuantizerKind
    levels: int
    level_table: FloatArray
    body: bytes
    body_bits: int

    @property
    def spec(self) -> QuantizerSpec:
        return QuantizerSpec(kind=self.quantizer, levels=self.levels)

    @property
    def bit_length(self) -> int:
        """Exact payload size in bits, excluding the final byte padding"""
        return HEADER_BITS + LEVEL_BITS * self.level_table.size + self.body_bits

    def to_bytes(self) -> bytes:
        header = struct.pack(
            HEADER_FORMAT,
            self.d,
            self.round,
            self.k_global,
            self.k_local,
            self.block_size,
            QUANTIZER_KIND_CODES[self.quantizer],
            self.levels,
        )
        return header + self.level_table.astype("<f4").tobytes() + self.body

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncodedPayload":
        """
        Parse raw payload bytes.

        Raises:
            MalformedPayloadError: If the header is short or inconsistent, or the
                body length does not match the header
        """
        if len(data) < HEADER_BYTES:
            raise MalformedPayloadError("payload shorter than its header", len(data) * 8)
        d, round_, k_global, k_local, block_size, kind_code, levels = struct.unpack_from(HEADER_FORMAT, data)
        if kind_code not in _KIND_BY_CODE:
            raise MalformedPayloadError(f"unknown quantizer code {kind_code}", (HEADER_BYTES - 3) * 8)
        kind = _KIND_BY_CODE[kind_code]
        expected_levels = {"none": 0, "scaled_sign": 1}.get(kind, levels)
        if levels != expected_levels or (kind == "fractional" and levels < 1):
            raise MalformedPayloadError(f"level count {levels} invalid for {kind}", (HEADER_BYTES - 2) * 8)
        if block_size < 1 or k_global + k_local > d:
            raise MalformedPayloadError("inconsistent header counts", 0)

        table_end = HEADER_BYTES + 4 * levels
        if len(data) < table_end:
            raise MalformedPayloadError("level table truncated", len(data) * 8)
        table = np.frombuffer(data[HEADER_BYTES:table_end], dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(table)) or np.any(table < 0):
            raise MalformedPayloadError("level table holds invalid magnitudes", HEADER_BITS)

        spec = QuantizerSpec(kind=kind, levels=levels)
        body_bits = _body_bits(d, k_global, k_local, block_size, spec)
        body = data[table_end:]
        if len(body) != -(-body_bits // 8):
            raise MalformedPayloadError(
                f"body has {len(body)} bytes, header implies {-(-body_bits // 8)}", table_end * 8
            )
        return cls(d, round_, k_global, k_local, block_size, kind, levels, table, bytes(body), body_bits)


def _body_bits(d: int, k_global: int, k_local: int, block_size: int, spec: QuantizerSpec) -> int:
    w = intra_block_width(block_size)
    return (k_global + k_local) * spec.bits_per_value + k_local * (w + 1) + -(-d // block_size)


def payload_bit_length(d: int, k_global: int, k_local: int, block_size: int, spec: QuantizerSpec) -> int:
    """Exact bit size of a payload with these dimensions, before byte padding"""
    return HEADER_BITS + LEVEL_BITS * spec.levels + _body_bits(d, k_global, k_local, block_size, spec)


def encode_payload(
    su: SparseUpdate,
    spec: QuantizerSpec,
    phi_local: float,
    round: int = 0,
    quantized: Optional[QuantizedValues] = None,
) -> EncodedPayload:
    """
    Frame a sparse update for the uplink.

    Args:
        su: Update with its global (value-only) and local (positioned) sections
        spec: Value quantizer
        phi_local: Ratio that sets the local block size ceil(1/phi_local)
        round: Round index recorded in the header
        quantized: Precomputed ``quantize_values(su.wire_values(), spec)``

    Returns:
        EncodedPayload
    """
    d = su.layout.d
    if d > _U32_MAX or not 0 <= round <= _U32_MAX:
        raise ContractViolationError("d and round must fit in 32 bits")
    block_size = block_size_for(phi_local, d)
    qv = quantized if quantized is not None else quantize_values(su.wire_values(), spec)
    q = spec.bits_per_value

    positions = encode_positions(su.local_positions, d, block_size)
    bits = np.concatenate([
        _uint_bits(qv.codes[: su.k_global], q),
        positions.bits,
        _uint_bits(qv.codes[su.k_global:], q),
    ])
    return EncodedPayload(
        d=d,
        round=round,
        k_global=su.k_global,
        k_local=su.k_local,
        block_size=block_size,
        quantizer=spec.kind,
        levels=spec.levels,
        level_table=qv.levels,
        body=np.packbits(bits).tobytes(),
        body_bits=int(bits.size),
    )


def decode_payload(payload: Union[EncodedPayload, bytes], m_global: Mask) -> SparseUpdate:
    """
    Recover a SparseUpdate from its payload and the receiver's global mask.

    Raises:
        MalformedPayloadError: If the header disagrees with ``m_global`` or the body
            is malformed
    """
    p = EncodedPayload.from_bytes(payload) if isinstance(payload, (bytes, bytearray)) else payload
    if m_global.layout.d != p.d:
        raise MalformedPayloadError(f"payload is for d={p.d}, receiver has d={m_global.layout.d}", 0)
    if m_global.popcount != p.k_global:
        raise MalformedPayloadError(
            f"header K_global={p.k_global} but receiver mask has {m_global.popcount}", 8 * 8
        )

    spec = p.spec
    q = spec.bits_per_value
    base = HEADER_BITS + LEVEL_BITS * p.level_table.size
    bits = np.unpackbits(np.frombuffer(p.body, dtype=np.uint8))
    if bits.size < p.body_bits:
        raise MalformedPayloadError("body truncated", base + bits.size)
    if np.any(bits[p.body_bits:]):
        raise MalformedPayloadError("nonzero padding", base + p.body_bits)

    global_codes = _read_uints(bits, 0, p.k_global, q)
    pos_start = p.k_global * q
    pos_limit = pos_start + p.k_local * (intra_block_width(p.block_size) + 1) + -(-p.d // p.block_size)
    positions, pos_end = _scan_positions(bits, pos_start, pos_limit, p.d, p.block_size, base)
    if len(positions) != p.k_local or pos_end != pos_limit:
        raise MalformedPayloadError(
            f"position stream holds {len(positions)} positions, header says {p.k_local}", base + pos_end
        )
    local_codes = _read_uints(bits, pos_limit, p.k_local, q)

    global_values = _dequantize_codes(global_codes, p.level_table, spec, base)
    local_values = _dequantize_codes(local_codes, p.level_table, spec, base + pos_limit)
    local_positions = np.asarray(positions, dtype=np.int64)
    if np.intersect1d(local_positions, m_global.indices).size:
        raise MalformedPayloadError("local position overlaps the global mask", base + pos_start)
    return SparseUpdate(m_global.layout, m_global.indices, global_values, local_positions, local_values)


# Bit budget

def bit_budget(
    scheme: str,
    q: int,
    phi_global: float,
    phi_local: float = 0.0,
    local_steps: int = 1,
    d: Optional[int] = None,
    position_coding: PositionCoding = "block",
) -> float:
    """
    Analytic uplink bits per parameter per local iteration.

    Args:
        scheme: ``tcs``, ``topk``, ``randk`` or ``dense``
        q: Bits per transmitted value
        phi_global: Global (or top-K / rand-K) sparsification ratio
        phi_local: Local ratio (tcs only)
        local_steps: H; the budget is divided by it
        d: Model dimension, needed for the ``log2d`` position coding
        position_coding: ``block`` (log2(1/phi) + 2 bits per position) or ``log2d``

    Raises:
        ContractViolationError: On out-of-range parameters
    """
    if local_steps < 1 or q < 1:
        raise ContractViolationError("local_steps and q must be positive")
    if position_coding == "log2d" and (d is None or d < 1):
        raise ContractViolationError("the log2d variant needs the model dimension d")

    def position_bits(phi: float) -> float:
        if phi <= 0:
            return 0.0
        return math.log2(d) if position_coding == "log2d" else math.log2(1.0 / phi) + 2.0

    if scheme == "dense":
        return q / local_steps
    if not 0.0 < phi_global <= 1.0:
        raise ContractViolationError("phi_global must be in (0, 1]")
    if scheme == "tcs":
        if not 0.0 <= phi_local < 1.0:
            raise ContractViolationError("phi_local must be in [0, 1)")
        bits = q * (phi_local + phi_global) + position_bits(phi_local) * phi_local
    elif scheme == "topk":
        bits = phi_global * (q + position_bits(phi_global))
    elif scheme == "randk":
        bits = phi_global * q
    else:
        raise ContractViolationError(f"unknown scheme {scheme!r}")
    return bits / local_steps


def measured_bit_budget(
    scheme: str,
    spec: QuantizerSpec,
    phi_global: float,
    phi_local: float,
    local_steps: int,
    d: int,
    seed: int = 0,
) -> float:
    """Bits of an actually encoded random payload, per parameter per local iteration"""
    if scheme == "dense":
        return spec.bits_per_value / local_steps
    layout = LayerLayout.single(d)
    rng = substream(seed, "budget", 0, 0).generator()
    k_global = max(1, ratio_to_count(phi_global, d))
    order = rng.permutation(d)

    def section(count: int, start: int) -> Tuple[IndexArray, FloatArray]:
        idx = np.sort(order[start:start + count]).astype(np.int64)
        return idx, rng.standard_normal(count) + np.sign(rng.standard_normal(count)) * 0.1

    if scheme == "tcs":
        k_local = ratio_to_count(phi_local, d)
        g, gv = section(k_global, 0)
        loc, lv = section(k_local, k_global)
        su = SparseUpdate(layout, g, gv, loc, lv)
        block_phi = phi_local
    elif scheme == "topk":
        loc, lv = section(k_global, 0)
        su = SparseUpdate(layout, np.empty(0, dtype=np.int64), np.empty(0), loc, lv)
        block_phi = phi_global
    elif scheme == "randk":
        g, gv = section(k_global, 0)
        su = SparseUpdate(layout, g, gv, np.empty(0, dtype=np.int64), np.empty(0))
        block_phi = 0.0
    else:
        raise ContractViolationError(f"no payload for scheme {scheme!r}")
    payload = encode_payload(su, spec, block_phi)
    return payload.bit_length / (d * local_steps)
