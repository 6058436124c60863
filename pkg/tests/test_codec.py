import math

import numpy as np
import pytest

from tcs_fedsim.codec import (
    HEADER_BITS,
    EncodedPayload,
    PositionBitstream,
    bit_budget,
    block_size_for,
    decode_payload,
    decode_positions,
    encode_payload,
    encode_positions,
    fractional_quantize,
    measured_bit_budget,
    payload_bit_length,
    quantize_values,
    scaled_sign_quantize,
)
from tcs_fedsim.compressors import SparseUpdate
from tcs_fedsim.config import QuantizerSpec
from tcs_fedsim.exceptions import ContractViolationError, MalformedPayloadError
from tcs_fedsim.tensor import LayerLayout, Mask

pytestmark = pytest.mark.unit

EXAMPLE_ONE_INDEXED = [1, 3, 10]
EXAMPLE_POSITIONS = [p - 1 for p in EXAMPLE_ONE_INDEXED]
EXAMPLE_BITS = "1" "00" "1" "10" "0" "0" "1" "01" "0"


def example_update() -> SparseUpdate:
    layout = LayerLayout.single(12)
    return SparseUpdate(layout, [], [], EXAMPLE_POSITIONS, [1.0, -2.0, 0.5])


def random_positions(rng, d, phi):
    k = max(1, int(round(phi * d)))
    return np.sort(rng.choice(d, size=min(k, d), replace=False))


# Position bitstream

def test_worked_example_encodes_to_twelve_bits(golden):
    stream = encode_positions(EXAMPLE_POSITIONS, 12, 4)
    assert stream.to_bitstring() == EXAMPLE_BITS
    assert stream.bit_length == 12
    assert stream.to_bytes() == golden("positions_example.hex")


def test_worked_example_decodes():
    stream = PositionBitstream.from_bitstring("100110001010", 12, 4)
    assert [p + 1 for p in decode_positions(stream).tolist()] == EXAMPLE_ONE_INDEXED


def test_empty_positions():
    stream = encode_positions([], 8, 4)
    assert stream.to_bitstring() == "00"
    assert decode_positions(stream).tolist() == []


def test_encode_rejects_bad_positions():
    with pytest.raises(ContractViolationError):
        encode_positions([3, 1], 12, 4)
    with pytest.raises(ContractViolationError):
        encode_positions([12], 12, 4)
    with pytest.raises(ContractViolationError):
        encode_positions([0], 12, 0)


def test_round_trip_fixed_geometry(rng):
    for _ in range(1000):
        positions = random_positions(rng, 4096, rng.uniform(0.001, 0.05))
        stream = encode_positions(positions, 4096, 64)
        assert np.array_equal(decode_positions(stream), positions)


def test_bit_length_formula_with_partial_final_block():
    stream = encode_positions([0, 5, 9, 10], 11, 3)
    w = 2
    assert stream.num_blocks == 4
    assert stream.bit_length == 4 * (w + 1) + 4
    assert decode_positions(stream).tolist() == [0, 5, 9, 10]


@pytest.mark.slow
def test_round_trip_random_geometry_sweep(rng):
    for _ in range(10_000):
        d = int(rng.integers(1, 2 ** 16 + 1))
        phi = float(rng.uniform(1e-3, 0.25))
        bs = block_size_for(phi, d)
        positions = random_positions(rng, d, phi)
        stream = encode_positions(positions, d, bs)
        w = (bs - 1).bit_length()
        assert stream.bit_length == positions.size * (w + 1) + -(-d // bs)
        assert np.array_equal(decode_positions(stream), positions)


def test_fuzzed_streams_never_escape_range(rng):
    for _ in range(500):
        d = int(rng.integers(5, 300))
        bs = int(rng.integers(1, 20))
        positions = random_positions(rng, d, 0.1)
        bits = encode_positions(positions, d, bs).bits.copy()
        flips = rng.integers(0, bits.size, size=int(rng.integers(1, 4)))
        bits[flips] ^= 1
        if rng.random() < 0.3:
            bits = bits[: int(rng.integers(0, bits.size))]
        try:
            decoded = decode_positions(PositionBitstream(bits, d, bs))
        except MalformedPayloadError as e:
            assert e.bit_offset is not None and 0 <= e.bit_offset <= bits.size
            continue
        assert np.all(decoded < d) and np.all(decoded >= 0)
        assert np.all(np.diff(decoded) > 0)


@pytest.mark.parametrize(
    "bits,d,bs,reason",
    [
        ("1001", 12, 4, "truncated"),
        ("10", 12, 4, "truncated"),
        ("000" + "0", 12, 4, "trailing"),
        ("0" "0" "111" "0", 10, 4, "beyond d"),
        ("110" "100" "0" "0" "0", 12, 4, "not increasing"),
    ],
)
def test_malformed_position_streams(bits, d, bs, reason):
    with pytest.raises(MalformedPayloadError, match="malformed payload at bit offset"):
        decode_positions(PositionBitstream.from_bitstring(bits, d, bs))


def test_block_size_for():
    assert block_size_for(0.25, 12) == 4
    assert block_size_for(0.001, 100_000) == 1000
    assert block_size_for(0.3, 100) == 4
    assert block_size_for(0.0, 50) == 50
    assert block_size_for(0.001, 10) == 10


# Quantizers

def test_scaled_sign_examples(rng):
    assert scaled_sign_quantize([1, -1, 1]).tolist() == [1, -1, 1]
    assert scaled_sign_quantize([4, -2]).tolist() == [3, -3]
    assert scaled_sign_quantize([0, -2]).tolist() == [1, -1]
    u = rng.standard_normal(1000)
    np.testing.assert_allclose(scaled_sign_quantize(u), np.abs(u).sum() / 1000 * np.where(u < 0, -1, 1))


def test_fractional_worked_example():
    fq = fractional_quantize([8, 4, 2, 1], 2)
    assert fq.sigma == pytest.approx(math.sqrt(1 / 8))
    assert fq.levels.tolist() == [6.0, 1.5]
    assert fq.indices.tolist() == [0, 0, 1, 1]
    assert fq.dequantize().tolist() == [6.0, 6.0, 1.5, 1.5]


def test_fractional_signs_and_degenerate_block():
    fq = fractional_quantize([-3.0, 3.0, -3.0], 4)
    assert fq.dequantize().tolist() == [-3.0, 3.0, -3.0]
    assert fq.gamma == 0.0


def test_fractional_rejects_zero_values():
    with pytest.raises(ContractViolationError):
        fractional_quantize([1.0, 0.0], 2)
    with pytest.raises(ContractViolationError):
        fractional_quantize([1.0], 0)


def test_fractional_boundary_value_goes_to_smaller_interval():
    # sigma = 0.5, the single boundary is exactly 2.0
    fq = fractional_quantize([4.0, 2.0, 1.0], 2)
    assert fq.indices.tolist() == [0, 1, 1]


def test_fractional_empty_interval_gets_geometric_midpoint():
    fq = fractional_quantize([16.0, 1.0], 4)
    assert fq.levels[0] == 16.0 and fq.levels[3] == 1.0
    assert fq.levels[1] == pytest.approx(16.0 * 0.5 ** 1.5)
    assert fq.levels[2] == pytest.approx(16.0 * 0.5 ** 2.5)


@pytest.mark.parametrize("levels", [1, 2, 4, 16])
def test_fractional_error_bound(rng, levels):
    for _ in range(10):
        u = rng.standard_normal(10_000) * np.exp(rng.uniform(-3, 3, 10_000))
        u[u == 0] = 1.0
        fq = fractional_quantize(u, levels)
        err = np.abs(fq.dequantize() - u)
        assert np.all(err <= fq.gamma * np.abs(u) * (1 + 1e-9) + 1e-300)


def test_fractional_single_level_equals_scaled_sign(rng):
    for _ in range(20):
        u = rng.standard_normal(257)
        u[u == 0] = 0.5
        assert np.array_equal(fractional_quantize(u, 1).dequantize(), scaled_sign_quantize(u))


def test_quantize_values_codes():
    qv = quantize_values(np.array([1.0, -2.0, 0.5]), QuantizerSpec("fractional", 2))
    assert qv.levels.tolist() == [2.0, 0.75]
    assert qv.codes.tolist() == [0b01, 0b10, 0b01]
    assert qv.dequantized.tolist() == [0.75, -2.0, 0.75]


def test_quantize_values_handles_zeros():
    qv = quantize_values(np.array([0.0, 4.0, -1.0]), QuantizerSpec("fractional", 2))
    assert qv.dequantized[0] == qv.levels[1]
    allzero = quantize_values(np.zeros(3), QuantizerSpec("fractional", 4))
    assert not allzero.levels.any() and not allzero.dequantized.any()


# Payloads

def test_golden_payload_quantizer_none(golden):
    payload = encode_payload(example_update(), QuantizerSpec("none"), 0.25)
    raw = payload.to_bytes()
    assert raw == golden("payload_none.hex")
    assert len(raw) == 37
    assert payload.bit_length == HEADER_BITS + 108


def test_golden_payload_fractional(golden):
    payload = encode_payload(example_update(), QuantizerSpec("fractional", 2), 0.25)
    assert payload.to_bytes() == golden("payload_fractional_p2.hex")
    assert payload.bit_length == HEADER_BITS + 64 + 18
    decoded = decode_payload(payload.to_bytes(), Mask.empty(LayerLayout.single(12)))
    assert decoded.local_positions.tolist() == EXAMPLE_POSITIONS
    assert decoded.local_values.tolist() == [0.75, -2.0, 0.75]


def test_global_only_payload_is_raw_floats_in_mask_order():
    layout = LayerLayout.single(10)
    mask = Mask([1, 4, 7], layout)
    values = np.array([0.25, -3.0, 1e-3], dtype=np.float32).astype(np.float64)
    su = SparseUpdate(layout, mask.indices, values, [], [])
    payload = encode_payload(su, QuantizerSpec("none"), 0.0)
    body = np.frombuffer(payload.body[:12], dtype=">f4")
    assert body.tolist() == values.tolist()
    decoded = decode_payload(payload, mask)
    assert np.array_equal(decoded.global_values, values)
    assert decoded.k_local == 0


@pytest.mark.parametrize("spec", [QuantizerSpec("none"), QuantizerSpec("scaled_sign"), QuantizerSpec("fractional", 16)])
def test_payload_round_trip(rng, spec):
    for _ in range(100):
        d = int(rng.integers(20, 3000))
        layout = LayerLayout.single(d)
        k_global = int(rng.integers(1, d // 10 + 2))
        order = rng.permutation(d)
        gm = Mask(np.sort(order[:k_global]), layout)
        k_local = int(rng.integers(0, d // 20 + 1))
        local = np.sort(order[k_global:k_global + k_local])
        values = rng.standard_normal(k_global + k_local) + 0.01
        su = SparseUpdate(layout, gm.indices, values[:k_global], local, values[k_global:])
        phi_local = max(k_local / d, 1e-3)
        payload = encode_payload(su, spec, phi_local, round=int(rng.integers(0, 1000)))
        raw = payload.to_bytes()
        assert len(raw) * 8 - payload.bit_length < 8
        assert payload.bit_length == payload_bit_length(d, k_global, k_local, payload.block_size, spec)
        decoded = decode_payload(raw, gm)
        assert decoded.global_positions.tolist() == gm.indices.tolist()
        assert decoded.local_positions.tolist() == local.tolist()
        expected = quantize_values(su.wire_values(), spec).dequantized
        assert np.array_equal(decoded.wire_values(), expected)
        if spec.kind == "fractional":
            fq = fractional_quantize(su.wire_values(), spec.levels)
            err = np.abs(decoded.wire_values() - su.wire_values())
            assert np.all(err <= (fq.gamma + 1e-6) * np.abs(su.wire_values()))


def test_decode_rejects_mask_mismatch():
    payload = encode_payload(example_update(), QuantizerSpec("none"), 0.25)
    with pytest.raises(MalformedPayloadError):
        decode_payload(payload, Mask([0], LayerLayout.single(12)))
    with pytest.raises(MalformedPayloadError):
        decode_payload(payload, Mask.empty(LayerLayout.single(13)))


def test_truncated_payloads_are_malformed(golden):
    raw = golden("payload_none.hex")
    for cut in range(len(raw)):
        with pytest.raises(MalformedPayloadError):
            decode_payload(raw[:cut], Mask.empty(LayerLayout.single(12)))


def test_header_garbage_is_malformed(golden):
    raw = bytearray(golden("payload_none.hex"))
    raw[20] = 9
    with pytest.raises(MalformedPayloadError, match="unknown quantizer"):
        EncodedPayload.from_bytes(bytes(raw))


def test_corrupted_payload_bodies_never_crash(rng, golden):
    raw = golden("payload_fractional_p2.hex")
    mask = Mask.empty(LayerLayout.single(12))
    for _ in range(300):
        corrupt = bytearray(raw)
        pos = int(rng.integers(23, len(raw)))
        corrupt[pos] ^= 1 << int(rng.integers(0, 8))
        try:
            su = decode_payload(bytes(corrupt), mask)
        except MalformedPayloadError:
            continue
        assert np.all(su.local_positions < 12)


# Bit budget

@pytest.mark.parametrize(
    "args,expected,tol",
    [
        (("tcs", 32, 0.01, 0.001, 1), 0.363, 0.002),
        (("tcs", 32, 0.01, 0.001, 2), 0.1815, 0.001),
        (("tcs", 32, 0.01, 0.001, 4), 0.0907, 0.0005),
        (("tcs", 5, 0.01, 0.001, 4), 0.01675, 0.0002),
        (("tcs", 5, 0.01, 0.001, 1), 0.067, 0.001),
        (("topk", 32, 0.01, 0.0, 1), 0.41, 0.005),
        (("topk", 5, 0.01, 0.0, 1), 0.14, 0.005),
    ],
)
def test_bit_budget_table(args, expected, tol):
    assert bit_budget(*args) == pytest.approx(expected, abs=tol)


def test_bit_budget_exact_values():
    assert bit_budget("tcs", 32, 0.01, 0.001, 1) == pytest.approx(0.36397, abs=1e-5)
    assert bit_budget("tcs", 5, 0.01, 0.001, 4) == pytest.approx(0.01674, abs=1e-5)
    assert bit_budget("randk", 32, 0.01) == pytest.approx(0.32)


@pytest.mark.parametrize("h", [1, 2, 3, 4, 8])
def test_bit_budget_divides_by_local_steps(h):
    base = bit_budget("tcs", 32, 0.01, 0.001, 1)
    assert bit_budget("tcs", 32, 0.01, 0.001, h) == pytest.approx(base / h, rel=1e-15)


def test_bit_budget_log2d_variant():
    d = 11_173_962
    assert bit_budget("topk", 32, 0.01, d=d, position_coding="log2d") == pytest.approx(
        0.01 * (32 + math.log2(d))
    )
    with pytest.raises(ContractViolationError):
        bit_budget("topk", 32, 0.01, position_coding="log2d")


@pytest.mark.parametrize("scheme,q", [("tcs", 32), ("topk", 32), ("tcs", 5), ("randk", 32)])
def test_measured_budget_approaches_analytic(scheme, q):
    spec = QuantizerSpec("none") if q == 32 else QuantizerSpec("fractional", 16)
    analytic = bit_budget(scheme, q, 1 / 64, 1 / 1024 if scheme == "tcs" else 0.0, 1)
    measured = measured_bit_budget(scheme, spec, 1 / 64, 1 / 1024, 1, 2 ** 20)
    assert measured == pytest.approx(analytic, rel=0.05)
