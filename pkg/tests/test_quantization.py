import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distconformal.errors import CorruptPayloadError, InvalidSpecError
from distconformal.quantization import (
    FASTLSU,
    HEADER_SIZE,
    MODEL,
    CommLedger,
    QuantSpec,
    dequantize,
    deserialize,
    feature_bits,
    payload_size,
    quantize_model,
    quantize_values,
    serialize,
)
from distconformal.scoring import ForestConfig, build_pu_dataset, stump, train_score_model

from _models import random_forest

SINGLE = dict(threshold_bits=None)  # one grid over every parameter


def nearest_code_oracle(values, bits):
    """Enumerate every level; nearest wins, lowest code on ties."""
    lo, hi = min(values), max(values)
    step = (hi - lo) / (2**bits - 1) if hi > lo else 1.0
    levels = [lo + i * step for i in range(2**bits)]
    out = []
    for v in values:
        dists = [abs(v - L) for L in levels]
        out.append(dists.index(min(dists)))
    return out, step


@pytest.fixture(scope="module")
def trained():
    rng = np.random.default_rng(0)
    pu = build_pu_dataset(rng.standard_normal((400, 10)), rng.standard_normal((100, 10)) + 0.5, 0.5, seed=0)
    return train_score_model(pu, ForestConfig(n_trees=50, max_depth=4), seed=0)


# -- quantizer ----------------------------------------------------------------


def test_one_bit_example():
    codes, off, step = quantize_values([-1.0, 3.0, 0.5], 1)
    assert list(codes) == [0, 1, 0] and off == -1.0 and step == 4.0


def test_two_bit_example():
    codes, off, step = quantize_values([-1.0, 3.0, 0.5], 2)
    assert list(codes) == [0, 3, 1]
    assert step == pytest.approx(4 / 3)
    assert off + codes[2] * step == pytest.approx(1 / 3)


def test_constant_parameters_round_trip_exactly():
    for b in (1, 2, 4, 6):
        codes, off, step = quantize_values([0.7, 0.7, 0.7], b)
        assert list(codes) == [0, 0, 0] and step == 1.0
        assert off + codes[0] * step == 0.7


def test_ties_go_to_the_lower_code():
    codes, _, _ = quantize_values([0.0, 1.0, 0.5], 1)
    assert codes[2] == 0


@given(
    st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=50),
    st.sampled_from([1, 2, 3, 4, 6]),
)
def test_codes_match_enumeration_oracle(values, bits):
    codes, _, step = quantize_values(values, bits)
    want, want_step = nearest_code_oracle(values, bits)
    assert step == want_step
    assert list(codes) == want


def test_round_trip_error_within_half_step_on_random_vectors():
    rng = np.random.default_rng(7)
    violations = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 40))
        scale = 10.0 ** rng.uniform(-3, 3)
        v = rng.normal(rng.normal() * scale, scale, n)
        for b in (1, 2, 4, 6):
            codes, off, step = quantize_values(v, b)
            dec = off + codes.astype(np.float64) * step
            violations += int(np.count_nonzero(np.abs(dec - v) > step / 2))
    assert violations == 0


def test_model_quantization_error_bound(trained):
    for b in (1, 2, 4, 6):
        for spec in (QuantSpec(b), QuantSpec(b, **SINGLE)):
            qm = quantize_model(trained, spec)
            err = np.abs(qm.decoded_params() - trained.params)
            leaf = trained.is_leaf
            assert np.all(err[leaf] <= qm.leaf_step / 2)
            assert np.all(err[~leaf] <= qm.thr_step / 2)


def test_stump_six_bits_threshold_error():
    s = stump(1.3, -1.0, 3.0)
    qm = quantize_model(s, QuantSpec(6, **SINGLE))
    assert abs(qm.decoded_params()[0] - 1.3) <= (4 / 63) / 2


def test_dequantized_two_bit_example_within_step_half():
    s = stump(0.5, -1.0, 3.0)
    qm = quantize_model(s, QuantSpec(2, **SINGLE))
    dec = qm.decoded_params()
    assert dec[0] == pytest.approx(1 / 3)
    assert np.all(np.abs(dec - s.params) <= 2 / 3)


def test_unquantized_surrogate_is_identical(trained):
    sur = dequantize(deserialize(serialize(quantize_model(trained, QuantSpec(None)))))
    pts = np.random.default_rng(1).standard_normal((200, 10))
    np.testing.assert_array_equal(sur.score(pts), trained.score(pts))
    assert sur.same_params(trained)


def test_structure_survives_quantization(trained):
    ref = dequantize(quantize_model(trained, QuantSpec(None)))
    for b in (1, 2, 4, 6):
        sur = dequantize(deserialize(serialize(quantize_model(trained, QuantSpec(b)))))
        np.testing.assert_array_equal(sur.feature, ref.feature)
        np.testing.assert_array_equal(sur.right, ref.right)
        np.testing.assert_array_equal(sur.tree_offsets, ref.tree_offsets)


def test_quantization_is_deterministic(trained):
    assert serialize(quantize_model(trained, QuantSpec(2))) == serialize(quantize_model(trained, QuantSpec(2)))


def test_quant_spec_parsing():
    assert QuantSpec.parse("none").bits is None
    assert QuantSpec.parse(" 4 ").bits == 4
    for bad in ("0", "x", "-1", "33"):
        with pytest.raises(InvalidSpecError):
            QuantSpec.parse(bad)
    with pytest.raises(InvalidSpecError):
        QuantSpec(0)
    assert QuantSpec(1).label == "1" and QuantSpec().label == "none"


# -- wire format --------------------------------------------------------------


def test_wire_round_trip_on_random_models():
    rng = np.random.default_rng(3)
    for i in range(1000):
        model = random_forest(rng)
        b = [None, 1, 2, 4, 6, 8][i % 6]
        spec = QuantSpec(b, threshold_bits=[None, 8, 3][i % 3])
        qm = quantize_model(model, spec)
        blob = serialize(qm)
        back = deserialize(blob)
        assert back == qm
        assert serialize(back) == blob
        assert payload_size(qm) == len(blob)


def test_serialized_length_layout():
    rng = np.random.default_rng(4)
    for _ in range(50):
        model = random_forest(rng)
        P = model.n_nodes
        n_int = int((~model.is_leaf).sum())
        structure = math.ceil((P + n_int * feature_bits(model.dim)) / 8)
        for b in (1, 2, 4, 6):
            qm = quantize_model(model, QuantSpec(b, **SINGLE))
            assert len(serialize(qm)) == HEADER_SIZE + structure + math.ceil(P * b / 8)
        assert len(serialize(quantize_model(model, QuantSpec(None)))) == HEADER_SIZE + structure + 8 * P


def test_payload_is_monotone_in_bits(trained):
    sizes = [payload_size(quantize_model(trained, QuantSpec(b))) for b in (1, 2, 4, 6)]
    sizes.append(payload_size(trained))
    assert all(a < b for a, b in zip(sizes, sizes[1:]))
    assert sizes[0] <= 0.15 * sizes[-1]


def test_payload_size_of_nothing():
    assert payload_size(None) == 0


def _blob():
    return serialize(quantize_model(random_forest(np.random.default_rng(9), dim=7, n_trees=3), QuantSpec(4)))


@pytest.mark.parametrize(
    "mutate,where",
    [
        (lambda b: b"XXXX" + b[4:], 0),
        (lambda b: b[:4] + bytes([9]) + b[5:], 4),
        (lambda b: b[:-1], None),
        (lambda b: b + b"\0", None),
        (lambda b: b[:10], None),
    ],
)
def test_corruptions_are_reported_with_position(mutate, where):
    with pytest.raises(CorruptPayloadError) as ei:
        deserialize(mutate(_blob()))
    assert "at byte" in str(ei.value)
    if where is not None:
        assert ei.value.position == where


def test_non_finite_raw_values_rejected():
    blob = bytearray(serialize(quantize_model(stump(0.0, 0.2, 0.8), QuantSpec(None))))
    blob[-8:] = struct.pack("<d", float("nan"))
    with pytest.raises(CorruptPayloadError):
        deserialize(bytes(blob))


@settings(max_examples=300)
@given(st.binary(max_size=200))
def test_arbitrary_bytes_never_crash(data):
    try:
        deserialize(data)
    except CorruptPayloadError:
        pass


@settings(max_examples=300)
@given(st.data())
def test_mutated_payloads_fail_cleanly_or_stay_local(data):
    blob = _blob()
    ref = deserialize(blob)
    pos = data.draw(st.integers(0, len(blob) - 1))
    val = data.draw(st.integers(0, 255))
    bad = bytearray(blob)
    bad[pos] = val
    try:
        got = deserialize(bytes(bad))
    except CorruptPayloadError:
        return
    payload_start = len(blob) - math.ceil(int(np.where(ref.is_leaf, 4, 8).sum()) / 8)
    if pos >= payload_start:
        # a payload byte only touches codes; structure is untouched
        assert np.array_equal(got.is_leaf, ref.is_leaf)
        assert np.array_equal(got.features, ref.features)


# -- ledger -------------------------------------------------------------------


def test_ledger_totals_are_sums_of_kinds():
    led = CommLedger()
    led.record_bytes(0, 1, MODEL, 100)
    led.record_bytes(1, 0, MODEL, 50)
    led.record(1, 0, FASTLSU, 9)
    led.record(0, 1, FASTLSU, 10)
    assert led.total_bits() == led.total_bits(MODEL) + led.total_bits(FASTLSU) == 1219
    assert led.kb(MODEL) == 0.15
    assert led.sent_bits(1) == 409 and led.received_bits(1) == 810
    per = led.by_agent()
    assert per[0][MODEL]["sent"] == 100 and per[0][MODEL]["received"] == 50
    with pytest.raises(ValueError):
        led.record(0, 1, MODEL, -1)
