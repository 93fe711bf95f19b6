import numpy as np
import pytest

from onebit_fl.errors import ConfigError, NumericError, PayloadError
from onebit_fl.sketch import (ConsensusVector, OneBitSketch, adjoint, adjoint_padded,
                              create_operator, decode_sketch_message,
                              deserialize_sketch, encode_sketch_message, forward,
                              forward_padded, fwht_in_place, next_power_of_two,
                              quantize, serialize_sketch)

from oracles import dense_projection, dense_hadamard


class TestCreateOperator:
    def test_padding_examples(self):
        assert create_operator(7, 3, 2).n_pad == 4
        assert create_operator(7, 1024, 103).n_pad == 1024

    def test_scale_example(self):
        op = create_operator(7, 6, 2)
        assert op.scale == 2.0

    def test_scale_squared_times_m_is_n_pad(self):
        for n, m in [(3, 2), (100, 7), (1024, 103), (6, 8)]:
            op = create_operator(1, n, m)
            assert op.scale**2 * op.m == pytest.approx(op.n_pad, rel=1e-12)

    def test_invalid_configurations(self):
        with pytest.raises(ConfigError):
            create_operator(7, 3, 5)  # m > n_pad = 4
        with pytest.raises(ConfigError):
            create_operator(7, 0, 1)
        with pytest.raises(ConfigError):
            create_operator(7, 8, 0)

    def test_deterministic_reconstruction(self):
        a = create_operator(123, 37, 9)
        b = create_operator(123, 37, 9)
        np.testing.assert_array_equal(a.sign_flips, b.sign_flips)
        np.testing.assert_array_equal(a.sample_indices, b.sample_indices)
        w = np.random.default_rng(0).standard_normal(37)
        np.testing.assert_array_equal(forward(a, w), forward(b, w))

    def test_index_and_flip_structure(self):
        op = create_operator(5, 200, 40)
        assert np.isin(op.sign_flips, (-1.0, 1.0)).all()
        assert len(set(op.sample_indices.tolist())) == op.m
        assert (np.diff(op.sample_indices) > 0).all()
        assert op.sample_indices.min() >= 0 and op.sample_indices.max() < op.n_pad

    def test_next_power_of_two(self):
        assert [next_power_of_two(n) for n in (1, 2, 3, 5, 16, 17)] == [1, 2, 4, 8, 16, 32]


class TestFwht:
    def test_impulse(self):
        out = fwht_in_place(np.array([1.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out, [0.5, 0.5, 0.5, 0.5])

    def test_involution(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(64)
        np.testing.assert_allclose(fwht_in_place(fwht_in_place(x.copy())), x, atol=1e-12)

    def test_matches_dense_sylvester(self):
        rng = np.random.default_rng(6)
        H = dense_hadamard(16)
        for _ in range(10):
            x = rng.standard_normal(16)
            np.testing.assert_allclose(fwht_in_place(x.copy()), H @ x, atol=1e-12)

    def test_rejects_bad_lengths(self):
        with pytest.raises(ValueError):
            fwht_in_place(np.zeros(3))
        with pytest.raises(ValueError):
            fwht_in_place(np.zeros(0))


class TestForwardAdjoint:
    def test_zero_maps_to_zero(self):
        op = create_operator(2, 10, 4)
        np.testing.assert_array_equal(forward(op, np.zeros(10)), np.zeros(4))
        np.testing.assert_array_equal(adjoint(op, np.zeros(4)), np.zeros(10))

    def test_linearity(self):
        op = create_operator(2, 10, 4)
        rng = np.random.default_rng(7)
        w = rng.standard_normal(10)
        np.testing.assert_allclose(forward(op, 3.5 * w), 3.5 * forward(op, w), rtol=1e-12)

    def test_matches_dense_assembly(self):
        rng = np.random.default_rng(8)
        op = create_operator(3, 8, 4)
        Phi = dense_projection(op)
        w = rng.standard_normal(8)
        v = rng.standard_normal(4)
        np.testing.assert_allclose(forward(op, w), Phi @ w, atol=1e-12)
        np.testing.assert_allclose(adjoint(op, v), Phi.T @ v, atol=1e-12)

    def test_adjoint_identity_including_odd_n(self):
        rng = np.random.default_rng(9)
        for n, m in [(3, 2), (37, 9), (64, 16), (100, 13), (257, 40)]:
            op = create_operator(11, n, m)
            for _ in range(20):
                w = rng.standard_normal(n)
                v = rng.standard_normal(m)
                fw = forward(op, w)
                err = abs(fw @ v - w @ adjoint(op, v))
                assert err / (np.linalg.norm(fw) * np.linalg.norm(v)) <= 1e-10

    def test_dimension_mismatch(self):
        op = create_operator(2, 10, 4)
        with pytest.raises(ValueError):
            forward(op, np.zeros(11))
        with pytest.raises(ValueError):
            adjoint(op, np.zeros(5))

    def test_padded_gram_is_scaled_identity(self):
        rng = np.random.default_rng(10)
        op = create_operator(4, 24, 6)
        Phi = dense_projection(op, padded=True)
        gram = Phi @ Phi.T
        np.testing.assert_allclose(gram, (op.n_pad / op.m) * np.eye(op.m), atol=1e-9)
        v = rng.standard_normal(op.m)
        np.testing.assert_allclose(forward_padded(op, adjoint_padded(op, v)),
                                   (op.n_pad / op.m) * v, rtol=1e-10)


class TestQuantize:
    def test_examples(self):
        np.testing.assert_array_equal(quantize([0.5, -2.0]).values(), [1, -1])
        np.testing.assert_array_equal(quantize([0.0]).values(), [1])

    def test_sign_properties(self):
        rng = np.random.default_rng(12)
        z = rng.standard_normal(65)
        values = quantize(z).values()
        assert np.isin(values, (-1, 1)).all()
        np.testing.assert_array_equal(quantize(7.25 * z).values(), values)

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            quantize([1.0, float("nan")])


class TestSketchCodec:
    def test_byte_examples(self):
        assert serialize_sketch(quantize(np.ones(8))) == b"\xff"
        assert serialize_sketch(quantize(np.array([-1.0]))) == b"\x00"

    def test_roundtrip_many(self):
        rng = np.random.default_rng(13)
        for _ in range(1000):
            m = int(rng.integers(1, 70))
            sketch = quantize(rng.standard_normal(m))
            back = deserialize_sketch(serialize_sketch(sketch), m)
            assert back.bits == sketch.bits
            np.testing.assert_array_equal(back.values(), sketch.values())

    def test_reencode_identity(self):
        rng = np.random.default_rng(14)
        sketch = quantize(rng.standard_normal(21))
        assert OneBitSketch.from_values(sketch.values()).bits == sketch.bits

    def test_wrong_byte_count(self):
        with pytest.raises(PayloadError):
            deserialize_sketch(b"\x00\x00", 8)

    def test_payload_bits_counts_data_only(self):
        assert quantize(np.ones(13)).payload_bits == 13

    def test_message_framing(self):
        sketch = quantize(np.array([1.0, -1.0, 1.0]))
        msg = encode_sketch_message(sketch)
        assert msg[:8] == (3).to_bytes(8, "little")
        back = decode_sketch_message(msg)
        np.testing.assert_array_equal(back.values(), sketch.values())
        with pytest.raises(PayloadError):
            decode_sketch_message(msg + b"\x00")
        with pytest.raises(PayloadError):
            decode_sketch_message(msg[:4])


class TestConsensusVector:
    def test_zero_state_is_legal(self):
        v = ConsensusVector.zeros(5)
        assert v.m == 5
        assert (v.entries == 0).all()

    def test_domain_enforced(self):
        with pytest.raises(ValueError):
            ConsensusVector(np.array([0, 2, -1], dtype=np.int8))

    def test_entries_read_only(self):
        v = ConsensusVector(np.array([1, 0, -1], dtype=np.int8))
        with pytest.raises(ValueError):
            v.entries[0] = 0
