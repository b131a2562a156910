import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bnnkit.bitpack import PackedBits, binarize_bit, pack_naive, pack_signbits, unpack

NEG_NAN = np.uint32(0xFFC00000).view(np.float32)
POS_NAN = np.uint32(0x7FC00000).view(np.float32)

bit_patterns = st.lists(st.integers(0, 2**32 - 1), max_size=300)


def as_floats(patterns) -> np.ndarray:
    return np.asarray(patterns, dtype=np.uint32).view(np.float32)


def expected_bytes(values) -> bytes:
    """Sign-bit packing recomputed through an unrelated byte-level path."""
    arr = np.ascontiguousarray(values, dtype=np.float32).reshape(-1)
    bits = (arr.view(np.uint32) >> np.uint32(31)).astype(np.uint8)
    out = np.zeros(((arr.size + 63) // 64) * 8, np.uint8)
    out[: (arr.size + 7) // 8] = np.packbits(bits, bitorder="little")
    return out.tobytes()


class TestBinarizeBit:
    def test_negative(self):
        assert binarize_bit(-1.5) == 1

    def test_signed_zeros(self):
        assert binarize_bit(0.0) == 0
        assert binarize_bit(-0.0) == 1

    def test_positive(self):
        assert binarize_bit(3.0) == 0

    def test_nan_follows_sign_bit(self):
        assert binarize_bit(NEG_NAN) == 1
        assert binarize_bit(POS_NAN) == 0


class TestPackNaive:
    def test_low_byte_pattern(self):
        p = pack_naive([-1.5, 0.25, -0.0, 3.0, -2.0, 0.0, -7.0, 1.0])
        assert p.logical_len == 8
        assert int(p.words[0]) == 0x55

    def test_empty(self):
        p = pack_naive([])
        assert p.logical_len == 0
        assert p.words.shape == (0,)

    def test_all_negative_word(self):
        p = pack_naive([-1.0] * 64)
        assert p.words.shape == (1,)
        assert int(p.words[0]) == 0xFFFF_FFFF_FFFF_FFFF

    def test_signed_nan_sets_bit(self):
        p = pack_naive([NEG_NAN, POS_NAN])
        assert int(p.words[0]) == 0b01

    def test_matches_byte_oracle(self, rng):
        for n in (0, 1, 7, 8, 63, 64, 65, 200):
            values = rng.standard_normal(n).astype(np.float32)
            assert pack_naive(values).to_bytes() == expected_bytes(values)


class TestPackSignbits:
    def test_matches_naive_on_128_random(self, rng):
        values = rng.standard_normal(128).astype(np.float32)
        assert pack_signbits(values) == pack_naive(values)

    def test_special_values(self):
        values = np.array(
            [
                -0.0, 0.0, np.inf, -np.inf, POS_NAN, NEG_NAN,
                np.float32(1e-45), np.float32(-1e-45),
                np.finfo(np.float32).max, np.finfo(np.float32).min,
            ],
            dtype=np.float32,
        )
        assert pack_signbits(values) == pack_naive(values)
        assert pack_signbits(values).to_bytes() == expected_bytes(values)

    @given(bit_patterns)
    def test_matches_naive_everywhere(self, patterns):
        values = as_floats(patterns)
        assert pack_signbits(values) == pack_naive(values)

    @given(st.integers(0, 200))
    def test_trailing_word_bits_are_zero(self, n):
        p = pack_signbits(np.full(n, -1.0, np.float32))
        rem = n % 64
        if n and rem:
            assert int(p.words[-1]) >> rem == 0


class TestUnpack:
    def test_two_bits(self):
        assert unpack(PackedBits(np.array([0x01], np.uint64), 2)).tolist() == [-1, 1]

    def test_empty(self):
        assert unpack(PackedBits(np.zeros(0, np.uint64), 0)).tolist() == []

    @given(bit_patterns)
    def test_round_trip(self, patterns):
        values = as_floats(patterns)
        signs = (values.view(np.uint32) >> np.uint32(31)).astype(np.int8)
        expected = (1 - 2 * signs).tolist()
        assert unpack(pack_signbits(values)).tolist() == expected


class TestPackedBits:
    def test_word_count_must_match(self):
        with pytest.raises(ValueError):
            PackedBits(np.zeros(2, np.uint64), 64)
        with pytest.raises(ValueError):
            PackedBits(np.zeros(0, np.uint64), 1)

    def test_negative_length_rejected(self):
        with pytest.raises(ValueError):
            PackedBits(np.zeros(0, np.uint64), -1)

    def test_equality_includes_length(self):
        a = PackedBits(np.array([0], np.uint64), 3)
        b = PackedBits(np.array([0], np.uint64), 4)
        assert a != b
        assert a == PackedBits(np.array([0], np.uint64), 3)

    def test_to_bytes_little_endian(self):
        p = PackedBits(np.array([0x0102030405060708], np.uint64), 64)
        assert p.to_bytes() == bytes([8, 7, 6, 5, 4, 3, 2, 1])
