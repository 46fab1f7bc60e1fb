import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nestquant.packing import (
    PackedTensor,
    PackError,
    pack,
    pack_slice,
    to_canonical,
    to_interleaved,
    unpack,
)
from nestquant.slicing import slice_to_code


def _scalar_pack(codes, bits):
    """Bit-by-bit reference packer."""
    d_row, d_col = codes.shape
    padded = ((d_col + 31) // 32) * 32
    nu = padded // 32
    base = np.zeros((d_row, nu), dtype=np.uint64)
    b2 = np.zeros((d_row, nu), dtype=np.uint32)
    b3 = np.zeros((d_row, nu), dtype=np.uint32)
    for i in range(d_row):
        for j in range(d_col):
            u, l = divmod(j, 32)
            q = int(codes[i, j])
            base[i, u] |= np.uint64((q & 3) << (2 * l))
            b2[i, u] |= np.uint32(((q >> 2) & 1) << l)
            b3[i, u] |= np.uint32(((q >> 3) & 1) << l)
    return base, b2, b3


class TestPack:
    def test_spec_example_planes(self):
        p = pack(np.array([[5, 10]]), 4)
        assert p.base_plane[0, 0] == 0b1001  # low bits 01, 10
        assert p.plane_b2[0, 0] == 0b01
        assert p.plane_b3[0, 0] == 0b10

    def test_matches_scalar_packer(self, rng):
        codes = rng.integers(0, 16, size=(5, 70))
        p = pack(codes, 4)
        base, b2, b3 = _scalar_pack(codes, 4)
        assert np.array_equal(p.base_plane, base)
        assert np.array_equal(p.plane_b2, b2)
        assert np.array_equal(p.plane_b3, b3)

    def test_all_zero(self):
        p = pack(np.zeros((3, 40), dtype=int), 3)
        assert not p.base_plane.any() and not p.plane_b2.any()
        assert p.plane_b3 is None

    def test_saturated_codes(self):
        for bits in (2, 3, 4):
            p = pack(np.full((2, 32), (1 << bits) - 1, dtype=int), bits)
            assert (p.base_plane == np.uint64(0xFFFFFFFFFFFFFFFF)).all()
            if bits >= 3:
                assert (p.plane_b2 == np.uint32(0xFFFFFFFF)).all()
            if bits == 4:
                assert (p.plane_b3 == np.uint32(0xFFFFFFFF)).all()

    def test_pad_region_zero(self):
        p = pack(np.full((1, 33), 15, dtype=int), 4)
        # weight 33..63 of the second unit must stay zero
        assert p.base_plane[0, 1] == 0b11
        assert p.plane_b2[0, 1] == 0b1

    def test_overflow_rejected(self):
        with pytest.raises(PackError, match="overflow"):
            pack(np.array([[4]]), 2)

    def test_storage_is_exactly_bits_per_weight(self):
        for bits in (2, 3, 4):
            for d_col in (32, 33, 64, 127):
                p = pack(np.zeros((7, d_col), dtype=int), bits)
                padded = ((d_col + 31) // 32) * 32
                assert p.payload_bytes == bits * 7 * padded // 8


class TestUnpack:
    def test_spec_example(self):
        p = pack(np.array([[5, 10]]), 4)
        assert list(unpack(p)[0]) == [5, 10]

    @settings(max_examples=60, deadline=None)
    @given(
        bits=st.sampled_from([2, 3, 4]),
        d_row=st.integers(1, 9),
        d_col=st.integers(1, 80),
        seed=st.integers(0, 2**31),
    )
    def test_roundtrip(self, bits, d_row, d_col, seed):
        codes = np.random.default_rng(seed).integers(0, 1 << bits, (d_row, d_col))
        assert np.array_equal(unpack(pack(codes, bits)), codes)

    def test_padding_path_roundtrip(self, rng):
        codes = rng.integers(0, 8, size=(4, 33))
        assert np.array_equal(unpack(pack(codes, 3)), codes)

    def test_corrupted_planes_rejected(self, rng):
        p = pack(rng.integers(0, 16, size=(4, 64)), 4)
        with pytest.raises(PackError, match="corrupted plane lengths"):
            PackedTensor(bits=4, shape=(4, 64), base_plane=p.base_plane,
                         plane_b2=p.plane_b2[:2], plane_b3=p.plane_b3)
        with pytest.raises(PackError, match="corrupted plane lengths"):
            PackedTensor(bits=3, shape=(4, 64), base_plane=p.base_plane,
                         plane_b2=p.plane_b2, plane_b3=p.plane_b3)


class TestPackSlice:
    def test_all_zero(self):
        p = pack(np.zeros((2, 32), dtype=int), 4)
        sliced = pack_slice(p, 2)
        assert not sliced.base_plane.any()

    def test_push_rounding(self):
        # 0b0111 = 7 -> round(3.5) = 4 -> 0b100
        p = pack(np.array([[7]]), 4)
        assert unpack(pack_slice(p, 3))[0, 0] == 0b100

    @settings(max_examples=40, deadline=None)
    @given(
        r=st.sampled_from([2, 3]),
        d_col=st.integers(1, 70),
        seed=st.integers(0, 2**31),
    )
    def test_equals_compositional_route(self, r, d_col, seed):
        codes = np.random.default_rng(seed).integers(0, 16, (3, d_col))
        p = pack(codes, 4)
        direct = pack_slice(p, r)
        via = pack(slice_to_code(codes, 4, r), r)
        assert np.array_equal(unpack(direct), unpack(via))
        assert np.array_equal(direct.base_plane, via.base_plane)

    def test_upward_rejected(self, rng):
        p = pack(rng.integers(0, 8, size=(2, 32)), 3)
        with pytest.raises(PackError):
            pack_slice(p, 2)  # only 4-bit tensors slice


class TestInterleaved:
    def test_roundtrip(self, rng):
        p = pack(rng.integers(0, 16, size=(6, 96)), 4)
        ip = to_interleaved(p)
        assert ip.layout == "interleaved"
        assert np.array_equal(unpack(to_canonical(ip)), unpack(p))
        assert np.array_equal(unpack(ip), unpack(p))
