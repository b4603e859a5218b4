import gzip

import numpy as np
import pytest

from tractparc import volio
from tractparc.volio import (
    Labelmap,
    Mask,
    NiftiFormatError,
    Volume3D,
    connected_components,
    dilate_mask,
    load_volume,
    save_volume,
)

CONNECTIVITY_OFFSETS = {
    6: [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
        if abs(dx) + abs(dy) + abs(dz) == 1],
    18: [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
         if 1 <= abs(dx) + abs(dy) + abs(dz) <= 2],
    26: [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
         if (dx, dy, dz) != (0, 0, 0)],
}


def flood_fill_components(data, connectivity):
    """Brute-force BFS labeling, independent of scipy."""
    offsets = CONNECTIVITY_OFFSETS[connectivity]
    labels = np.zeros(data.shape, dtype=int)
    sizes = []
    next_label = 0
    for seed in np.argwhere(data > 0):
        seed = tuple(seed)
        if labels[seed]:
            continue
        next_label += 1
        stack = [seed]
        labels[seed] = next_label
        size = 0
        while stack:
            pos = stack.pop()
            size += 1
            for off in offsets:
                nbr = tuple(np.add(pos, off))
                if any(c < 0 or c >= s for c, s in zip(nbr, data.shape)):
                    continue
                if data[nbr] > 0 and not labels[nbr]:
                    labels[nbr] = next_label
                    stack.append(nbr)
        sizes.append(size)
    return labels, sizes


def random_volume(rng, shape=(5, 6, 7), dtype=np.float32):
    data = rng.normal(size=shape).astype(dtype)
    affine = np.eye(4)
    affine[:3, 3] = [-10.0, 5.0, 2.5]
    affine[0, 0] = 1.25
    return Volume3D(data=data, affine=affine, spacing=(1.25, 1.0, 1.0))


class TestNiftiIO:
    def test_all_zero_image(self, tmp_path):
        path = tmp_path / "zeros.nii"
        save_volume(Volume3D(data=np.zeros((4, 4, 4), dtype=np.float32)), path)
        vol = load_volume(path)
        assert vol.dims == (4, 4, 4)
        assert np.all(vol.data == 0)

    def test_hcp_spacing_preserved_bit_exact(self, tmp_path):
        path = tmp_path / "hcp.nii"
        spacing = (1.25, 1.25, 1.25)
        save_volume(Volume3D(data=np.ones((3, 3, 3), dtype=np.float32), spacing=spacing), path)
        vol = load_volume(path)
        assert vol.spacing == tuple(np.float32(s) for s in spacing)
        assert vol.spacing == spacing  # 1.25 is exactly representable

    @pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int16, np.uint8])
    @pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
    def test_round_trip(self, tmp_path, dtype, suffix):
        rng = np.random.default_rng(7)
        if np.issubdtype(dtype, np.integer):
            vol = random_volume(rng)
            vol = Volume3D(data=(vol.data * 50).astype(dtype), affine=vol.affine, spacing=vol.spacing)
        else:
            vol = random_volume(rng, dtype=dtype)
        path = tmp_path / f"vol{suffix}"
        save_volume(vol, path)
        back = load_volume(path)
        assert back.data.dtype == np.dtype(dtype)
        np.testing.assert_array_equal(back.data, vol.data)
        np.testing.assert_allclose(back.affine, vol.affine, atol=1e-6)
        np.testing.assert_allclose(back.spacing, vol.spacing, rtol=1e-7)

    def test_save_load_save_payload_byte_identical(self, tmp_path):
        rng = np.random.default_rng(3)
        vol = random_volume(rng, dtype=np.float32)
        first = tmp_path / "a.nii"
        second = tmp_path / "b.nii"
        save_volume(vol, first)
        save_volume(load_volume(first), second)
        payload_a = first.read_bytes()[352:]
        payload_b = second.read_bytes()[352:]
        assert payload_a == payload_b

    def test_labelmap_integer_datatype(self, tmp_path):
        data = np.arange(27).reshape(3, 3, 3) % 10
        path = tmp_path / "labels.nii"
        save_volume(Labelmap(data=data), path)
        back = load_volume(path)
        assert np.issubdtype(back.data.dtype, np.integer)
        np.testing.assert_array_equal(back.data, data)
        assert sorted(volio.as_labelmap(back).labels) == list(range(1, 10))

    def test_empty_dims_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            Volume3D(data=np.zeros((0, 4, 4), dtype=np.float32))

    def test_non_3d_rejected(self, tmp_path):
        path = tmp_path / "vol4d.nii"
        save_volume(Volume3D(data=np.zeros((4, 4, 4), dtype=np.float32)), path)
        raw = bytearray(path.read_bytes())
        # dim[0] = 4 with nt = 2 makes the image genuinely 4D
        raw[40:42] = np.int16(4).tobytes()
        raw[48:50] = np.int16(2).tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="3D"):
            load_volume(path)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "junk.nii"
        path.write_bytes(b"\x00" * 400)
        with pytest.raises(NiftiFormatError, match="sizeof_hdr"):
            load_volume(path)

    def test_nifti2_rejected(self, tmp_path):
        path = tmp_path / "n2.nii"
        payload = np.int32(540).tobytes() + b"\x00" * 400
        path.write_bytes(payload)
        with pytest.raises(NiftiFormatError, match="NIfTI-2"):
            load_volume(path)

    def test_two_file_pair_rejected(self, tmp_path):
        path = tmp_path / "pair.nii"
        save_volume(Volume3D(data=np.zeros((3, 3, 3), dtype=np.float32)), path)
        raw = bytearray(path.read_bytes())
        raw[344:348] = b"ni1\x00"
        path.write_bytes(bytes(raw))
        with pytest.raises(NiftiFormatError, match="two-file"):
            load_volume(path)

    def test_truncated_data(self, tmp_path):
        path = tmp_path / "trunc.nii"
        save_volume(Volume3D(data=np.ones((4, 4, 4), dtype=np.float32)), path)
        path.write_bytes(path.read_bytes()[:-32])
        with pytest.raises(NiftiFormatError, match="truncated"):
            load_volume(path)

    def test_big_endian_detected(self, tmp_path):
        rng = np.random.default_rng(11)
        vol = random_volume(rng, dtype=np.float32)
        path = tmp_path / "le.nii"
        save_volume(vol, path)
        raw = bytearray(path.read_bytes())
        hdr = np.frombuffer(bytes(raw[:348]), dtype=volio._HEADER_DTYPE.newbyteorder("<"))[0]
        be = np.zeros((), dtype=volio._HEADER_DTYPE.newbyteorder(">"))
        for name in volio._HEADER_DTYPE.names:
            be[name] = hdr[name]
        payload = vol.data.astype(">f4").tobytes(order="F")
        be_path = tmp_path / "be.nii"
        be_path.write_bytes(be.tobytes() + b"\x00" * 4 + payload)
        back = load_volume(be_path)
        np.testing.assert_array_equal(np.asarray(back.data, dtype=np.float32), vol.data)

    def test_scl_slope_applied(self, tmp_path):
        path = tmp_path / "scaled.nii"
        save_volume(Volume3D(data=np.ones((2, 2, 2), dtype=np.float32)), path)
        raw = bytearray(path.read_bytes())
        raw[112:116] = np.float32(2.0).tobytes()
        raw[116:120] = np.float32(0.5).tobytes()
        path.write_bytes(bytes(raw))
        back = load_volume(path)
        np.testing.assert_allclose(back.data, 2.5)

    def test_mask_value_check(self):
        with pytest.raises(ValueError, match="0 and 1"):
            Mask(data=np.full((2, 2, 2), 3))
        as_mask = volio.as_mask(Volume3D(data=np.ones((2, 2, 2), dtype=np.int16)))
        assert as_mask.foreground_count == 8


class TestDilateMask:
    def test_single_voxel_radius1_conn6(self):
        data = np.zeros((7, 7, 7), dtype=np.uint8)
        data[3, 3, 3] = 1
        out = dilate_mask(Mask(data=data), radius=1, connectivity=6)
        assert out.foreground_count == 7

    def test_single_voxel_radius1_conn26(self):
        data = np.zeros((7, 7, 7), dtype=np.uint8)
        data[3, 3, 3] = 1
        out = dilate_mask(Mask(data=data), radius=1, connectivity=26)
        assert out.foreground_count == 27

    @pytest.mark.parametrize("connectivity", [6, 18, 26])
    def test_radius2_equals_radius1_twice(self, connectivity):
        rng = np.random.default_rng(5)
        data = (rng.random((10, 10, 10)) < 0.1).astype(np.uint8)
        mask = Mask(data=data)
        once_twice = dilate_mask(dilate_mask(mask, 1, connectivity), 1, connectivity)
        direct = dilate_mask(mask, 2, connectivity)
        np.testing.assert_array_equal(once_twice.data, direct.data)

    def test_monotone(self):
        rng = np.random.default_rng(9)
        small = (rng.random((8, 8, 8)) < 0.1).astype(np.uint8)
        big = np.clip(small + (rng.random((8, 8, 8)) < 0.1), 0, 1).astype(np.uint8)
        da = dilate_mask(Mask(data=small), 1, 26)
        db = dilate_mask(Mask(data=big), 1, 26)
        assert np.all(da.data <= db.data)

    def test_superset_and_reach(self):
        rng = np.random.default_rng(2)
        data = (rng.random((9, 9, 9)) < 0.05).astype(np.uint8)
        data[4, 4, 4] = 1
        mask = Mask(data=data)
        out = dilate_mask(mask, 1, 6)
        assert np.all(out.data >= mask.data)
        # every new voxel has an original 6-neighbor
        for i, j, k in np.argwhere((out.data == 1) & (mask.data == 0)):
            nbrs = [
                mask.data[i + dx, j + dy, k + dz]
                for dx, dy, dz in CONNECTIVITY_OFFSETS[6]
                if 0 <= i + dx < 9 and 0 <= j + dy < 9 and 0 <= k + dz < 9
            ]
            assert any(nbrs)

    def test_bad_radius(self):
        with pytest.raises(ValueError, match="radius"):
            dilate_mask(Mask(data=np.ones((2, 2, 2))), radius=0)

    def test_bad_connectivity(self):
        with pytest.raises(ValueError, match="connectivity"):
            dilate_mask(Mask(data=np.ones((2, 2, 2))), radius=1, connectivity=4)


class TestConnectedComponents:
    def test_solid_block(self):
        data = np.zeros((5, 5, 5), dtype=np.uint8)
        data[1:4, 1:4, 1:4] = 1
        labelmap, sizes = connected_components(Mask(data=data))
        assert sizes == [27]
        assert labelmap.labels == [1]

    def test_corner_touching_voxels(self):
        data = np.zeros((4, 4, 4), dtype=np.uint8)
        data[1, 1, 1] = 1
        data[2, 2, 2] = 1
        _, sizes26 = connected_components(Mask(data=data), connectivity=26)
        _, sizes6 = connected_components(Mask(data=data), connectivity=6)
        assert len(sizes26) == 1
        assert len(sizes6) == 2

    @pytest.mark.parametrize("connectivity", [6, 18, 26])
    def test_against_flood_fill(self, connectivity):
        rng = np.random.default_rng(13)
        data = (rng.random((16, 16, 16)) < 0.25).astype(np.uint8)
        labelmap, sizes = connected_components(Mask(data=data), connectivity=connectivity)
        expected_labels, expected_sizes = flood_fill_components(data, connectivity)
        assert sorted(sizes, reverse=True) == sorted(expected_sizes, reverse=True)
        assert sum(sizes) == int(data.sum())
        # same partition: label pairs agree
        ours = labelmap.data[data > 0]
        theirs = expected_labels[data > 0]
        mapping = {}
        for a, b in zip(ours, theirs):
            assert mapping.setdefault(a, b) == b
        assert len(set(mapping.values())) == len(mapping)

    def test_sizes_descending(self):
        data = np.zeros((10, 10, 10), dtype=np.uint8)
        data[0:1, 0:1, 0:5] = 1
        data[5:7, 5:7, 5:7] = 1
        labelmap, sizes = connected_components(Mask(data=data), connectivity=6)
        assert sizes == sorted(sizes, reverse=True)
        assert sizes[0] == int((labelmap.data == 1).sum())

    def test_empty_mask(self):
        labelmap, sizes = connected_components(Mask(data=np.zeros((3, 3, 3))))
        assert sizes == []
        assert np.all(labelmap.data == 0)
