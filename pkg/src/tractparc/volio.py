"""Volumetric data containers and NIfTI-1 file IO.

Volumes are kept in voxel-index space; the affine maps voxel indices to
world millimeters and is the only conversion boundary. Only single-file
NIfTI-1 images (.nii, .nii.gz) are supported.
"""

import gzip
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class NiftiFormatError(ValueError):
    """Raised when a file is not a readable single-file NIfTI-1 image."""


# NIfTI-1 header layout (348 bytes).
_HEADER_DTD = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]
_HEADER_DTYPE = np.dtype(_HEADER_DTD)

# NIfTI datatype code <-> numpy dtype (lossless types only).
_DT_CODES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
}
_DT_FROM_NP = {np.dtype(v): k for k, v in _DT_CODES.items()}

_CONNECTIVITY_ORDER = {6: 1, 18: 2, 26: 3}


def _check_connectivity(connectivity):
    if connectivity not in _CONNECTIVITY_ORDER:
        raise ValueError(f"connectivity must be one of 6, 18, 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, _CONNECTIVITY_ORDER[connectivity])


@dataclass
class Volume3D:
    """A 3D scalar grid with voxel spacing and a voxel-to-world affine."""

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.affine = np.asarray(self.affine, dtype=np.float64)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"volume dims must be positive, got {self.data.shape}")
        if self.affine.shape != (4, 4):
            raise ValueError("affine must be a 4x4 matrix")
        if abs(np.linalg.det(self.affine)) < 1e-12:
            raise ValueError("affine must be invertible")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing components must be > 0, got {self.spacing}")
        self._validate_data()

    def _validate_data(self):
        pass

    @property
    def dims(self):
        return self.data.shape

    def same_grid(self, other):
        """True when `other` shares this volume's shape and affine."""
        return self.dims == other.dims and np.allclose(self.affine, other.affine)

    def world_to_index(self, points):
        """Map world-mm points (N, 3) to continuous voxel indices (N, 3)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        inv = np.linalg.inv(self.affine)
        return points @ inv[:3, :3].T + inv[:3, 3]

    def index_to_world(self, indices):
        """Map voxel indices (N, 3) to world-mm coordinates (N, 3)."""
        indices = np.atleast_2d(np.asarray(indices, dtype=np.float64))
        return indices @ self.affine[:3, :3].T + self.affine[:3, 3]


@dataclass
class Mask(Volume3D):
    """A binary volume; data values are exactly 0 or 1."""

    def _validate_data(self):
        vals = np.unique(self.data)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("mask data must contain only 0 and 1")
        self.data = self.data.astype(np.uint8, copy=False)

    @property
    def foreground_count(self):
        return int(self.data.sum())


@dataclass
class Labelmap(Volume3D):
    """An integer-labeled volume; 0 is background."""

    def _validate_data(self):
        if not np.issubdtype(self.data.dtype, np.integer):
            as_int = np.rint(self.data).astype(np.int64)
            if not np.array_equal(as_int, self.data):
                raise ValueError("labelmap data must be integer-valued")
            self.data = as_int
        if self.data.min() < 0:
            raise ValueError("labelmap values must be non-negative")

    @property
    def labels(self):
        """Sorted nonzero label values present in the map."""
        vals = np.unique(self.data)
        return [int(v) for v in vals if v != 0]


def _quaternion_affine(hdr):
    b = float(hdr["quatern_b"])
    c = float(hdr["quatern_c"])
    d = float(hdr["quatern_d"])
    w2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(w2) if w2 > 0 else 0.0
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    qfac = -1.0 if pixdim[0] == -1 else 1.0
    scale = np.diag([pixdim[1], pixdim[2], pixdim[3] * qfac])
    affine = np.eye(4)
    affine[:3, :3] = rot @ scale
    affine[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return affine


def _header_affine(hdr):
    if hdr["sform_code"] > 0:
        return np.vstack([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"], [0, 0, 0, 1]]).astype(np.float64)
    if hdr["qform_code"] > 0:
        return _quaternion_affine(hdr)
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    return np.diag([pixdim[1], pixdim[2], pixdim[3], 1.0])


def _open_volume_file(path, mode):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def load_volume(path):
    """Load a single-file NIfTI-1 image.

    Parameters
    ----------
    path : str or Path
        A .nii or .nii.gz file.

    Returns
    -------
    Volume3D
        Data in native orientation with spacing and affine from the header.
    """
    with _open_volume_file(path, "rb") as f:
        raw = f.read(_HEADER_DTYPE.itemsize)
        if len(raw) < _HEADER_DTYPE.itemsize:
            raise NiftiFormatError(f"{path}: file too short for a NIfTI-1 header")
        size_le = int.from_bytes(raw[:4], "little")
        size_be = int.from_bytes(raw[:4], "big")
        if size_le == 348:
            order = "<"
        elif size_be == 348:
            order = ">"
        elif 540 in (size_le, size_be):
            raise NiftiFormatError(f"{path}: NIfTI-2 images are not supported, convert to NIfTI-1")
        else:
            raise NiftiFormatError(f"{path}: malformed header (sizeof_hdr={size_le}, expected 348)")
        hdr = np.frombuffer(raw, dtype=_HEADER_DTYPE.newbyteorder(order))[0]
        magic = bytes(hdr["magic"]).rstrip(b"\x00")
        if magic == b"ni1":
            raise NiftiFormatError(f"{path}: two-file NIfTI-1 pairs (.hdr/.img) are not supported")
        if magic != b"n+1":
            raise NiftiFormatError(f"{path}: bad magic {magic!r}, expected 'n+1'")

        ndim = int(hdr["dim"][0])
        if ndim < 1 or ndim > 7:
            raise NiftiFormatError(f"{path}: invalid dim[0]={ndim}")
        shape = tuple(int(d) for d in hdr["dim"][1 : ndim + 1])
        if len(shape) < 3 or any(d > 1 for d in shape[3:]) or any(d < 1 for d in shape[:3]):
            raise ValueError(f"{path}: expected a 3D image, got shape {shape}")
        shape = shape[:3]

        code = int(hdr["datatype"])
        if code not in _DT_CODES:
            raise NiftiFormatError(f"{path}: unsupported datatype code {code}")
        dtype = np.dtype(_DT_CODES[code]).newbyteorder(order)

        f.seek(int(hdr["vox_offset"]))
        count = int(np.prod(shape))
        payload = f.read(count * dtype.itemsize)
        if len(payload) < count * dtype.itemsize:
            raise NiftiFormatError(f"{path}: truncated data section")
        data = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data.astype(np.float64) * slope + inter

    spacing = tuple(float(abs(s)) for s in hdr["pixdim"][1:4])
    if any(s <= 0 for s in spacing):
        spacing = (1.0, 1.0, 1.0)
    return Volume3D(data=data, affine=_header_affine(hdr), spacing=spacing)


def _choose_datatype(data):
    if data.dtype == np.bool_:
        return np.dtype(np.uint8)
    if np.issubdtype(data.dtype, np.integer):
        lo, hi = (int(data.min()), int(data.max())) if data.size else (0, 0)
        for cand in (np.uint8, np.int16, np.int32, np.int64):
            info = np.iinfo(cand)
            if lo >= info.min and hi <= info.max:
                return np.dtype(cand)
        raise ValueError("integer data out of supported NIfTI range")
    if data.dtype in (np.dtype(np.float32), np.dtype(np.float64)):
        return data.dtype
    if np.issubdtype(data.dtype, np.floating):
        return np.dtype(np.float32)
    raise ValueError(f"unsupported data dtype {data.dtype}")


def save_volume(volume, path):
    """Write a volume as a little-endian single-file NIfTI-1 image.

    The datatype is taken from the data (integers stay integral); a
    subsequent load_volume returns identical data and geometry.
    """
    data = np.asarray(volume.data)
    out_dtype = _choose_datatype(data).newbyteorder("<")
    data = data.astype(out_dtype, copy=False)

    hdr = np.zeros((), dtype=_HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    dims = np.ones(8, dtype=np.int16)
    dims[0] = 3
    dims[1:4] = data.shape
    hdr["dim"] = dims
    hdr["datatype"] = _DT_FROM_NP[out_dtype.newbyteorder("=")]
    hdr["bitpix"] = out_dtype.itemsize * 8
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = volume.spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["qform_code"] = 0
    hdr["sform_code"] = 1
    hdr["srow_x"] = volume.affine[0]
    hdr["srow_y"] = volume.affine[1]
    hdr["srow_z"] = volume.affine[2]
    hdr["magic"] = b"n+1"

    with _open_volume_file(path, "wb") as f:
        f.write(hdr.tobytes())
        f.write(b"\x00" * 4)  # pad to vox_offset 352
        f.write(data.tobytes(order="F"))


def as_mask(volume):
    """Reinterpret a loaded volume as a binary mask (values must be 0/1)."""
    return Mask(data=volume.data, affine=volume.affine, spacing=volume.spacing)


def as_labelmap(volume):
    """Reinterpret a loaded volume as an integer labelmap."""
    return Labelmap(data=volume.data, affine=volume.affine, spacing=volume.spacing)


def dilate_mask(mask, radius, connectivity=26):
    """Morphologically dilate a mask by `radius` steps.

    Parameters
    ----------
    mask : Mask
    radius : int
        Number of dilation iterations, >= 1.
    connectivity : {6, 18, 26}
        Neighborhood used for one morphological step.
    """
    if radius < 1:
        raise ValueError(f"dilation radius must be >= 1, got {radius}")
    structure = _check_connectivity(connectivity)
    dilated = ndimage.binary_dilation(mask.data, structure=structure, iterations=int(radius))
    return Mask(data=dilated.astype(np.uint8), affine=mask.affine, spacing=mask.spacing)


def connected_components(mask, connectivity=26):
    """Label connected components of a mask, largest first.

    Returns
    -------
    labelmap : Labelmap
        Component labels 1..n, relabeled so label 1 is the largest.
    sizes : list of int
        Component sizes in descending order; sizes[i] is the size of
        label i + 1.
    """
    structure = _check_connectivity(connectivity)
    raw, n = ndimage.label(mask.data, structure=structure)
    if n == 0:
        return Labelmap(data=np.zeros_like(mask.data, dtype=np.int32), affine=mask.affine, spacing=mask.spacing), []
    counts = np.bincount(raw.ravel())[1:]
    order = np.argsort(-counts, kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1)
    labels = remap[raw]
    sizes = [int(counts[i]) for i in order]
    return Labelmap(data=labels, affine=mask.affine, spacing=mask.spacing), sizes
