"""Volume ingestion, resampling, augmentation, and the synthetic phantom.

Axis conventions. Volumes are stored channel-first as (1, D, H, W): D is the
slice (z) axis, H the in-plane rows (y), W the in-plane columns (x). NIfTI
files keep their native x-fastest layout on disk; reading reshapes to
(z, y, x) so no transposition happens. Voxel spacing is carried in the same
(D, H, W) order, in millimeters.

Dataset directory layout, one directory per patient:

    patient001/frame01.nii      image frame (little-endian f32 after synth)
    patient001/frame01_gt.nii   label frame, values {0,1,2,3}
    patient001/meta.txt         lines "ed=<int>", "es=<int>", "T=<int>"

meta.txt indices are 0-based positions into the frame list; file names are
1-based. Compressed `.nii.gz` is not parsed — decompress first.
"""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import tensor
from .tensor import Tensor


class DataError(Exception):
    """Input data is unreadable, malformed, or geometrically impossible."""


class NiftiFormatError(DataError):
    """The file violates the NIfTI-1 layout this reader supports."""


# -- domain types -------------------------------------------------------

@dataclass
class Volume:
    """One image volume: (1,D,H,W) tensor plus physical metadata."""
    data: Tensor
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if any(s <= 0 for s in self.spacing):
            raise DataError(f"voxel spacing must be positive, got {self.spacing}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def array(self) -> np.ndarray:
        """The (D,H,W) numpy view without the channel axis."""
        return self.data.data[0]


@dataclass
class SequenceSample:
    """Ordered frames of one cardiac cycle plus optional labels."""
    patient_id: str
    frames: list[Volume]
    labels: list[np.ndarray] | None
    ed_index: int
    es_index: int

    def __post_init__(self):
        if not self.frames:
            raise DataError(f"{self.patient_id}: empty sequence")
        ext = self.frames[0].extents
        for vol in self.frames:
            if vol.extents != ext:
                raise DataError(f"{self.patient_id}: mixed frame extents "
                                f"{ext} vs {vol.extents}")
        t = len(self.frames)
        if not (0 <= self.ed_index < t and 0 <= self.es_index < t):
            raise DataError(f"{self.patient_id}: phase indices ({self.ed_index}, "
                            f"{self.es_index}) out of range for T={t}")
        if self.ed_index == self.es_index:
            raise DataError(f"{self.patient_id}: ed and es frames coincide")
        if self.labels is not None:
            if len(self.labels) != t:
                raise DataError(f"{self.patient_id}: {len(self.labels)} label "
                                f"frames for {t} image frames")
            for lab in self.labels:
                if tuple(lab.shape) != tuple(ext):
                    raise DataError(f"{self.patient_id}: label extents "
                                    f"{lab.shape} do not match frames {ext}")


# -- NIfTI-1 ------------------------------------------------------------

_HDR_SIZE = 348
_DTYPES = {2: "u1", 4: "i2", 16: "f4"}


def read_nifti(path) -> Volume:
    """Parses an uncompressed NIfTI-1 volume.

    Handles native and byte-swapped headers, datatypes uint8/int16/float32,
    scl_slope/scl_inter scaling, and both magics ("ni1\\0" reads the voxel
    payload from the sibling .img file).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HDR_SIZE:
        raise NiftiFormatError(f"{path}: truncated header "
                               f"({len(blob)} of {_HDR_SIZE} bytes)")
    (size_le,) = struct.unpack_from("<i", blob, 0)
    if size_le == _HDR_SIZE:
        end = "<"
    else:
        (size_be,) = struct.unpack_from(">i", blob, 0)
        if size_be != _HDR_SIZE:
            raise NiftiFormatError(f"{path}: not NIfTI-1 (sizeof_hdr reads "
                                   f"{size_le} natively, {size_be} swapped)")
        end = ">"

    magic = struct.unpack_from("4s", blob, 344)[0]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiFormatError(f"{path}: bad magic {magic!r}")
    dim = struct.unpack_from(end + "8h", blob, 40)
    if dim[0] not in (3, 4):
        raise NiftiFormatError(f"{path}: dim[0] = {dim[0]}, expected 3 or 4")
    if dim[0] == 4 and dim[4] > 1:
        raise NiftiFormatError(f"{path}: {dim[4]} time points; sequences must "
                               "be stored as one file per frame")
    nx, ny, nz = (max(1, d) for d in dim[1:4])
    (datatype,) = struct.unpack_from(end + "h", blob, 70)
    if datatype not in _DTYPES:
        raise NiftiFormatError(f"{path}: unsupported datatype code {datatype} "
                               f"(supported: {sorted(_DTYPES)})")
    pixdim = struct.unpack_from(end + "8f", blob, 76)
    (vox_offset,) = struct.unpack_from(end + "f", blob, 108)
    slope, inter = struct.unpack_from(end + "2f", blob, 112)
    qoffset = struct.unpack_from(end + "3f", blob, 268)

    dtype = np.dtype(end + _DTYPES[datatype])
    count = nx * ny * nz
    if magic == b"ni1\x00":
        img_path = os.fspath(path)
        img_path = re.sub(r"\.hdr$", "", img_path) + ".img"
        try:
            with open(img_path, "rb") as fh:
                payload = fh.read()
        except OSError as exc:
            raise NiftiFormatError(f"{path}: header-pair file needs {img_path}: "
                                   f"{exc}") from exc
        offset = 0
    else:
        payload = blob
        offset = int(vox_offset)
        if offset < _HDR_SIZE:
            raise NiftiFormatError(f"{path}: vox_offset {vox_offset} inside header")
    need = offset + count * dtype.itemsize
    if len(payload) < need:
        raise NiftiFormatError(f"{path}: truncated payload "
                               f"({len(payload)} bytes, need {need})")

    raw = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    arr = raw.reshape(nz, ny, nx).astype(tensor.default_dtype())
    if slope != 0.0 and not (slope == 1.0 and inter == 0.0):
        arr = arr * slope + inter
    spacing = tuple(float(p) if p > 0 else 1.0 for p in (pixdim[3], pixdim[2],
                                                         pixdim[1]))
    return Volume(Tensor(arr[None]), spacing, tuple(float(q) for q in qoffset))


def write_nifti(volume: Volume, path) -> None:
    """Writes little-endian float32 NIfTI-1, magic "n+1\\0", vox_offset 352."""
    d, h, w = volume.extents
    if max(d, h, w) > 32767:
        raise DataError(f"extents {volume.extents} overflow the i16 dim fields")
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("c", hdr, 38, b"r")
    struct.pack_into("<8h", hdr, 40, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, 16, 32)  # f32, 32 bits per voxel
    sd, sh, sw = volume.spacing
    struct.pack_into("<8f", hdr, 76, 1.0, sw, sh, sd, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, 352.0, 0.0, 0.0)  # vox_offset, slope, inter
    struct.pack_into("<3f", hdr, 268, *volume.origin)
    struct.pack_into("4s", hdr, 344, b"n+1\x00")
    buf = volume.array().astype("<f4", copy=False)
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00" * 4)  # pad to vox_offset 352
        fh.write(np.ascontiguousarray(buf).tobytes())


# -- resampling and normalization ---------------------------------------

def _linear_coords(src: int, dst: int) -> tuple[np.ndarray, np.ndarray]:
    """Corner-aligned source coordinates split into floor index and fraction."""
    if dst == 1:
        c = np.array([(src - 1) / 2.0])
    else:
        c = np.arange(dst) * ((src - 1) / (dst - 1))
    i0 = np.minimum(np.floor(c).astype(np.intp), src - 2)
    return i0, c - i0


def _resample_array_linear(src: np.ndarray, extents) -> np.ndarray:
    out_shape = tuple(int(e) for e in extents)
    idx, frac = zip(*(_linear_coords(s, n) for s, n in zip(src.shape, out_shape)))
    # accumulate at double precision so constant regions survive the eight
    # partition-of-unity roundings and come back bit-exact after the cast
    out = np.zeros(out_shape, dtype=np.float64)
    for dz in (0, 1):
        wz = (frac[0] if dz else 1.0 - frac[0])
        for dy in (0, 1):
            wy = (frac[1] if dy else 1.0 - frac[1])
            for dx in (0, 1):
                wx = (frac[2] if dx else 1.0 - frac[2])
                w = wz[:, None, None] * wy[None, :, None] * wx[None, None, :]
                out += w * src[np.ix_(idx[0] + dz, idx[1] + dy, idx[2] + dx)]
    return out.astype(src.dtype)


def resample_linear(volume: Volume, extents) -> Volume:
    """Trilinear resample to (D,H,W) extents on the corner-aligned grid."""
    src = volume.array()
    for axis, s in enumerate(src.shape):
        if s < 2:
            raise DataError(f"cannot linearly resample a degenerate axis "
                            f"(axis {axis} has extent {s})")
    out = _resample_array_linear(src, extents)
    spacing = tuple(sp * s / n
                    for sp, s, n in zip(volume.spacing, src.shape, extents))
    return Volume(Tensor(out[None]), spacing, volume.origin)


def resample_nearest(labels: np.ndarray, extents) -> np.ndarray:
    """Nearest-neighbor resample for label volumes (keeps the vocabulary)."""
    out_shape = tuple(int(e) for e in extents)
    idx = []
    for s, n in zip(labels.shape, out_shape):
        if n == 1:
            c = np.array([(s - 1) / 2.0])
        else:
            c = np.arange(n) * ((s - 1) / (n - 1))
        idx.append(np.clip(np.rint(c).astype(np.intp), 0, s - 1))
    return labels[np.ix_(*idx)]


def normalize_intensity(volume: Volume) -> Volume:
    """Per-volume z-score; a constant volume maps to all zeros."""
    arr = volume.array()
    std = float(arr.std())
    if std == 0.0:
        out = np.zeros_like(arr)
    else:
        out = (arr - arr.mean()) / std
    return Volume(Tensor(out[None]), volume.spacing, volume.origin)


# -- augmentation --------------------------------------------------------

AUGMENT_TRANSFORMS = ("identity", "scale_0.8", "scale_1.2", "flip_x", "flip_y")


def _scale_plane_linear(arr: np.ndarray, s: float) -> np.ndarray:
    """In-plane zoom about the center on the last two axes, zero outside."""
    h, w = arr.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yc = cy + (np.arange(h) - cy) / s
    xc = cx + (np.arange(w) - cx) / s
    y_ok = (yc >= 0) & (yc <= h - 1)
    x_ok = (xc >= 0) & (xc <= w - 1)
    y0 = np.clip(np.floor(yc).astype(np.intp), 0, h - 2)
    x0 = np.clip(np.floor(xc).astype(np.intp), 0, w - 2)
    fy = np.clip(yc - y0, 0.0, 1.0)
    fx = np.clip(xc - x0, 0.0, 1.0)
    out = np.zeros_like(arr)
    for dy in (0, 1):
        wy = (fy if dy else 1.0 - fy)[:, None]
        for dx in (0, 1):
            wx = (fx if dx else 1.0 - fx)[None, :]
            out += (wy * wx) * arr[..., y0 + dy, :][..., x0 + dx]
    out *= y_ok[:, None] & x_ok[None, :]
    return out


def _scale_plane_nearest(lab: np.ndarray, s: float) -> np.ndarray:
    h, w = lab.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yc = cy + (np.arange(h) - cy) / s
    xc = cx + (np.arange(w) - cx) / s
    y_ok = (yc >= 0) & (yc <= h - 1)
    x_ok = (xc >= 0) & (xc <= w - 1)
    yi = np.clip(np.rint(yc).astype(np.intp), 0, h - 1)
    xi = np.clip(np.rint(xc).astype(np.intp), 0, w - 1)
    out = lab[..., yi, :][..., xi]
    out = out * (y_ok[:, None] & x_ok[None, :])
    return out.astype(lab.dtype)


def _apply_transform(name: str, img: np.ndarray, lab: np.ndarray | None):
    """img: (1,D,H,W); lab: (D,H,W) or None."""
    if name == "identity":
        return img.copy(), (None if lab is None else lab.copy())
    if name == "flip_x":
        return img[..., ::-1].copy(), (None if lab is None else lab[..., ::-1].copy())
    if name == "flip_y":
        return (img[:, :, ::-1, :].copy(),
                None if lab is None else lab[:, ::-1, :].copy())
    if name in ("scale_0.8", "scale_1.2"):
        s = 0.8 if name == "scale_0.8" else 1.2
        out_img = _scale_plane_linear(img, s)
        out_lab = None if lab is None else _scale_plane_nearest(lab, s)
        return out_img, out_lab
    raise ValueError(f"unknown transform {name!r}")


def augment(sample: SequenceSample, rng: np.random.Generator) -> SequenceSample:
    """One transform drawn uniformly, applied identically to every frame."""
    name = AUGMENT_TRANSFORMS[int(rng.integers(len(AUGMENT_TRANSFORMS)))]
    return apply_augmentation(sample, name)


def apply_augmentation(sample: SequenceSample, name: str) -> SequenceSample:
    frames = []
    labels = [] if sample.labels is not None else None
    for t, vol in enumerate(sample.frames):
        lab = None if sample.labels is None else sample.labels[t]
        img, lab = _apply_transform(name, vol.data.data, lab)
        frames.append(Volume(Tensor(img), vol.spacing, vol.origin))
        if labels is not None:
            labels.append(lab)
    return SequenceSample(sample.patient_id, frames, labels,
                          sample.ed_index, sample.es_index)


# -- splitting ------------------------------------------------------------

def split_patients(ids, seed: int) -> tuple[list, list, list]:
    """Deterministic 7:2:1 split: floor(0.7n) / floor(0.2n) / remainder."""
    ids = list(ids)
    n = len(ids)
    if n < 10:
        raise DataError(f"need at least 10 patients to split 7:2:1, got {n}")
    order = np.random.default_rng(int(seed)).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = (7 * n) // 10
    n_val = (2 * n) // 10
    return (shuffled[:n_train],
            shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])


# -- synthetic beating phantom ---------------------------------------------

@dataclass
class PhantomConfig:
    """Geometry and imaging parameters of the synthetic beating heart.

    Radii and offsets are in voxels; None picks proportional defaults from
    the in-plane extents. Intensities are (background, LV, RV, MYO) base
    levels before additive Gaussian noise.
    """
    frames: int = 8
    extents: tuple[int, int, int] = (8, 32, 32)
    lv_radius: float | None = None
    ring_thickness: float | None = None
    rv_radius: float | None = None
    rv_offset: float | None = None
    center: tuple[float, float] | None = None
    amplitude: float = 0.3
    noise_std: float = 0.05
    intensities: tuple[float, float, float, float] = (0.2, 0.9, 0.65, 0.4)
    seed: int = 0

    def resolve(self):
        d, h, w = self.extents
        m = min(h, w)
        r_lv = self.lv_radius if self.lv_radius is not None else 0.18 * m
        ring = self.ring_thickness if self.ring_thickness is not None else 0.08 * m
        r_rv = self.rv_radius if self.rv_radius is not None else 0.15 * m
        off = self.rv_offset if self.rv_offset is not None else 0.32 * m
        cy, cx = self.center if self.center is not None else ((h - 1) / 2.0 + 0.12 * m,
                                                              (w - 1) / 2.0 + 0.10 * m)
        return r_lv, ring, r_rv, off, cy, cx

    def validate(self) -> None:
        if self.frames < 2:
            raise DataError(f"phantom needs at least 2 frames, got {self.frames}")
        if not (0.0 <= self.amplitude < 1.0):
            raise DataError(f"amplitude must lie in [0,1), got {self.amplitude}")
        if self.noise_std < 0:
            raise DataError(f"noise std must be non-negative, got {self.noise_std}")
        d, h, w = self.extents
        if min(d, h, w) < 1:
            raise DataError(f"bad extents {self.extents}")
        r_lv, ring, r_rv, off, cy, cx = self.resolve()
        r_out = r_lv + ring
        # maximal dilation is scale 1 (frame 0)
        if (cy - r_out < 0 or cy + r_out > h - 1
                or cx - r_out < 0 or cx + r_out > w - 1):
            raise DataError(f"geometry overflow: outer ring radius {r_out:.1f} "
                            f"at center ({cy:.1f},{cx:.1f}) exceeds the "
                            f"{h}x{w} plane")
        rvy, rvx = cy, cx - off
        if (rvy - r_rv < 0 or rvy + r_rv > h - 1
                or rvx - r_rv < 0 or rvx + r_rv > w - 1):
            raise DataError(f"geometry overflow: RV disk radius {r_rv:.1f} at "
                            f"({rvy:.1f},{rvx:.1f}) exceeds the {h}x{w} plane")


def contraction_scale(t: int, frames: int, amplitude: float) -> float:
    return 1.0 - amplitude * (1.0 - np.cos(2.0 * np.pi * t / frames)) / 2.0


def generate_phantom_sequence(config: PhantomConfig,
                              patient_id: str = "phantom") -> SequenceSample:
    """Beating two-ventricle phantom with exact generating masks as labels."""
    config.validate()
    d, h, w = config.extents
    r_lv, ring, r_rv, off, cy, cx = config.resolve()
    rng = np.random.default_rng(int(config.seed))
    yy, xx = np.mgrid[0:h, 0:w]
    lv_dist = np.hypot(yy - cy, xx - cx)
    rv_dist = np.hypot(yy - cy, xx - (cx - off))

    scales = [contraction_scale(t, config.frames, config.amplitude)
              for t in range(config.frames)]
    frames, labels = [], []
    levels = np.asarray(config.intensities, dtype=np.float64)
    for s in scales:
        lv = lv_dist <= r_lv * s
        outer = lv_dist <= (r_lv + ring) * s
        myo = outer & ~lv
        rv = (rv_dist <= r_rv * s) & ~outer
        plane = np.zeros((h, w), dtype=np.uint8)
        plane[lv] = 1
        plane[rv] = 2
        plane[myo] = 3
        lab = np.broadcast_to(plane, (d, h, w)).copy()
        img = levels[lab] + rng.normal(0.0, config.noise_std, size=(d, h, w))
        frames.append(Volume(Tensor(img.astype(tensor.default_dtype())[None])))
        labels.append(lab)
    ed = int(np.argmax(scales))
    es = int(np.argmin(scales))
    return SequenceSample(patient_id, frames, labels, ed, es)


# -- dataset directories ---------------------------------------------------

def write_sequence(sample: SequenceSample, patient_dir) -> None:
    os.makedirs(patient_dir, exist_ok=True)
    for t, vol in enumerate(sample.frames):
        write_nifti(vol, os.path.join(patient_dir, f"frame{t + 1:02d}.nii"))
        if sample.labels is not None:
            lab_vol = Volume(Tensor(sample.labels[t].astype(np.float32)[None]),
                             vol.spacing, vol.origin)
            write_nifti(lab_vol, os.path.join(patient_dir,
                                              f"frame{t + 1:02d}_gt.nii"))
    with open(os.path.join(patient_dir, "meta.txt"), "w") as fh:
        fh.write(f"ed={sample.ed_index}\n")
        fh.write(f"es={sample.es_index}\n")
        fh.write(f"T={len(sample.frames)}\n")


def write_phantom_dataset(out_dir, n_patients: int, base: PhantomConfig) -> list[str]:
    """Materializes N phantom patients; geometry varies per patient."""
    os.makedirs(out_dir, exist_ok=True)
    ids = []
    for i in range(n_patients):
        pid = f"patient{i + 1:03d}"
        prng = np.random.default_rng(np.random.SeedSequence((int(base.seed), i)))
        d, h, w = base.extents
        m = min(h, w)
        cfg = replace(
            base,
            lv_radius=0.18 * m * prng.uniform(0.85, 1.15),
            ring_thickness=0.08 * m * prng.uniform(0.85, 1.15),
            rv_radius=0.15 * m * prng.uniform(0.85, 1.15),
            rv_offset=0.32 * m,
            center=((h - 1) / 2.0 + 0.12 * m + prng.uniform(-1.5, 1.5),
                    (w - 1) / 2.0 + 0.10 * m + prng.uniform(-1.5, 1.5)),
            seed=int(prng.integers(2 ** 31)),
        )
        sample = generate_phantom_sequence(cfg, patient_id=pid)
        write_sequence(sample, os.path.join(out_dir, pid))
        ids.append(pid)
    return ids


def list_patients(data_dir) -> list[str]:
    try:
        names = sorted(n for n in os.listdir(data_dir)
                       if os.path.isdir(os.path.join(data_dir, n))
                       and os.path.exists(os.path.join(data_dir, n, "meta.txt")))
    except OSError as exc:
        raise DataError(f"cannot list dataset directory {data_dir}: {exc}") from exc
    if not names:
        raise DataError(f"no patient directories under {data_dir}")
    return names


def _read_meta(path) -> dict[str, int]:
    meta = {}
    try:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                meta[key.strip()] = int(value.strip())
    except (OSError, ValueError) as exc:
        raise DataError(f"bad meta file {path}: {exc}") from exc
    for key in ("ed", "es", "T"):
        if key not in meta:
            raise DataError(f"{path}: missing '{key}='")
    return meta


def load_sequence(patient_dir) -> SequenceSample:
    meta = _read_meta(os.path.join(patient_dir, "meta.txt"))
    frame_paths = sorted(
        os.path.join(patient_dir, n) for n in os.listdir(patient_dir)
        if re.fullmatch(r"frame\d+\.nii", n))
    if len(frame_paths) != meta["T"]:
        raise DataError(f"{patient_dir}: meta says T={meta['T']} but "
                        f"{len(frame_paths)} frame files found")
    frames = [read_nifti(p) for p in frame_paths]
    labels = None
    gt_paths = [re.sub(r"\.nii$", "_gt.nii", p) for p in frame_paths]
    if all(os.path.exists(p) for p in gt_paths):
        labels = []
        for p in gt_paths:
            arr = read_nifti(p).array()
            lab = np.rint(arr).astype(np.uint8)
            if not np.isin(lab, (0, 1, 2, 3)).all():
                raise DataError(f"{p}: label values outside {{0,1,2,3}}")
            labels.append(lab)
    return SequenceSample(os.path.basename(os.path.normpath(patient_dir)),
                          frames, labels, meta["ed"], meta["es"])


def prepare_sample(sample: SequenceSample, extents) -> SequenceSample:
    """Resample (linear images, nearest labels) then z-score each frame."""
    frames = [normalize_intensity(resample_linear(vol, extents))
              for vol in sample.frames]
    labels = None
    if sample.labels is not None:
        labels = [resample_nearest(lab, extents) for lab in sample.labels]
    return SequenceSample(sample.patient_id, frames, labels,
                          sample.ed_index, sample.es_index)
