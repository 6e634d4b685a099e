"""Dataset ingestion and fixtures.

The NPY decoder is written against the published format description rather
than numpy's own loader, so dataset files can be validated byte by byte;
NPZ is the usual ZIP container of NPY members. Images load as float arrays
in [0, 1], channel-first; per-qubit rotation angles are produced by an
affine map recorded in the split so evaluation reuses the exact training
transform.
"""

import ast
import io
import struct
import zipfile
from dataclasses import dataclass, field, replace

import numpy as np

NPY_MAGIC = b"\x93NUMPY"

# dtype strings the MedMNIST files (and our fixtures) may carry
_SUPPORTED_DTYPES = {
    "|u1": np.uint8, "|i1": np.int8, "|b1": np.bool_,
    "<u2": np.uint16, "<u4": np.uint32, "<u8": np.uint64,
    "<i2": np.int16, "<i4": np.int32, "<i8": np.int64,
    "<f4": np.float32, "<f8": np.float64,
}

# Train/Val/Test sizes of the published MedMNIST releases used here
MEDMNIST_SPLIT_SIZES = {
    "breastmnist": (546, 78, 156),
    "retinamnist": (1080, 120, 400),
    "pneumoniamnist": (4708, 524, 624),
    "dermamnist": (7007, 1003, 2005),
    "bloodmnist": (11959, 1712, 3421),
    "organcmnist": (13000, 2392, 8268),
    "pathmnist": (89996, 10004, 7180),
}


class DataError(ValueError):
    pass


class NpyFormatError(DataError):
    pass


def parse_npy(payload):
    """Decode one NPY v1/v2 buffer to an array.

    C-order little-endian numeric dtypes only; distinct errors for bad
    magic, unsupported layout/dtype, and truncation.
    """
    if len(payload) < 10 or payload[:6] != NPY_MAGIC:
        raise NpyFormatError("bad magic: not an NPY payload")
    major, minor = payload[6], payload[7]
    if major == 1:
        (hlen,) = struct.unpack_from("<H", payload, 8)
        start = 10
    elif major == 2:
        if len(payload) < 12:
            raise NpyFormatError("truncated NPY header length")
        (hlen,) = struct.unpack_from("<I", payload, 8)
        start = 12
    else:
        raise NpyFormatError(f"unsupported NPY version {major}.{minor}")
    if len(payload) < start + hlen:
        raise NpyFormatError("truncated NPY header")
    try:
        header = ast.literal_eval(payload[start:start + hlen].decode("latin1").strip())
        descr = header["descr"]
        fortran = header["fortran_order"]
        shape = tuple(header["shape"])
    except (ValueError, SyntaxError, KeyError, TypeError) as exc:
        raise NpyFormatError(f"malformed NPY header: {exc}") from None
    if fortran:
        raise NpyFormatError("fortran-order arrays are not supported")
    if descr not in _SUPPORTED_DTYPES:
        raise NpyFormatError(f"unsupported dtype {descr!r}")
    dtype = np.dtype(_SUPPORTED_DTYPES[descr])
    count = 1
    for dim in shape:
        count *= dim
    data_start = start + hlen
    if len(payload) < data_start + count * dtype.itemsize:
        raise NpyFormatError("truncated NPY data")
    arr = np.frombuffer(payload, dtype=dtype, count=count, offset=data_start)
    return arr.reshape(shape).copy()


def write_npy(array):
    """Fixture writer: emit an NPY v1 buffer per the published format."""
    array = np.ascontiguousarray(array)
    descr = None
    for key, dt in _SUPPORTED_DTYPES.items():
        if np.dtype(dt) == array.dtype:
            descr = key
            break
    if descr is None:
        raise NpyFormatError(f"unsupported dtype for fixture: {array.dtype}")
    shape = array.shape
    shape_repr = f"({shape[0]},)" if len(shape) == 1 else repr(shape)
    header = f"{{'descr': {descr!r}, 'fortran_order': False, 'shape': {shape_repr}, }}"
    # pad so the data block starts 64-byte aligned, newline-terminated
    hlen = len(NPY_MAGIC) + 4 + len(header) + 1
    pad = (64 - hlen % 64) % 64
    header = header + " " * pad + "\n"
    out = io.BytesIO()
    out.write(NPY_MAGIC)
    out.write(struct.pack("<BBH", 1, 0, len(header)))
    out.write(header.encode("latin1"))
    out.write(array.tobytes())
    return out.getvalue()


def parse_npz(payload_or_path):
    """ZIP of NPY members -> {member name minus extension: array}."""
    if isinstance(payload_or_path, (bytes, bytearray)):
        buf = io.BytesIO(payload_or_path)
    else:
        buf = open(payload_or_path, "rb")
    try:
        with zipfile.ZipFile(buf) as zf:
            out = {}
            for name in zf.namelist():
                key = name[:-4] if name.endswith(".npy") else name
                out[key] = parse_npy(zf.read(name))
            return out
    except zipfile.BadZipFile as exc:
        raise DataError(f"malformed NPZ archive: {exc}") from None
    finally:
        buf.close()


def write_npz(arrays):
    """Fixture writer for NPZ: stored (uncompressed) NPY members."""
    out = io.BytesIO()
    with zipfile.ZipFile(out, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            zf.writestr(f"{name}.npy", write_npy(arr))
    return out.getvalue()


@dataclass
class DatasetSplit:
    images: np.ndarray            # (N, C, H, W) float64
    labels: np.ndarray            # (N,) int64
    n_classes: int
    split_name: str
    angle_transform: tuple | None = None   # ("affine", scale, offset)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError("images and labels disagree on sample count")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.n_classes):
            raise DataError("labels outside [0, n_classes)")

    def __len__(self):
        return len(self.labels)


_REQUIRED_KEYS = ("train_images", "train_labels", "val_images", "val_labels",
                  "test_images", "test_labels")

ANGLE_MODES = {"zero_to_pi": np.pi, "zero_to_2pi": 2 * np.pi}


def _to_chw(images):
    arr = np.asarray(images)
    if arr.ndim == 3:                      # (N, H, W) grayscale
        arr = arr[:, None, :, :]
    elif arr.ndim == 4:                    # (N, H, W, C) -> (N, C, H, W)
        arr = arr.transpose(0, 3, 1, 2)
    else:
        raise DataError(f"unsupported image array rank {arr.ndim}")
    arr = arr.astype(np.float64)
    if arr.max() > 1.0:                    # uint8-style storage
        arr = arr / 255.0
    return arr


def load_medmnist(path, name=None):
    """Load a MedMNIST-layout NPZ into train/val/test splits."""
    members = parse_npz(path)
    missing = [k for k in _REQUIRED_KEYS if k not in members]
    if missing:
        raise DataError(f"incomplete dataset: missing keys {missing}")
    labels = {s: np.asarray(members[f"{s}_labels"]).reshape(-1).astype(np.int64)
              for s in ("train", "val", "test")}
    n_classes = int(max(lab.max() for lab in labels.values())) + 1
    splits = {}
    for s in ("train", "val", "test"):
        splits[s] = DatasetSplit(
            images=_to_chw(members[f"{s}_images"]),
            labels=labels[s],
            n_classes=n_classes,
            split_name=s,
            meta={"dataset": name or "npz"},
        )
    if name and name in MEDMNIST_SPLIT_SIZES:
        expected = MEDMNIST_SPLIT_SIZES[name]
        actual = tuple(len(splits[s]) for s in ("train", "val", "test"))
        if actual != expected:
            raise DataError(
                f"{name} split sizes {actual} do not match published {expected}")
    return splits


def normalize_to_angles(split, mode="zero_to_pi"):
    """Affine map of [0, 1] pixels into rotation-angle range.

    The transform is recorded in the split so evaluation applies the very
    same map; invertible on [0, 1].
    """
    if mode not in ANGLE_MODES:
        raise DataError(f"unknown angle mode {mode!r}")
    if split.angle_transform is not None:
        raise DataError("split is already angle-normalized")
    lo, hi = split.images.min(), split.images.max()
    if len(split) and (lo < 0.0 or hi > 1.0):
        raise DataError(f"pixel values outside [0, 1]: [{lo}, {hi}]")
    scale = ANGLE_MODES[mode]
    return replace(split,
                   images=split.images * scale,
                   angle_transform=("affine", scale, 0.0),
                   meta={**split.meta, "angle_mode": mode})


def invert_angles(split):
    """Undo normalize_to_angles (used in round-trip checks)."""
    if split.angle_transform is None:
        raise DataError("split carries no angle transform")
    _, scale, offset = split.angle_transform
    return replace(split, images=(split.images - offset) / scale,
                   angle_transform=None)


def resize_nearest(images, out_size):
    """Nearest-neighbor upscale for the 224-pixel configurations."""
    n, c, h, w = images.shape
    rows = (np.arange(out_size) * h) // out_size
    cols = (np.arange(out_size) * w) // out_size
    return images[:, :, rows[:, None], cols[None, :]]


def resize_bilinear(images, out_size):
    """Bilinear upscale with edge clamping (alternate for the 224 configs)."""
    n, c, h, w = images.shape

    def axis_weights(in_size):
        pos = (np.arange(out_size) + 0.5) * in_size / out_size - 0.5
        lo = np.clip(np.floor(pos).astype(int), 0, in_size - 1)
        hi = np.clip(lo + 1, 0, in_size - 1)
        frac = np.clip(pos - lo, 0.0, 1.0)
        return lo, hi, frac

    r0, r1, fy = axis_weights(h)
    c0, c1, fx = axis_weights(w)
    fy = fy[:, None]
    fx = fx[None, :]
    top = images[:, :, r0][:, :, :, c0] * (1 - fx) + images[:, :, r0][:, :, :, c1] * fx
    bot = images[:, :, r1][:, :, :, c0] * (1 - fx) + images[:, :, r1][:, :, :, c1] * fx
    return top * (1 - fy) + bot * fy


RESIZE_MODES = {"nearest": resize_nearest, "bilinear": resize_bilinear}


def synthetic_dataset(seed, n_classes=4, n_per_class=30, image_size=8,
                      separability=1.0, in_channels=1):
    """Class-conditional stripe/blob images with controllable difficulty.

    The first classes carry patch-scale texture (stripe orientation,
    checkerboard, uniform brightness) so the signal survives token pooling;
    later classes are located blobs. Samples jitter the template amplitude
    and, below separability 1.0, mix in clipped pixel noise. Deterministic
    in seed; labels exactly balanced per split.
    """
    if not 2 <= n_classes <= 8:
        raise DataError("synthetic generator supports 2..8 classes")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    sigma = image_size / 8.0

    def blob(cy, cx):
        return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))

    templates = np.stack([
        (yy % 2 == 0).astype(float),            # horizontal stripes
        (xx % 2 == 0).astype(float),            # vertical stripes
        ((yy + xx) % 2 == 0).astype(float),     # checkerboard
        np.full((image_size, image_size), 0.85),
        blob(image_size // 4, image_size // 4),
        blob(image_size // 4, 3 * image_size // 4),
        blob(3 * image_size // 4, image_size // 4),
        blob(3 * image_size // 4, 3 * image_size // 4),
    ][:n_classes])
    noise_level = 0.6 * (1.0 - separability)

    def make(count_per_class, split_name):
        images = np.empty((count_per_class * n_classes, in_channels,
                           image_size, image_size))
        labels = np.empty(count_per_class * n_classes, dtype=np.int64)
        i = 0
        for cls in range(n_classes):
            for _ in range(count_per_class):
                amp = rng.uniform(0.7, 1.0)
                img = amp * templates[cls]
                if noise_level > 0:
                    img = img + rng.normal(0.0, noise_level, img.shape)
                images[i] = np.clip(img, 0.0, 1.0)[None]
                labels[i] = cls
                i += 1
        order = rng.permutation(len(labels))
        return DatasetSplit(images[order], labels[order], n_classes, split_name,
                            meta={"dataset": "synthetic", "seed": seed,
                                  "separability": separability})

    return (make(n_per_class, "train"),
            make(max(n_per_class // 4, 2), "val"),
            make(max(n_per_class // 2, 2), "test"))
