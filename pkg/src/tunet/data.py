"""Synthetic multi-structure phantom volumes, augmentation, and file I/O.

Volume file format ("TUVOL1"): one ASCII header line
    TUVOL1 <depth> <height> <width> <sx> <sy> <sz> <f32|f64|u8> <num_classes>
followed by the raw little-endian payload in C order. Intensity volumes use
f32 and num_classes 0; label volumes use u8 with their class count. A dataset
directory holds one intensity and one label file per case plus a manifest
listing case ids and split membership.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from tunet.errors import (
    ConfigError,
    DataError,
    IntegrityError,
    ParseError,
    ValidationError,
)
from tunet.metrics import LabelVolume

VOLUME_MAGIC = "TUVOL1"
MANIFEST_MAGIC = "TUMANIFEST1"

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u8": np.dtype("u1")}


# ---------------------------------------------------------------------------
# phantom generation
# ---------------------------------------------------------------------------


@dataclass
class StructureSpec:
    kind: str = "ellipsoid"  # ellipsoid | box
    size_range: tuple = (0.12, 0.3)  # in-plane half-extent as a fraction of the axis
    depth_range: tuple = (0.5, 0.9)  # along z; structures span most slices
    intensity_mean: float = 0.6
    intensity_std: float = 0.05


@dataclass
class PhantomSpec:
    shape: tuple = (4, 64, 64)  # (depth, height, width)
    spacing: tuple = (1.0, 1.0, 1.0)  # (sx, sy, sz) mm
    structures: list = field(default_factory=lambda: PhantomSpec.default_structures(3))
    noise_std: float = 0.05
    seed: int = 0

    @staticmethod
    def default_structures(count, size_range=(0.12, 0.3)):
        """Alternating ellipsoids and boxes with spread-out intensities."""
        out = []
        for i in range(count):
            kind = "ellipsoid" if i % 2 == 0 else "box"
            mean = 0.35 + 0.5 * (i / max(count - 1, 1))
            out.append(StructureSpec(kind, size_range=tuple(size_range), intensity_mean=mean))
        return out

    @property
    def num_classes(self):
        return len(self.structures) + 1

    def validate(self):
        if len(self.shape) != 3 or any(int(e) < 8 for e in self.shape):
            raise ConfigError(f"phantom extents must be >= 8 per axis, got {self.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ConfigError(f"spacing must be positive, got {self.spacing}")
        if self.num_classes > 256:
            raise ConfigError("label volumes are stored as u8; at most 255 structures")
        for st in self.structures:
            if st.kind not in ("ellipsoid", "box"):
                raise ConfigError(f"unknown structure kind {st.kind!r}")
            for rng_pair in (st.size_range, st.depth_range):
                lo, hi = rng_pair
                if not (0 < lo <= hi <= 0.95):
                    raise ConfigError(f"size fractions must lie in (0, 0.95], got {rng_pair}")
        return self


def structure_mask(shape, kind, center, radii):
    """Voxels whose index coordinates satisfy the structure's inequality."""
    zz, yy, xx = np.indices(shape)
    (cz, cy, cx), (rz, ry, rx) = center, radii
    if kind == "ellipsoid":
        return ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if kind == "box":
        return (np.abs(zz - cz) <= rz) & (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    raise ConfigError(f"unknown structure kind {kind!r}")


def _draw_structure(rng, st, shape, labels, image, label_value):
    radii = []
    for axis, ext in enumerate(shape):
        lo, hi = st.depth_range if axis == 0 else st.size_range
        radii.append(max(1.0, rng.uniform(lo, hi) * ext / 2.0))
    center = []
    for r, ext in zip(radii, shape):
        lo_c, hi_c = r, ext - 1 - r
        center.append(rng.uniform(lo_c, hi_c) if lo_c < hi_c else (ext - 1) / 2.0)
    mask = structure_mask(shape, st.kind, center, radii)
    labels[mask] = label_value
    image[mask] = st.intensity_mean + rng.normal(0.0, st.intensity_std, size=int(mask.sum()))


def generate_phantom(spec, rng=None):
    """Deterministic (intensity, labels) pair; every structure keeps > 0 voxels.

    Later structures overwrite earlier ones on overlap; draws that erase a
    structure completely are retried with the same stream, so the result is
    still a pure function of (spec, rng state).
    """
    spec.validate()
    if rng is None:
        rng = np.random.default_rng([int(spec.seed)])
    for _ in range(32):
        image = rng.normal(0.0, spec.noise_std, size=spec.shape)
        labels = np.zeros(spec.shape, dtype=np.int32)
        for i, st in enumerate(spec.structures, start=1):
            _draw_structure(rng, st, spec.shape, labels, image, i)
        present = set(np.unique(labels).tolist())
        if all(i in present for i in range(1, spec.num_classes)):
            return image.astype(np.float32), LabelVolume(labels, spec.spacing, spec.num_classes)
    raise DataError("could not place all structures without full overlap")


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentParams:
    flip_h: bool
    flip_v: bool
    angle_deg: float


def draw_augment_params(rng, max_angle=20.0):
    return AugmentParams(
        flip_h=bool(rng.random() < 0.5),
        flip_v=bool(rng.random() < 0.5),
        angle_deg=float(rng.uniform(-max_angle, max_angle)),
    )


def _rotation_sources(shape, angle_deg):
    h, w = shape
    t = np.deg2rad(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.indices((h, w))
    dy, dx = yy - cy, xx - cx
    sy = np.clip(cy + np.cos(t) * dy + np.sin(t) * dx, 0.0, h - 1.0)
    sx = np.clip(cx - np.sin(t) * dy + np.cos(t) * dx, 0.0, w - 1.0)
    return sy, sx


def _rotate_bilinear(arr, angle_deg):
    h, w = arr.shape
    sy, sx = _rotation_sources(arr.shape, angle_deg)
    y0 = np.minimum(np.floor(sy).astype(np.intp), h - 1)
    x0 = np.minimum(np.floor(sx).astype(np.intp), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    a = arr[y0, x0]
    top = a + fx * (arr[y0, x1] - a)
    a = arr[y1, x0]
    bot = a + fx * (arr[y1, x1] - a)
    return (top + fy * (bot - top)).astype(arr.dtype)


def _rotate_nearest(arr, angle_deg):
    sy, sx = _rotation_sources(arr.shape, angle_deg)
    iy = np.rint(sy).astype(np.intp)
    ix = np.rint(sx).astype(np.intp)
    return arr[iy, ix]


def apply_augment(image, labels, params):
    """Flips then rotation; intensity samples bilinearly, labels nearest, both
    clamped at the border so no new label values appear."""
    img, lab = image, labels
    if params.flip_h:
        img, lab = img[:, ::-1], lab[:, ::-1]
    if params.flip_v:
        img, lab = img[::-1, :], lab[::-1, :]
    if params.angle_deg != 0.0:
        img = _rotate_bilinear(np.ascontiguousarray(img), params.angle_deg)
        lab = _rotate_nearest(np.ascontiguousarray(lab), params.angle_deg)
    return np.ascontiguousarray(img), np.ascontiguousarray(lab)


def augment(image, labels, seed):
    """Random flip/rotation, a pure function of (inputs, seed)."""
    params = draw_augment_params(np.random.default_rng(seed))
    return apply_augment(image, labels, params)


def standardize_slice(x):
    """Zero-mean unit-variance normalization used at train and inference time."""
    x = np.asarray(x, dtype=np.float64)
    return (x - x.mean()) / (x.std() + 1e-6)


# ---------------------------------------------------------------------------
# volume files
# ---------------------------------------------------------------------------


def _dtype_tag(arr):
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    if np.issubdtype(arr.dtype, np.integer):
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValidationError(f"integer volume out of u8 range [{arr.min()}, {arr.max()}]")
        return "u8"
    raise ValidationError(f"unsupported volume dtype {arr.dtype}")


def save_volume(path, voxels, spacing, num_classes=0):
    voxels = np.asarray(voxels)
    if voxels.ndim != 3:
        raise ValidationError(f"volumes must be 3D, got shape {voxels.shape}")
    if any(s <= 0 for s in spacing):
        raise ValidationError(f"spacing must be positive, got {tuple(spacing)}")
    tag = _dtype_tag(voxels)
    d, h, w = voxels.shape
    sx, sy, sz = (float(s) for s in spacing)
    header = f"{VOLUME_MAGIC} {d} {h} {w} {sx!r} {sy!r} {sz!r} {tag} {int(num_classes)}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(voxels.astype(_DTYPE_TAGS[tag])).tobytes())


def load_volume(path):
    """Returns (voxels, spacing, num_classes); errors carry byte offsets."""
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise ParseError(f"{path}: no header line (no newline before byte {len(blob)})")
    header = blob[:nl].decode("latin-1")
    tokens = header.split(" ")
    offsets = []
    pos = 0
    for tok in tokens:
        offsets.append(pos)
        pos += len(tok) + 1
    if tokens[0] != VOLUME_MAGIC:
        raise ParseError(f"{path}: bad magic {tokens[0]!r} at byte 0")
    if len(tokens) != 9:
        raise ParseError(f"{path}: header has {len(tokens)} fields, expected 9 (at byte 0)")

    def intfield(i, name):
        try:
            return int(tokens[i])
        except ValueError:
            raise ParseError(
                f"{path}: bad {name} {tokens[i]!r} at byte {offsets[i]}"
            ) from None

    def floatfield(i, name):
        try:
            return float(tokens[i])
        except ValueError:
            raise ParseError(
                f"{path}: bad {name} {tokens[i]!r} at byte {offsets[i]}"
            ) from None

    d, h, w = (intfield(i, "extent") for i in (1, 2, 3))
    sx, sy, sz = (floatfield(i, "spacing") for i in (4, 5, 6))
    tag = tokens[7]
    k = intfield(8, "class count")
    if d <= 0 or h <= 0 or w <= 0:
        raise ValidationError(f"{path}: non-positive extents {d}x{h}x{w}")
    if sx <= 0 or sy <= 0 or sz <= 0:
        raise ValidationError(f"{path}: non-positive spacing ({sx}, {sy}, {sz})")
    if tag not in _DTYPE_TAGS:
        raise ParseError(f"{path}: unknown element type {tag!r} at byte {offsets[7]}")
    dtype = _DTYPE_TAGS[tag]
    payload = blob[nl + 1 :]
    expected = d * h * w * dtype.itemsize
    if len(payload) != expected:
        raise IntegrityError(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected}"
        )
    voxels = np.frombuffer(payload, dtype=dtype).reshape(d, h, w)
    if tag == "u8" and k > 0 and voxels.size and voxels.max() >= k:
        raise IntegrityError(f"{path}: label {voxels.max()} >= class count {k}")
    return voxels.copy(), (sx, sy, sz), k


def save_label_volume(path, volume):
    save_volume(path, volume.voxels, volume.spacing, volume.num_classes)


def load_label_volume(path):
    voxels, spacing, k = load_volume(path)
    if k < 1:
        raise ValidationError(f"{path}: label volume needs a positive class count")
    return LabelVolume(voxels.astype(np.int32), spacing, k)


def save_image_volume(path, image, spacing):
    save_volume(path, np.asarray(image, dtype=np.float32), spacing, 0)


def load_image_volume(path):
    voxels, spacing, _ = load_volume(path)
    return voxels.astype(np.float32), spacing


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list

    def validate(self):
        all_ids = self.train + self.val + self.test
        if len(set(all_ids)) != len(all_ids):
            raise IntegrityError("split lists overlap or repeat a case id")
        return self

    def all_cases(self):
        return self.train + self.val + self.test

    def of(self, name):
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


def write_manifest(path, split):
    split.validate()
    lines = [MANIFEST_MAGIC]
    for name in ("train", "val", "test"):
        for cid in split.of(name):
            lines.append(f"{cid} {name}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifest(path):
    with open(path, encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh.readlines()]
    lines = [ln for ln in lines if ln]
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise ParseError(f"{path}: bad manifest magic at byte 0")
    split = DatasetSplit([], [], [])
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 2 or parts[1] not in ("train", "val", "test"):
            raise ParseError(f"{path}: bad manifest line {ln!r}")
        split.of(parts[1]).append(parts[0])
    return split.validate()


def _case_paths(root, case_id):
    return os.path.join(root, f"{case_id}_img.tuvol"), os.path.join(root, f"{case_id}_lbl.tuvol")


def split_cases(case_ids, fractions, rng):
    """Shuffle then partition by fractions; train is never left empty."""
    ids = list(case_ids)
    rng.shuffle(ids)
    n = len(ids)
    n_train = max(1, int(round(fractions[0] * n)))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return DatasetSplit(ids[:n_train], ids[n_train : n_train + n_val], ids[n_train + n_val :])


def generate_dataset(out_dir, spec, num_cases, split_fractions=(0.6, 0.2, 0.2)):
    """Write num_cases phantoms plus a manifest; idempotent for a fixed spec."""
    spec.validate()
    if num_cases < 1:
        raise ConfigError(f"need at least one case, got {num_cases}")
    os.makedirs(out_dir, exist_ok=True)
    case_ids = [f"case_{i:03d}" for i in range(num_cases)]
    for i, cid in enumerate(case_ids):
        rng = np.random.default_rng([int(spec.seed), i])
        image, labels = generate_phantom(spec, rng=rng)
        img_path, lbl_path = _case_paths(out_dir, cid)
        save_image_volume(img_path, image, spec.spacing)
        save_label_volume(lbl_path, labels)
    split_rng = np.random.default_rng([int(spec.seed), 0x5B117])
    split = split_cases(case_ids, split_fractions, split_rng)
    write_manifest(os.path.join(out_dir, "manifest.txt"), split)
    return split


class Dataset:
    """Read-only view over a generated dataset directory."""

    def __init__(self, root):
        self.root = root
        manifest = os.path.join(root, "manifest.txt")
        if not os.path.exists(manifest):
            raise DataError(f"no manifest at {manifest}")
        self.split = load_manifest(manifest)

    def load_case(self, case_id):
        img_path, lbl_path = _case_paths(self.root, case_id)
        if not os.path.exists(img_path) or not os.path.exists(lbl_path):
            raise DataError(f"case {case_id} files missing under {self.root}")
        image, spacing = load_image_volume(img_path)
        labels = load_label_volume(lbl_path)
        if image.shape != labels.shape or spacing != labels.spacing:
            raise IntegrityError(f"case {case_id}: intensity/label geometry mismatch")
        return image, labels

    def eval_cases(self, split_name):
        out = []
        for cid in self.split.of(split_name):
            image, labels = self.load_case(cid)
            out.append((cid, image, labels))
        return out

    def training_slices(self, split_name="train"):
        """All 2D axial (image, label) slice pairs of the chosen split."""
        out = []
        for cid in self.split.of(split_name):
            image, labels = self.load_case(cid)
            for z in range(image.shape[0]):
                out.append((image[z], labels.voxels[z]))
        return out

    @property
    def num_classes(self):
        first = self.split.all_cases()[0]
        _, lbl_path = _case_paths(self.root, first)
        return load_label_volume(lbl_path).num_classes
