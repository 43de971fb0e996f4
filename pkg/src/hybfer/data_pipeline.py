"""Dataset ingestion, per-image standardization, the ten-transform
augmentation set, and k-fold split generation.

The CSV schema is `emotion,pixels,Usage` with 2304 space-separated pixel
values per row. Images come out as 48x48 float32 in [0, 1]. The same schema
carries the 6-class pre-cropped corpus (pass num_classes=6) and augmentation
caches written by write_fer_csv.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParseError, ShapeError

IMAGE_SIZE = 48
PIXELS_PER_IMAGE = IMAGE_SIZE * IMAGE_SIZE

FER_CLASS_NAMES = ("Angry", "Disgust", "Fear", "Happy", "Sad", "Surprise", "Neutral")

SPLIT_BY_USAGE = {
    "Training": "train",
    "PublicTest": "public_test",
    "PrivateTest": "private_test",
}
USAGE_BY_SPLIT = {split: usage for usage, split in SPLIT_BY_USAGE.items()}

ROTATION_LIMIT_DEG = 30.0
SHEAR_FACTOR = 0.2
ZOOM_CROP = 38
ZOOM_OFFSETS = ((0, 0), (0, 10), (10, 0), (10, 10))

STD_FLOOR = 1e-6


@dataclass
class LabeledSample:
    image: np.ndarray  # 48x48 intensities in [0, 1]
    label: int
    split: str


@dataclass
class DatasetSplits:
    train: list
    public_test: list
    private_test: list

    def all_samples(self):
        return self.train + self.public_test + self.private_test


def class_names(num_classes=7):
    if num_classes not in (6, 7):
        raise DataError(f"num_classes must be 6 or 7, got {num_classes}")
    return FER_CLASS_NAMES[:num_classes]


def expression_name(index, num_classes=7):
    names = class_names(num_classes)
    if not 0 <= index < num_classes:
        raise DataError(f"label {index} outside [0, {num_classes})")
    return names[index]


def expression_index(name, num_classes=7):
    names = class_names(num_classes)
    if name not in names:
        raise DataError(f"unknown expression name {name!r}")
    return names.index(name)


# ---------------------------------------------------------------------------
# CSV ingestion


def load_fer_csv(path, num_classes=7):
    """Parse the `emotion,pixels,Usage` CSV into per-usage splits.

    Labels must lie in [0, num_classes); pixel fields must hold exactly 2304
    integers in [0, 255]. Any malformed row raises a parse error carrying the
    offending file line number.
    """
    class_names(num_classes)  # validates num_classes
    splits = DatasetSplits([], [], [])
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "emotion,pixels,Usage":
            raise ParseError(f"expected header 'emotion,pixels,Usage', got {header!r}", row=1)
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ParseError(f"expected 3 comma-separated fields, got {len(parts)}", row=lineno)
            raw_label, raw_pixels, usage = parts
            try:
                label = int(raw_label)
            except ValueError:
                raise ParseError(f"label {raw_label!r} is not an integer", row=lineno) from None
            if not 0 <= label < num_classes:
                raise ParseError(f"label {label} outside [0, {num_classes})", row=lineno)
            try:
                pixels = np.array(raw_pixels.split(), dtype=np.int64)
            except ValueError:
                raise ParseError("pixel field contains a non-integer", row=lineno) from None
            if pixels.size != PIXELS_PER_IMAGE:
                raise ParseError(f"expected {PIXELS_PER_IMAGE} pixels, got {pixels.size}", row=lineno)
            if pixels.size and (pixels.min() < 0 or pixels.max() > 255):
                raise ParseError("pixel value outside [0, 255]", row=lineno)
            usage = usage.strip()
            if usage not in SPLIT_BY_USAGE:
                raise ParseError(f"unknown usage tag {usage!r}", row=lineno)
            split = SPLIT_BY_USAGE[usage]
            image = (pixels.astype(np.float32) / np.float32(255.0)).reshape(IMAGE_SIZE, IMAGE_SIZE)
            getattr(splits, split).append(LabeledSample(image, label, split))
    return splits


def write_fer_csv(path, samples):
    """Write samples back out in the input CSV schema (deterministic)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("emotion,pixels,Usage\n")
        for sample in samples:
            if sample.split not in USAGE_BY_SPLIT:
                raise DataError(f"unknown split {sample.split!r}")
            pixels = np.rint(np.asarray(sample.image, dtype=np.float64) * 255.0)
            pixels = np.clip(pixels, 0, 255).astype(np.int64).ravel()
            fh.write(f"{sample.label},{' '.join(map(str, pixels))},{USAGE_BY_SPLIT[sample.split]}\n")


# ---------------------------------------------------------------------------
# normalization


def normalize_image(image):
    """Standardize one image to zero mean and unit variance.

    A constant image maps to all zeros: the divisor is floored at 1e-6.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"expected a 48x48 image, got {img.shape}")
    centered = img - img.mean()
    return centered / max(float(img.std()), STD_FLOOR)


# ---------------------------------------------------------------------------
# augmentation


def _sample_bilinear(image, ys, xs):
    h, w = image.shape
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    return (image[y0, x0] * (1 - fy) * (1 - fx)
            + image[y0, x1] * (1 - fy) * fx
            + image[y1, x0] * fy * (1 - fx)
            + image[y1, x1] * fy * fx)


def _warp_affine(image, matrix):
    """Inverse-map affine warp about the image center, zero outside."""
    h, w = image.shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    yo, xo = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xo - cx
    dy = yo - cy
    xi = matrix[0, 0] * dx + matrix[0, 1] * dy + cx
    yi = matrix[1, 0] * dx + matrix[1, 1] * dy + cy
    inside = (xi >= 0.0) & (xi <= w - 1.0) & (yi >= 0.0) & (yi <= h - 1.0)
    return np.where(inside, _sample_bilinear(image, yi, xi), 0.0)


def _resize_bilinear(patch, out_h, out_w):
    ys = np.linspace(0.0, patch.shape[0] - 1.0, out_h)
    xs = np.linspace(0.0, patch.shape[1] - 1.0, out_w)
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return _sample_bilinear(patch, grid_y, grid_x)


def draw_rotation_angle(rng):
    """Degrees strictly inside (-30, 30); the closed endpoint is redrawn."""
    while True:
        angle = float(rng.uniform(-ROTATION_LIMIT_DEG, ROTATION_LIMIT_DEG))
        if -ROTATION_LIMIT_DEG < angle < ROTATION_LIMIT_DEG:
            return angle


def augment_ten(image, rng):
    """The ten augmentation variants of one image, in fixed order.

    [0] horizontal flip; [1-4] rotations by four independently drawn random
    angles (bilinear, zero fill); [5] center shear of factor 0.2; [6-9]
    corner zooms: 38x38 crops anchored at the four corners, rescaled to
    48x48. Identical seeds produce bit-identical output lists.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"expected a 48x48 image, got {img.shape}")
    out = [img[:, ::-1].copy()]
    for _ in range(4):
        theta = np.deg2rad(draw_rotation_angle(rng))
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        out.append(_warp_affine(img, rot))
    out.append(_warp_affine(img, np.array([[1.0, SHEAR_FACTOR], [0.0, 1.0]])))
    for oy, ox in ZOOM_OFFSETS:
        crop = img[oy:oy + ZOOM_CROP, ox:ox + ZOOM_CROP]
        out.append(_resize_bilinear(crop, IMAGE_SIZE, IMAGE_SIZE))
    return out


# ---------------------------------------------------------------------------
# cross-validation folds


def kfold_indices(n, k, rng):
    """k disjoint index arrays covering [0, n), sizes differing by at most 1."""
    if not 1 < k <= n:
        raise DataError(f"fold count must satisfy 1 < k <= n, got k={k}, n={n}")
    return np.array_split(rng.permutation(n), k)
