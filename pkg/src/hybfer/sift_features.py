"""SIFT descriptor machinery: gradients, difference-of-Gaussians keypoint
detection, dominant orientation, the 128-d descriptor, a dense 4x4-region
variant, K-means codebook fitting, and bag-of-keypoints encoding.

Images are 2D float arrays indexed [row, col] with x = col and y = row.
Intensities are assumed to lie in [0, 1]; the keypoint contrast threshold
is calibrated to that range.
"""

from dataclasses import dataclass, field

import struct

import numpy as np

from .errors import DataError, FormatError, ShapeError

TWO_PI = 2.0 * np.pi

# detector conventions, adapted to 48x48 inputs
NUM_OCTAVES = 3
SCALES_PER_OCTAVE = 3
BASE_SIGMA = 1.6
CONTRAST_THRESHOLD = 0.03
EDGE_RATIO = 10.0

DESCRIPTOR_CELLS = 4
DESCRIPTOR_BINS = 8
DESCRIPTOR_LEN = DESCRIPTOR_CELLS * DESCRIPTOR_CELLS * DESCRIPTOR_BINS
DESCRIPTOR_CLAMP = 0.2
FLAT_NORM = 1e-12

DENSE_IMAGE_SIZE = 48
DENSE_REGION = 12

CODEBOOK_MAGIC = b"BOVW0001"


@dataclass
class Keypoint:
    """Scale-space interest point in original-image coordinates."""

    x: float
    y: float
    scale: float
    orientation: float = 0.0


@dataclass
class Codebook:
    """K centroids of descriptor space, plus the fitting objective trace."""

    centroids: np.ndarray
    objective_trace: list = field(default_factory=list, repr=False, compare=False)

    @property
    def k(self):
        return self.centroids.shape[0]


# ---------------------------------------------------------------------------
# gradients


def _gradient_xy(image):
    """(d/dx, d/dy): central differences inside, one-sided at the borders."""
    img = np.asarray(image, dtype=np.float64)
    gx = np.empty_like(img)
    gy = np.empty_like(img)
    gx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    gx[:, 0] = img[:, 1] - img[:, 0]
    gx[:, -1] = img[:, -1] - img[:, -2]
    gy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])
    gy[0, :] = img[1, :] - img[0, :]
    gy[-1, :] = img[-1, :] - img[-2, :]
    return gx, gy


def image_gradients(image):
    """Per-pixel gradient magnitude and orientation.

    Orientation is atan2(dy, dx) wrapped into [0, 2*pi); magnitude is the
    Euclidean norm of the gradient vector.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ShapeError(f"need a 2D image of at least 3x3, got {img.shape}")
    gx, gy = _gradient_xy(img)
    magnitude = np.hypot(gx, gy)
    orientation = np.mod(np.arctan2(gy, gx), TWO_PI)
    return magnitude, orientation


# ---------------------------------------------------------------------------
# scale space


def _gaussian_blur(img, sigma):
    radius = max(1, int(np.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(t * t) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    out = _conv1d_edge(img, kernel, axis=0)
    return _conv1d_edge(out, kernel, axis=1)


def _conv1d_edge(img, kernel, axis):
    radius = (kernel.size - 1) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (radius, radius)
    padded = np.pad(img, pad, mode="edge")
    out = np.zeros_like(img)
    for j, kv in enumerate(kernel):
        sl = [slice(None), slice(None)]
        sl[axis] = slice(j, j + img.shape[axis])
        out += kv * padded[tuple(sl)]
    return out


def _build_dog_pyramid(image):
    """Per octave: list of 5 DoG levels (6 Gaussian levels differenced)."""
    k = 2.0 ** (1.0 / SCALES_PER_OCTAVE)
    base = _gaussian_blur(np.asarray(image, dtype=np.float64), BASE_SIGMA)
    pyramid = []
    for _ in range(NUM_OCTAVES):
        gaussians = [base]
        for i in range(1, SCALES_PER_OCTAVE + 3):
            # incremental blur so level i carries total sigma BASE_SIGMA*k^i
            inc = BASE_SIGMA * np.sqrt(k ** (2 * i) - k ** (2 * i - 2))
            gaussians.append(_gaussian_blur(gaussians[-1], inc))
        dogs = np.stack([gaussians[i + 1] - gaussians[i] for i in range(len(gaussians) - 1)])
        pyramid.append(dogs)
        # level 3 carries 2x the base blur: downsampling restores BASE_SIGMA
        base = gaussians[SCALES_PER_OCTAVE][::2, ::2]
    return pyramid


def _localize(dogs, s, y, x):
    """Quadratic refinement of an extremum; returns None when it drifts out."""
    num_levels, h, w = dogs.shape
    for _ in range(5):
        c = dogs[s, y, x]
        gx = 0.5 * (dogs[s, y, x + 1] - dogs[s, y, x - 1])
        gy = 0.5 * (dogs[s, y + 1, x] - dogs[s, y - 1, x])
        gs = 0.5 * (dogs[s + 1, y, x] - dogs[s - 1, y, x])
        hxx = dogs[s, y, x + 1] - 2 * c + dogs[s, y, x - 1]
        hyy = dogs[s, y + 1, x] - 2 * c + dogs[s, y - 1, x]
        hss = dogs[s + 1, y, x] - 2 * c + dogs[s - 1, y, x]
        hxy = 0.25 * (dogs[s, y + 1, x + 1] - dogs[s, y + 1, x - 1]
                      - dogs[s, y - 1, x + 1] + dogs[s, y - 1, x - 1])
        hxs = 0.25 * (dogs[s + 1, y, x + 1] - dogs[s + 1, y, x - 1]
                      - dogs[s - 1, y, x + 1] + dogs[s - 1, y, x - 1])
        hys = 0.25 * (dogs[s + 1, y + 1, x] - dogs[s + 1, y - 1, x]
                      - dogs[s - 1, y + 1, x] + dogs[s - 1, y - 1, x])
        grad = np.array([gx, gy, gs])
        hess = np.array([[hxx, hxy, hxs], [hxy, hyy, hys], [hxs, hys, hss]])
        try:
            offset = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(offset) <= 0.5):
            value = c + 0.5 * float(grad @ offset)
            return offset[0], offset[1], offset[2], value, (hxx, hyy, hxy)
        x += int(round(offset[0]))
        y += int(round(offset[1]))
        s += int(round(offset[2]))
        if not (1 <= s < num_levels - 1 and 1 <= y < h - 1 and 1 <= x < w - 1):
            return None
    return None


def detect_keypoints(image):
    """Difference-of-Gaussians extrema with contrast and edge filtering.

    Returns a possibly empty list of Keypoint with orientation assigned.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (DENSE_IMAGE_SIZE, DENSE_IMAGE_SIZE):
        raise ShapeError(f"expected a 48x48 image, got {img.shape}")
    k = 2.0 ** (1.0 / SCALES_PER_OCTAVE)
    edge_limit = (EDGE_RATIO + 1.0) ** 2 / EDGE_RATIO
    keypoints = []
    for octave, dogs in enumerate(_build_dog_pyramid(img)):
        _, h, w = dogs.shape
        if h < 3 or w < 3:
            continue
        for s in range(1, SCALES_PER_OCTAVE + 1):
            center = dogs[s, 1:-1, 1:-1]
            is_max = np.ones(center.shape, dtype=bool)
            is_min = np.ones(center.shape, dtype=bool)
            for ds in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        if ds == 0 and dy == 0 and dx == 0:
                            continue
                        nb = dogs[s + ds, 1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
                        is_max &= center > nb
                        is_min &= center < nb
            for yy, xx in np.argwhere(is_max | is_min):
                fit = _localize(dogs, s, int(yy) + 1, int(xx) + 1)
                if fit is None:
                    continue
                ox, oy, osc, value, (hxx, hyy, hxy) = fit
                if abs(value) < CONTRAST_THRESHOLD:
                    continue
                trace = hxx + hyy
                det = hxx * hyy - hxy * hxy
                if det <= 0 or trace * trace >= edge_limit * det:
                    continue
                x_img = (xx + 1 + ox) * (2 ** octave)
                y_img = (yy + 1 + oy) * (2 ** octave)
                if not (0 <= x_img < DENSE_IMAGE_SIZE and 0 <= y_img < DENSE_IMAGE_SIZE):
                    continue
                scale = BASE_SIGMA * (2.0 ** octave) * k ** (s + osc)
                kp = Keypoint(float(x_img), float(y_img), float(scale))
                kp.orientation = dominant_orientation(img, kp)
                keypoints.append(kp)
    return keypoints


# ---------------------------------------------------------------------------
# orientation and descriptor


def dominant_orientation(image, keypoint):
    """Peak of a 36-bin, Gaussian-weighted gradient orientation histogram.

    The histogram is weighted by gradient magnitude times a spatial Gaussian
    of sigma = 1.5 * keypoint.scale. The winning bin is refined by fitting a
    parabola through it and its two neighbors. A neighborhood with no
    gradient energy returns 0 by convention.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    gx, gy = _gradient_xy(img)
    sigma = 1.5 * keypoint.scale
    radius = max(1, int(round(3.0 * sigma)))
    x0 = max(0, int(np.floor(keypoint.x)) - radius)
    x1 = min(w - 1, int(np.floor(keypoint.x)) + radius)
    y0 = max(0, int(np.floor(keypoint.y)) - radius)
    y1 = min(h - 1, int(np.floor(keypoint.y)) + radius)
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    dx = xs - keypoint.x
    dy = ys - keypoint.y
    weight = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
    patch_gx = gx[y0:y1 + 1, x0:x1 + 1]
    patch_gy = gy[y0:y1 + 1, x0:x1 + 1]
    mag = np.hypot(patch_gx, patch_gy) * weight
    if mag.sum() < FLAT_NORM:
        return 0.0
    ori = np.mod(np.arctan2(patch_gy, patch_gx), TWO_PI)
    nbins = 36
    bin_width = TWO_PI / nbins
    idx = np.minimum((ori / bin_width).astype(np.int64), nbins - 1)
    hist = np.zeros(nbins)
    np.add.at(hist, idx.ravel(), mag.ravel())
    peak = int(np.argmax(hist))
    if hist[peak] <= 0.0:
        return 0.0
    left = hist[(peak - 1) % nbins]
    right = hist[(peak + 1) % nbins]
    denom = left - 2.0 * hist[peak] + right
    shift = 0.0 if abs(denom) < FLAT_NORM else 0.5 * (left - right) / denom
    return float(np.mod((peak + 0.5 + shift) * bin_width, TWO_PI))


def _bilinear(field, ys, xs):
    h, w = field.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    return (field[y0, x0] * (1 - fy) * (1 - fx)
            + field[y0, x1] * (1 - fy) * fx
            + field[y1, x0] * fy * (1 - fx)
            + field[y1, x1] * fy * fx)


def _describe(gx, gy, center, window, orientation):
    cx, cy = float(center[0]), float(center[1])
    spacing = float(window) / DENSE_REGION
    offs = (np.arange(DENSE_REGION) - (DENSE_REGION - 1) / 2.0) * spacing
    u, v = np.meshgrid(offs, offs)  # u along x, v along y
    cos_t = np.cos(orientation)
    sin_t = np.sin(orientation)
    xs = cx + u * cos_t - v * sin_t
    ys = cy + u * sin_t + v * cos_t
    sgx = _bilinear(gx, ys, xs)
    sgy = _bilinear(gy, ys, xs)
    mag = np.hypot(sgx, sgy)
    phi = np.mod(np.arctan2(sgy, sgx) - orientation, TWO_PI)

    sigma = 0.5 * float(window)
    weight = np.exp(-(u * u + v * v) / (2.0 * sigma * sigma))
    contrib = mag * weight

    cell_size = spacing * (DENSE_REGION / DESCRIPTOR_CELLS)
    cu = u / cell_size + (DESCRIPTOR_CELLS - 1) / 2.0
    cv = v / cell_size + (DESCRIPTOR_CELLS - 1) / 2.0
    ob = phi / (TWO_PI / DESCRIPTOR_BINS)

    cu0 = np.floor(cu)
    cv0 = np.floor(cv)
    ob0 = np.floor(ob)
    fu = cu - cu0
    fv = cv - cv0
    fb = ob - ob0

    hist = np.zeros((DESCRIPTOR_CELLS, DESCRIPTOR_CELLS, DESCRIPTOR_BINS))
    for du, wu in ((0, 1.0 - fu), (1, fu)):
        col = (cu0 + du).astype(np.int64)
        for dv, wv in ((0, 1.0 - fv), (1, fv)):
            row = (cv0 + dv).astype(np.int64)
            inside = (col >= 0) & (col < DESCRIPTOR_CELLS) & (row >= 0) & (row < DESCRIPTOR_CELLS)
            for db, wb in ((0, 1.0 - fb), (1, fb)):
                bins = ((ob0 + db).astype(np.int64)) % DESCRIPTOR_BINS
                vals = contrib * wu * wv * wb
                np.add.at(hist, (row[inside], col[inside], bins[inside]), vals[inside])

    desc = hist.reshape(DESCRIPTOR_LEN)
    norm = np.linalg.norm(desc)
    if norm < FLAT_NORM:
        return np.zeros(DESCRIPTOR_LEN)
    desc = desc / norm
    desc = np.minimum(desc, DESCRIPTOR_CLAMP)
    return desc / np.linalg.norm(desc)


def sift_descriptor(image, center, window=12.0, orientation=0.0):
    """128-d descriptor of a window around center = (x, y).

    Gradients are rotated into the keypoint frame, accumulated into a 4x4
    grid of cells with 8 orientation bins each via soft trilinear binning,
    spatially weighted by a Gaussian of sigma = window/2, then normalized
    (L2, clamp at 0.2, L2 again). A flat window yields the zero vector.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ShapeError(f"need a 2D image of at least 3x3, got {img.shape}")
    gx, gy = _gradient_xy(img)
    return _describe(gx, gy, center, window, orientation)


def dense_sift(image):
    """2048 features: upright descriptors of the 16 non-overlapping 12x12
    regions of a 48x48 image, concatenated in row-major region order."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (DENSE_IMAGE_SIZE, DENSE_IMAGE_SIZE):
        raise ShapeError(f"expected a 48x48 image, got {img.shape}")
    gx, gy = _gradient_xy(img)
    blocks = []
    half = (DENSE_REGION - 1) / 2.0
    for row in range(DESCRIPTOR_CELLS):
        for col in range(DESCRIPTOR_CELLS):
            center = (col * DENSE_REGION + half, row * DENSE_REGION + half)
            blocks.append(_describe(gx, gy, center, DENSE_REGION, 0.0))
    return np.concatenate(blocks)


def extract_descriptors(image):
    """Detected keypoints described with scale-proportional windows."""
    img = np.asarray(image, dtype=np.float64)
    gx, gy = _gradient_xy(img)
    descs = []
    for kp in detect_keypoints(img):
        window = np.clip(DENSE_REGION * kp.scale / BASE_SIGMA, DENSE_REGION, DENSE_IMAGE_SIZE)
        descs.append(_describe(gx, gy, (kp.x, kp.y), window, kp.orientation))
    return descs


# ---------------------------------------------------------------------------
# codebook


def _sq_dists(points, centroids):
    # |p|^2 - 2 p.c + |c|^2, clipped against tiny negative round-off
    d2 = (np.sum(points * points, axis=1)[:, None]
          - 2.0 * points @ centroids.T
          + np.sum(centroids * centroids, axis=1)[None, :])
    return np.maximum(d2, 0.0)


def _kmeans_pp(points, k, rng):
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centroids[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=closest / total))
        centroids[i] = points[pick]
        closest = np.minimum(closest, _sq_dists(points, centroids[i:i + 1])[:, 0])
    return centroids


def kmeans_fit(descriptors, k, rng):
    """Lloyd iterations from a k-means++ start.

    Stops when the relative objective improvement drops below 1e-4 or after
    100 iterations. Clusters that lose all their points are reseeded to the
    point farthest from its assigned centroid.
    """
    points = np.asarray(descriptors, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError(f"descriptors must form an NxD matrix, got {points.shape}")
    n = points.shape[0]
    if k < 1:
        raise DataError(f"cluster count must be at least 1, got {k}")
    if n < k:
        raise DataError(f"need at least {k} descriptors to fit {k} clusters, got {n}")

    centroids = _kmeans_pp(points, k, rng)
    trace = []
    prev = None
    for _ in range(100):
        d2 = _sq_dists(points, centroids)
        assign = np.argmin(d2, axis=1)
        point_cost = d2[np.arange(n), assign]
        objective = float(point_cost.sum())
        trace.append(objective)
        if prev is not None and abs(prev - objective) < 1e-4 * max(prev, FLAT_NORM):
            break
        prev = objective

        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        cost = point_cost.copy()
        for ci in np.flatnonzero(~nonempty):
            far = int(np.argmax(cost))
            centroids[ci] = points[far]
            cost[far] = 0.0
    return Codebook(centroids, trace)


def bag_of_keypoints(descriptors, codebook):
    """Raw count histogram of nearest-centroid assignments.

    Euclidean distance, ties to the lowest centroid index; an empty
    descriptor list encodes as the zero vector.
    """
    k = codebook.k
    if k < 1:
        raise DataError("codebook is empty")
    if len(descriptors) == 0:
        return np.zeros(k)
    points = np.asarray(descriptors, dtype=np.float64)
    assign = np.argmin(_sq_dists(points, np.asarray(codebook.centroids, dtype=np.float64)), axis=1)
    return np.bincount(assign, minlength=k).astype(np.float64)


# ---------------------------------------------------------------------------
# codebook file format


def save_codebook(path, codebook):
    """Binary layout: magic "BOVW0001", K and dim as u64 LE, f32 LE rows."""
    cents = np.asarray(codebook.centroids, dtype=np.float64)
    if cents.ndim != 2 or cents.shape[0] < 1:
        raise ShapeError(f"centroids must form a nonempty KxD matrix, got {cents.shape}")
    if not np.all(np.isfinite(cents)):
        raise DataError("centroids contain non-finite values")
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_MAGIC)
        fh.write(struct.pack("<QQ", cents.shape[0], cents.shape[1]))
        fh.write(np.ascontiguousarray(cents, dtype="<f4").tobytes())


def load_codebook(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CODEBOOK_MAGIC:
        raise FormatError("bad codebook magic", offset=0)
    if len(blob) < 24:
        raise FormatError("truncated codebook header", offset=len(blob))
    k, dim = struct.unpack_from("<QQ", blob, 8)
    if k < 1 or dim < 1:
        raise FormatError(f"invalid codebook dimensions {k}x{dim}", offset=8)
    expected = 24 + k * dim * 4
    if len(blob) != expected:
        raise FormatError(
            f"codebook payload is {len(blob) - 24} bytes, expected {k * dim * 4}",
            offset=min(len(blob), expected))
    cents = np.frombuffer(blob, dtype="<f4", offset=24).reshape(k, dim).astype(np.float64)
    if not np.all(np.isfinite(cents)):
        raise FormatError("codebook contains non-finite centroids", offset=24)
    return Codebook(cents)
