"""The three expression-recognition model variants, their training loop,
probability aggregation, and checkpoint persistence.

A model is a plain dict of named parameter arrays plus the sizes needed to
wire them together. The trunk is six 3x3 convolutions (two per pooling
stage), a 2048-wide dense layer, and a softmax head. Hybrid variants add a
side branch: a 2048-d gradient-feature vector is standardized, passed
through a 4096-wide dense layer (L2-penalized), and concatenated with the
trunk output before the head. All activations are Leaky ReLU. Every size
scales down uniformly, which the gradient tests use to check the full graph
against finite differences on a tiny clone.
"""

from dataclasses import dataclass, field

import struct

import numpy as np

from . import nn_core as nn
from . import sift_features as sf
from .errors import DataError, DivergenceError, FormatError, ShapeError

VARIANTS = ("cnn_only", "cnn_sift", "cnn_dsift")
VARIANT_CODES = {"cnn_only": 0, "cnn_sift": 1, "cnn_dsift": 2}
CODE_VARIANTS = {code: name for name, code in VARIANT_CODES.items()}

FEATURE_SOURCES = ("none", "sift_bag", "dense_sift")

SIDE_L2 = 0.01  # loss += SIDE_L2 * sum(w^2) over the side branch weights

CHECKPOINT_MAGIC = b"HYBFER01"

_CONV_NAMES = ("conv1", "conv2", "conv3", "conv4", "conv5", "conv6")
_BUFFER_NAMES = ("side_norm.mean", "side_norm.std")

_STD_FLOOR = 1e-6


@dataclass
class ModelGraph:
    variant: str
    num_classes: int
    params: dict
    image_size: int = 48
    base_filters: int = 64
    trunk_dense: int = 2048
    side_dim: int = 2048
    side_width: int = 4096
    drop_conv: float = 0.25
    drop_dense: float = 0.5

    @property
    def is_hybrid(self):
        return self.variant != "cnn_only"

    def trainable_names(self):
        return sorted(name for name in self.params if name not in _BUFFER_NAMES)


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    augment: bool = False
    feature_source: str = "none"
    codebook: sf.Codebook = None
    stop_train_acc: float = None  # early stop once inference-mode train accuracy reaches this

    def __post_init__(self):
        if self.epochs < 1:
            raise DataError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.learning_rate <= 0.0:
            raise DataError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.feature_source not in FEATURE_SOURCES:
            raise DataError(f"unknown feature source {self.feature_source!r}")
        if self.feature_source == "sift_bag" and self.codebook is None:
            raise DataError("feature source sift_bag needs a codebook")


@dataclass
class ModelCheckpoint:
    variant: str
    num_classes: int
    tensors: dict
    epochs: int = 0
    seed: int = 0


@dataclass
class EvalMetrics:
    accuracy: float
    confusion: np.ndarray  # rows = true label, cols = predicted


# ---------------------------------------------------------------------------
# construction


def build_model(variant, rng, num_classes=7, image_size=48, base_filters=64,
                trunk_dense=2048, side_dim=2048, side_width=4096, dtype=np.float32):
    """He-initialized model; non-default sizes build a scaled-down clone.

    The spatial plan halves three times (48 -> 24 -> 12 -> 6 with the default
    size), so the flattened trunk activation has (image_size/8)^2 * 4*F
    entries.
    """
    if variant not in VARIANTS:
        raise DataError(f"unknown variant {variant!r}")
    if num_classes < 2:
        raise DataError(f"need at least 2 classes, got {num_classes}")
    if image_size % 8 != 0:
        raise DataError(f"image size must be divisible by 8, got {image_size}")

    f = base_filters
    widths = ((1, f), (f, f), (f, 2 * f), (2 * f, 2 * f), (2 * f, 4 * f), (4 * f, 4 * f))
    params = {}
    for name, (cin, cout) in zip(_CONV_NAMES, widths):
        fan_in = 9 * cin
        params[name + ".weight"] = nn.he_init((3, 3, cin, cout), fan_in, rng, dtype)
        params[name + ".bias"] = np.zeros(cout, dtype=dtype)
    flat = (image_size // 8) ** 2 * 4 * f
    params["trunk_dense.weight"] = nn.he_init((flat, trunk_dense), flat, rng, dtype)
    params["trunk_dense.bias"] = np.zeros(trunk_dense, dtype=dtype)
    head_in = trunk_dense
    if variant != "cnn_only":
        params["side_dense.weight"] = nn.he_init((side_dim, side_width), side_dim, rng, dtype)
        params["side_dense.bias"] = np.zeros(side_width, dtype=dtype)
        params["side_norm.mean"] = np.zeros(side_dim, dtype=dtype)
        params["side_norm.std"] = np.ones(side_dim, dtype=dtype)
        head_in += side_width
    params["head.weight"] = nn.he_init((head_in, num_classes), head_in, rng, dtype)
    params["head.bias"] = np.zeros(num_classes, dtype=dtype)
    return ModelGraph(variant, num_classes, params, image_size, f,
                      trunk_dense, side_dim, side_width)


# ---------------------------------------------------------------------------
# forward / backward


def _forward_batch(model, x, side, rng, training):
    """Batched forward pass; returns (probs, cache for the backward pass)."""
    p = model.params
    cache = {}
    a = x
    for stage in (1, 2, 3):
        for j in (1, 2):
            name = _CONV_NAMES[(stage - 1) * 2 + (j - 1)]
            cache[name + ".in"] = a
            z = nn.conv2d_forward(a, p[name + ".weight"], p[name + ".bias"])
            cache[name + ".z"] = z
            a = nn.leaky_relu(z)
        a, arg = nn.maxpool_forward(a)
        cache[f"pool{stage}.arg"] = arg
        a, mask = nn.dropout_forward(a, model.drop_conv, rng, training)
        cache[f"pool{stage}.mask"] = mask
    cache["flat.shape"] = a.shape
    flat = a.reshape(a.shape[0], -1)
    cache["trunk.in"] = flat
    tz = nn.dense_forward(flat, p["trunk_dense.weight"], p["trunk_dense.bias"])
    cache["trunk.z"] = tz
    t = nn.leaky_relu(tz)
    t, tmask = nn.dropout_forward(t, model.drop_dense, rng, training)
    cache["trunk.mask"] = tmask
    if model.is_hybrid:
        s0 = (side - p["side_norm.mean"]) / p["side_norm.std"]
        cache["side.in"] = s0
        sz = nn.dense_forward(s0, p["side_dense.weight"], p["side_dense.bias"])
        cache["side.z"] = sz
        s = nn.leaky_relu(sz)
        s, smask = nn.dropout_forward(s, model.drop_dense, rng, training)
        cache["side.mask"] = smask
        feat = np.concatenate([t, s], axis=1)
    else:
        feat = t
    cache["head.in"] = feat
    logits = nn.dense_forward(feat, p["head.weight"], p["head.bias"])
    return nn.softmax(logits), cache


def _backward_batch(model, cache, dlogits):
    """Parameter gradients for one batch, including the side-branch L2 term."""
    p = model.params
    grads = {}
    dfeat, grads["head.weight"], grads["head.bias"] = nn.dense_backward(
        cache["head.in"], p["head.weight"], dlogits)
    if model.is_hybrid:
        dt = dfeat[:, :model.trunk_dense]
        ds = dfeat[:, model.trunk_dense:]
        ds = nn.dropout_backward(ds, cache["side.mask"], model.drop_dense)
        ds = nn.leaky_relu_backward(ds, cache["side.z"])
        _, dws, dbs = nn.dense_backward(cache["side.in"], p["side_dense.weight"], ds)
        grads["side_dense.weight"] = dws + 2.0 * SIDE_L2 * p["side_dense.weight"]
        grads["side_dense.bias"] = dbs
    else:
        dt = dfeat
    dt = nn.dropout_backward(dt, cache["trunk.mask"], model.drop_dense)
    dt = nn.leaky_relu_backward(dt, cache["trunk.z"])
    dflat, grads["trunk_dense.weight"], grads["trunk_dense.bias"] = nn.dense_backward(
        cache["trunk.in"], p["trunk_dense.weight"], dt)
    da = dflat.reshape(cache["flat.shape"])
    for stage in (3, 2, 1):
        da = nn.dropout_backward(da, cache[f"pool{stage}.mask"], model.drop_conv)
        da = nn.maxpool_backward(da, cache[f"pool{stage}.arg"])
        for j in (2, 1):
            name = _CONV_NAMES[(stage - 1) * 2 + (j - 1)]
            da = nn.leaky_relu_backward(da, cache[name + ".z"])
            da, dw, db = nn.conv2d_backward(cache[name + ".in"], p[name + ".weight"], da)
            grads[name + ".weight"] = dw
            grads[name + ".bias"] = db
    return grads


def batch_loss(model, probs, labels):
    """Mean cross-entropy plus the side branch's L2 penalty; also the logit
    gradient of the mean term (the L2 part enters via _backward_batch)."""
    loss, dlogits = nn.cross_entropy_batch(probs, labels)
    if model.is_hybrid:
        w = model.params["side_dense.weight"]
        loss += SIDE_L2 * float(np.sum(w.astype(np.float64) ** 2))
    return loss, dlogits


def _check_side(model, side):
    if model.is_hybrid:
        if side is None:
            raise DataError(f"variant {model.variant} needs a side feature")
        if side.shape[-1] != model.side_dim:
            raise ShapeError(
                f"side feature length {side.shape[-1]} does not match model {model.side_dim}")
    elif side is not None:
        raise DataError("cnn_only takes no side feature")


def forward_probs(model, image, side_feature=None, inference=True, rng=None):
    """Class distribution for one image.

    Hybrid variants require ``side_feature`` (raw, unstandardized; the stored
    training statistics are applied internally); cnn_only forbids it. With
    ``inference`` set, dropout is disabled and the output is deterministic.
    """
    img = np.asarray(image)
    if img.shape != (model.image_size, model.image_size):
        raise ShapeError(
            f"expected a {model.image_size}x{model.image_size} image, got {img.shape}")
    side = None if side_feature is None else np.asarray(side_feature)
    _check_side(model, side)
    if not inference and rng is None:
        raise DataError("training-mode forward needs an rng for dropout")
    dtype = model.params["head.weight"].dtype
    x = img.astype(dtype)[None, :, :, None]
    s = None if side is None else side.astype(dtype)[None, :]
    probs, _ = _forward_batch(model, x, s, rng, not inference)
    return probs[0]


# ---------------------------------------------------------------------------
# side features


def _resolve_source(source):
    """Accepts "none", "dense_sift", "sift_bag", a Codebook, or a
    ("sift_bag", codebook) pair; returns (kind, codebook or None)."""
    if source is None or source == "none":
        return "none", None
    if source in ("dense_sift", "sift_bag"):
        return source, None
    if isinstance(source, sf.Codebook):
        return "sift_bag", source
    if isinstance(source, tuple) and len(source) == 2 and source[0] == "sift_bag":
        if not isinstance(source[1], sf.Codebook):
            raise DataError("sift_bag source needs a Codebook")
        return "sift_bag", source[1]
    raise DataError(f"unknown feature source {source!r}")


def compute_side_features(images, source, codebook=None):
    """Per-image 1D feature rows for the hybrid side branch, or None.

    dense_sift: the 2048-long upright grid descriptor. sift_bag: detected
    keypoints encoded against the codebook (length K). Input images are the
    raw [0, 1] intensities, not the standardized tensors the trunk sees.
    """
    kind, book = _resolve_source(source)
    if book is None:
        book = codebook
    if kind == "none":
        return None
    if kind == "sift_bag" and book is None:
        raise DataError("feature source sift_bag needs a codebook")
    rows = []
    for image in images:
        if kind == "dense_sift":
            rows.append(sf.dense_sift(image))
        else:
            rows.append(sf.bag_of_keypoints(sf.extract_descriptors(image), book))
    return np.stack(rows)


def _standardize(image):
    img = np.asarray(image, dtype=np.float64)
    return (img - img.mean()) / max(float(img.std()), _STD_FLOOR)


def _prepare_inputs(model, images, dtype):
    rows = []
    for image in images:
        img = np.asarray(image)
        if img.shape != (model.image_size, model.image_size):
            raise ShapeError(
                f"expected {model.image_size}x{model.image_size} images, got {img.shape}")
        rows.append(_standardize(img))
    return np.stack(rows).astype(dtype)[:, :, :, None]


# ---------------------------------------------------------------------------
# training


def _inference_accuracy(model, x, side, labels, batch_size=64):
    correct = 0
    for lo in range(0, x.shape[0], batch_size):
        hi = lo + batch_size
        s = None if side is None else side[lo:hi]
        probs, _ = _forward_batch(model, x[lo:hi], s, None, False)
        correct += int(np.sum(np.argmax(probs, axis=1) == labels[lo:hi]))
    return correct / x.shape[0]


def train(model, data, config, rng, on_epoch=None):
    """Minimize cross-entropy (plus the side L2 term) with Adam.

    Shuffles per epoch with the caller's rng, records one history entry per
    epoch, and returns (checkpoint of the final parameters, history). A
    non-finite loss aborts with a divergence error naming the epoch. When
    given, on_epoch is called with each history entry as it is recorded.
    """
    if not data.train:
        raise DataError("training split is empty")
    if model.is_hybrid and config.feature_source == "none":
        raise DataError(f"variant {model.variant} needs feature_source sift_bag or dense_sift")
    if not model.is_hybrid and config.feature_source != "none":
        raise DataError("cnn_only takes feature_source 'none'")
    for sample in data.train:
        if not 0 <= sample.label < model.num_classes:
            raise DataError(f"label {sample.label} outside [0, {model.num_classes})")

    from .data_pipeline import augment_ten  # local import to avoid a cycle

    dtype = model.params["head.weight"].dtype
    images = []
    labels = []
    for sample in data.train:
        images.append(np.asarray(sample.image, dtype=np.float64))
        labels.append(sample.label)
        if config.augment:
            for variant in augment_ten(sample.image, rng):
                images.append(variant)
                labels.append(sample.label)
    labels = np.asarray(labels, dtype=np.int64)

    side = None
    if model.is_hybrid:
        raw = compute_side_features(images, config.feature_source, config.codebook)
        if raw.shape[1] != model.side_dim:
            raise ShapeError(
                f"feature length {raw.shape[1]} does not match model side input {model.side_dim}")
        mean = raw.mean(axis=0)
        std = np.maximum(raw.std(axis=0), _STD_FLOOR)
        model.params["side_norm.mean"] = mean.astype(dtype)
        model.params["side_norm.std"] = std.astype(dtype)
        side = raw.astype(dtype)
    x = _prepare_inputs(model, images, dtype)

    val_x = val_side = val_labels = None
    if data.public_test:
        val_x = _prepare_inputs(model, [s.image for s in data.public_test], dtype)
        val_labels = np.asarray([s.label for s in data.public_test], dtype=np.int64)
        if model.is_hybrid:
            val_side = compute_side_features(
                [s.image for s in data.public_test], config.feature_source,
                config.codebook).astype(dtype)

    states = {name: nn.adam_init(model.params[name]) for name in model.trainable_names()}
    n = x.shape[0]
    history = []
    epochs_done = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            bs = None if side is None else side[idx]
            probs, cache = _forward_batch(model, x[idx], bs, rng, True)
            loss, dlogits = batch_loss(model, probs, labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError("training loss is not finite", epoch=epoch)
            grads = _backward_batch(model, cache, dlogits)
            for name in model.trainable_names():
                model.params[name], states[name] = nn.adam_step(
                    model.params[name], grads[name], states[name], lr=config.learning_rate)
            loss_sum += loss * idx.size
            correct += int(np.sum(np.argmax(probs, axis=1) == labels[idx]))
        entry = {
            "epoch": epoch,
            "train_loss": float(loss_sum / n),
            "train_acc": correct / n,
            "val_acc": None,
        }
        if val_x is not None:
            entry["val_acc"] = _inference_accuracy(model, val_x, val_side, val_labels)
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        epochs_done = epoch
        if config.stop_train_acc is not None and entry["train_acc"] >= config.stop_train_acc - 0.05:
            if _inference_accuracy(model, x, side, labels) >= config.stop_train_acc:
                break
    return graph_to_checkpoint(model, epochs_done, config.seed), history


def prepare_fine_tune(checkpoint, rng, num_classes=6):
    """Copy of the checkpointed model with a freshly initialized head.

    Everything except the classification layer transfers verbatim; the head
    is re-drawn at the new class count.
    """
    model = graph_from_checkpoint(checkpoint)
    head_in = model.trunk_dense + (model.side_width if model.is_hybrid else 0)
    dtype = model.params["head.weight"].dtype
    model.params["head.weight"] = nn.he_init((head_in, num_classes), head_in, rng, dtype)
    model.params["head.bias"] = np.zeros(num_classes, dtype=dtype)
    model.num_classes = num_classes
    return model


def fine_tune(checkpoint, data, config, rng, num_classes=6, on_epoch=None):
    """Re-head the checkpointed model at num_classes and train on data."""
    model = prepare_fine_tune(checkpoint, rng, num_classes)
    return train(model, data, config, rng, on_epoch=on_epoch)


# ---------------------------------------------------------------------------
# aggregation and evaluation


def aggregate(probs):
    """Elementwise arithmetic mean of n same-length distributions."""
    if len(probs) == 0:
        raise DataError("nothing to aggregate")
    first = np.asarray(probs[0], dtype=np.float64)
    rows = [first]
    for p in probs[1:]:
        arr = np.asarray(p, dtype=np.float64)
        if arr.shape != first.shape:
            raise ShapeError(f"distribution shapes differ: {arr.shape} vs {first.shape}")
        rows.append(arr)
    return np.mean(rows, axis=0)


def predict_label(prob):
    """Argmax; ties resolve to the lowest class index."""
    return int(np.argmax(np.asarray(prob)))


def _model_probs(model, source, samples, batch_size=64):
    dtype = model.params["head.weight"].dtype
    images = [s.image for s in samples]
    kind, book = _resolve_source(source)
    side = compute_side_features(images, kind, book)
    _check_side(model, None if side is None else side[0])
    if side is not None:
        side = side.astype(dtype)
    x = _prepare_inputs(model, images, dtype)
    out = []
    for lo in range(0, x.shape[0], batch_size):
        hi = lo + batch_size
        s = None if side is None else side[lo:hi]
        probs, _ = _forward_batch(model, x[lo:hi], s, None, False)
        out.append(probs)
    return np.concatenate(out, axis=0)


def evaluate(models, samples):
    """Accuracy and confusion matrix, aggregating across the given models.

    ``models`` is a list of (ModelGraph, feature source) pairs where the
    source is "none", "dense_sift", or a Codebook (bag encoding). Confusion
    rows are indexed by true label, columns by prediction.
    """
    if not samples:
        raise DataError("no samples to evaluate")
    if not models:
        raise DataError("no models to evaluate")
    num_classes = models[0][0].num_classes
    for graph, _ in models:
        if graph.num_classes != num_classes:
            raise DataError(
                f"models disagree on class count: {graph.num_classes} vs {num_classes}")
    stacked = [_model_probs(graph, source, samples) for graph, source in models]
    mean_probs = np.mean(stacked, axis=0)
    labels = np.asarray([s.label for s in samples], dtype=np.int64)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError("sample label outside the model's class range")
    preds = np.argmax(mean_probs, axis=1)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    return EvalMetrics(accuracy=float(np.mean(preds == labels)), confusion=confusion)


# ---------------------------------------------------------------------------
# CRC-64 (the XZ polynomial, reflected, init/xorout all-ones)

CRC64_POLY = 0xC96C5795D7870F42


def _crc64_table():
    table = np.empty(256, dtype=np.uint64)
    poly = np.uint64(CRC64_POLY)
    one = np.uint64(1)
    for i in range(256):
        crc = np.uint64(i)
        for _ in range(8):
            crc = (crc >> one) ^ (poly if crc & one else np.uint64(0))
        table[i] = crc
    return table


_CRC64_TABLE = _crc64_table()
_CRC64_TABLE_INTS = [int(v) for v in _CRC64_TABLE]

try:
    from numba import njit

    @njit(cache=True)
    def _crc64_kernel(buf, table, crc):
        for i in range(buf.size):
            crc = table[(crc ^ np.uint64(buf[i])) & np.uint64(0xFF)] ^ (crc >> np.uint64(8))
        return crc

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def _crc64_python(buf, crc):
    table = _CRC64_TABLE_INTS
    for byte in buf:
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc


def crc64(data, value=0):
    """CRC-64 with polynomial 0xC96C5795D7870F42 (check: b"123456789" ->
    0x995DC9BBDF1939FA). ``value`` chains a previous result."""
    start = value ^ 0xFFFFFFFFFFFFFFFF
    if _HAVE_NUMBA:
        buf = np.frombuffer(bytes(data), dtype=np.uint8)
        out = int(_crc64_kernel(buf, _CRC64_TABLE, np.uint64(start)))
    else:
        out = _crc64_python(bytes(data), start)
    return out ^ 0xFFFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# checkpoint persistence

_META_LIMBS = 4  # unsigned 64-bit metadata as 16-bit limbs, exact in f32


def _int_to_limbs(value):
    if not 0 <= value < 1 << 64:
        raise DataError(f"metadata value {value} outside unsigned 64-bit range")
    return np.array([(value >> (16 * i)) & 0xFFFF for i in range(_META_LIMBS)],
                    dtype=np.float32)


def _limbs_to_int(limbs):
    return sum(int(limb) << (16 * i) for i, limb in enumerate(limbs))


def graph_to_checkpoint(model, epochs=0, seed=0):
    tensors = {name: np.array(arr, dtype=np.float32, copy=True)
               for name, arr in model.params.items()}
    return ModelCheckpoint(model.variant, model.num_classes, tensors, epochs, seed)


def graph_from_checkpoint(ckpt):
    """Rebuild the runnable model; sizes are inferred from tensor shapes."""
    t = ckpt.tensors
    needed = [name + suffix for name in _CONV_NAMES for suffix in (".weight", ".bias")]
    needed += ["trunk_dense.weight", "trunk_dense.bias", "head.weight", "head.bias"]
    hybrid = ckpt.variant != "cnn_only"
    if hybrid:
        needed += ["side_dense.weight", "side_dense.bias", "side_norm.mean", "side_norm.std"]
    missing = [name for name in needed if name not in t]
    if missing:
        raise DataError(f"checkpoint is missing tensors: {', '.join(missing)}")
    if not hybrid and "side_dense.weight" in t:
        raise DataError("cnn_only checkpoint carries side branch tensors")

    base_filters = t["conv1.weight"].shape[3]
    trunk_dense = t["trunk_dense.bias"].shape[0]
    flat = t["trunk_dense.weight"].shape[0]
    image_size = int(round(8 * np.sqrt(flat / (4.0 * base_filters))))
    if (image_size // 8) ** 2 * 4 * base_filters != flat or image_size % 8 != 0:
        raise DataError(f"flattened size {flat} does not match any spatial plan")
    side_dim = t["side_dense.weight"].shape[0] if hybrid else trunk_dense
    side_width = t["side_dense.weight"].shape[1] if hybrid else 2 * trunk_dense
    params = {name: arr.copy() for name, arr in t.items()}
    return ModelGraph(ckpt.variant, ckpt.num_classes, params, image_size,
                      base_filters, trunk_dense, side_dim, side_width)


def save_checkpoint(ckpt, path):
    """Binary layout: magic, variant and class-count bytes, tensor count,
    then name/shape/f32 data per tensor, closed by a CRC-64 of the bytes."""
    if ckpt.variant not in VARIANT_CODES:
        raise DataError(f"unknown variant {ckpt.variant!r}")
    if not 2 <= ckpt.num_classes <= 255:
        raise DataError(f"class count {ckpt.num_classes} does not fit the format")
    tensors = dict(ckpt.tensors)
    tensors["meta.epochs"] = _int_to_limbs(ckpt.epochs)
    tensors["meta.seed"] = _int_to_limbs(ckpt.seed)

    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += bytes([VARIANT_CODES[ckpt.variant], ckpt.num_classes])
    buf += struct.pack("<Q", len(tensors))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float32)
        encoded = name.encode("utf-8")
        buf += struct.pack("<Q", len(encoded))
        buf += encoded
        buf += struct.pack("<Q", arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<Q", dim)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<Q", crc64(bytes(buf)))
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 26:
        raise FormatError("checkpoint too short for a header", offset=len(blob))
    if blob[:8] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    stored_crc, = struct.unpack_from("<Q", blob, len(blob) - 8)
    if crc64(blob[:-8]) != stored_crc:
        raise FormatError("checksum mismatch", offset=len(blob) - 8)
    variant_code = blob[8]
    if variant_code not in CODE_VARIANTS:
        raise FormatError(f"unknown variant code {variant_code}", offset=8)
    num_classes = blob[9]
    count, = struct.unpack_from("<Q", blob, 10)
    offset = 18
    end = len(blob) - 8
    tensors = {}
    for _ in range(count):
        if offset + 8 > end:
            raise FormatError("truncated tensor name length", offset=offset)
        name_len, = struct.unpack_from("<Q", blob, offset)
        offset += 8
        if offset + name_len > end:
            raise FormatError("truncated tensor name", offset=offset)
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        if offset + 8 > end:
            raise FormatError("truncated tensor rank", offset=offset)
        rank, = struct.unpack_from("<Q", blob, offset)
        offset += 8
        if offset + 8 * rank > end:
            raise FormatError("truncated tensor dims", offset=offset)
        shape = struct.unpack_from(f"<{rank}Q", blob, offset) if rank else ()
        offset += 8 * rank
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        if offset + 4 * size > end:
            raise FormatError("truncated tensor data", offset=offset)
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=size,
                                      offset=offset).reshape(shape).copy()
        offset += 4 * size
    if offset != end:
        raise FormatError(f"{end - offset} trailing bytes after the last tensor", offset=offset)
    epochs = _limbs_to_int(tensors.pop("meta.epochs", np.zeros(_META_LIMBS, np.float32)))
    seed = _limbs_to_int(tensors.pop("meta.seed", np.zeros(_META_LIMBS, np.float32)))
    return ModelCheckpoint(CODE_VARIANTS[variant_code], num_classes, tensors, epochs, seed)
