"""Finite-difference gradient checking used by the unit and acceptance suites.

Everything runs in float64 with central differences (h = 1e-5). Each
``check_*`` function builds one randomized instance, compares analytic
gradients against numeric ones, and returns the worst relative error seen.
"""

import numpy as np

from hybfer import nn_core as nn

H_STEP = 1e-5
REL_FLOOR = 1e-6  # avoid 0/0 when both gradients vanish


def numerical_gradient(f, x, h=H_STEP):
    """Central-difference gradient of scalar f() w.r.t. array x (in place)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _loss_against(upstream):
    """Scalar projection loss sum(upstream * out): d loss/d out = upstream."""
    return lambda out: float(np.sum(upstream * out))


def check_conv(rng):
    h = int(rng.integers(2, 7))
    w = int(rng.integers(2, 7))
    cin = int(rng.integers(1, 4))
    cout = int(rng.integers(1, 4))
    x = rng.normal(size=(h, w, cin))
    wt = rng.normal(size=(3, 3, cin, cout))
    b = rng.normal(size=cout)
    up = rng.normal(size=(h, w, cout))
    loss = _loss_against(up)
    dx, dw, db = nn.conv2d_backward(x, wt, up)
    errs = [
        max_rel_error(dx, numerical_gradient(lambda: loss(nn.conv2d_forward(x, wt, b)), x)),
        max_rel_error(dw, numerical_gradient(lambda: loss(nn.conv2d_forward(x, wt, b)), wt)),
        max_rel_error(db, numerical_gradient(lambda: loss(nn.conv2d_forward(x, wt, b)), b)),
    ]
    return max(errs)


def check_dense(rng):
    n = int(rng.integers(1, 9))
    m = int(rng.integers(1, 9))
    x = rng.normal(size=n)
    wt = rng.normal(size=(n, m))
    b = rng.normal(size=m)
    up = rng.normal(size=m)
    loss = _loss_against(up)
    dx, dw, db = nn.dense_backward(x, wt, up)
    errs = [
        max_rel_error(dx, numerical_gradient(lambda: loss(nn.dense_forward(x, wt, b)), x)),
        max_rel_error(dw, numerical_gradient(lambda: loss(nn.dense_forward(x, wt, b)), wt)),
        max_rel_error(db, numerical_gradient(lambda: loss(nn.dense_forward(x, wt, b)), b)),
    ]
    return max(errs)


def check_leaky_relu(rng):
    x = rng.normal(size=int(rng.integers(2, 40)))
    # keep samples away from the kink at 0 where FD straddles both slopes
    x = np.where(np.abs(x) < 10 * H_STEP, 0.1, x)
    up = rng.normal(size=x.shape)
    loss = _loss_against(up)
    dx = nn.leaky_relu_backward(up, x)
    return max_rel_error(dx, numerical_gradient(lambda: loss(nn.leaky_relu(x)), x))


def check_maxpool(rng):
    h = 2 * int(rng.integers(1, 4))
    w = 2 * int(rng.integers(1, 4))
    c = int(rng.integers(1, 4))
    x = rng.normal(size=(h, w, c))
    # FD is invalid if the two largest window entries are within 2h of each
    # other; spread the values so the argmax cannot flip under perturbation
    srt = np.sort(_windows_flat(x), axis=-2)
    if np.min(srt[..., -1, :] - srt[..., -2, :]) < 1e-3:
        x = x + np.arange(x.size).reshape(x.shape) * 1e-2
    up = rng.normal(size=(h // 2, w // 2, c))
    loss = _loss_against(up)
    _, arg = nn.maxpool_forward(x)
    dx = nn.maxpool_backward(up, arg)
    return max_rel_error(
        dx, numerical_gradient(lambda: loss(nn.maxpool_forward(x)[0]), x))


def _windows_flat(x):
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(
        h // 2, w // 2, 4, c)


def check_dropout(rng):
    x = rng.normal(size=int(rng.integers(4, 40)))
    rate = float(rng.uniform(0.1, 0.8))
    _, mask = nn.dropout_forward(x, rate, nn.make_rng(int(rng.integers(1 << 30))), True)
    up = rng.normal(size=x.shape)
    loss = _loss_against(up)

    def fwd():
        # fixed mask: apply the same zero/rescale pattern FD perturbs through
        return loss(x * mask / (1.0 - rate))

    dx = nn.dropout_backward(up, mask, rate)
    return max_rel_error(dx, numerical_gradient(fwd, x))


def check_softmax_cross_entropy(rng):
    c = int(rng.integers(2, 10))
    # unit-scale logits keep every class probability well above the FD
    # roundoff floor, so the 1e-6 relative target is actually measurable
    logits = np.clip(rng.normal(size=c), -2.5, 2.5)
    label = int(rng.integers(0, c))

    def fwd():
        return nn.cross_entropy(nn.softmax(logits), label)[0]

    _, dlogits = nn.cross_entropy(nn.softmax(logits), label)
    return max_rel_error(dlogits, numerical_gradient(fwd, logits))


def check_toy_net(rng):
    """Two convs, one pool, one dense, softmax cross-entropy end to end."""
    x = rng.normal(size=(6, 6, 1))
    w1 = rng.normal(size=(3, 3, 1, 2)) * 0.5
    b1 = rng.normal(size=2) * 0.1
    w2 = rng.normal(size=(3, 3, 2, 2)) * 0.5
    b2 = rng.normal(size=2) * 0.1
    wd = rng.normal(size=(18, 3)) * 0.5
    bd = rng.normal(size=3) * 0.1
    label = int(rng.integers(0, 3))
    params = [x, w1, b1, w2, b2, wd, bd]

    def fwd():
        a1 = nn.leaky_relu(nn.conv2d_forward(x, w1, b1))
        a2 = nn.leaky_relu(nn.conv2d_forward(a1, w2, b2))
        p, _ = nn.maxpool_forward(a2)
        logits = nn.dense_forward(p.reshape(-1), wd, bd)
        return nn.cross_entropy(nn.softmax(logits), label)[0]

    def backward():
        c1 = nn.conv2d_forward(x, w1, b1)
        a1 = nn.leaky_relu(c1)
        c2 = nn.conv2d_forward(a1, w2, b2)
        a2 = nn.leaky_relu(c2)
        p, arg = nn.maxpool_forward(a2)
        flat = p.reshape(-1)
        logits = nn.dense_forward(flat, wd, bd)
        _, dlogits = nn.cross_entropy(nn.softmax(logits), label)
        dflat, dwd, dbd = nn.dense_backward(flat, wd, dlogits)
        dp = dflat.reshape(p.shape)
        da2 = nn.maxpool_backward(dp, arg)
        dc2 = nn.leaky_relu_backward(da2, c2)
        da1, dw2, db2 = nn.conv2d_backward(a1, w2, dc2)
        dc1 = nn.leaky_relu_backward(da1, c1)
        dx, dw1, db1 = nn.conv2d_backward(x, w1, dc1)
        return [dx, dw1, db1, dw2, db2, dwd, dbd]

    grads = backward()
    worst = 0.0
    for p, g in zip(params, grads):
        worst = max(worst, max_rel_error(g, numerical_gradient(fwd, p)))
    return worst


LAYER_CHECKS = {
    "conv": check_conv,
    "dense": check_dense,
    "leaky_relu": check_leaky_relu,
    "maxpool": check_maxpool,
    "dropout": check_dropout,
    "softmax_ce": check_softmax_cross_entropy,
}


def check_full_graph(rng):
    """Whole hybrid model on a shrunken clone: 8x8 input, 2 base filters,
    8-d side feature, dense widths 16/32, dropout off, float64."""
    from hybfer import model_zoo as mz

    clone = mz.build_model("cnn_dsift", np.random.default_rng(rng.integers(1 << 30)),
                           num_classes=3, image_size=8, base_filters=2,
                           trunk_dense=16, side_dim=8, side_width=32, dtype=np.float64)
    clone.drop_conv = 0.0
    clone.drop_dense = 0.0
    x = rng.normal(size=(2, 8, 8, 1))
    side = rng.normal(size=(2, 8))
    labels = rng.integers(0, 3, size=2)

    def loss():
        probs, _ = mz._forward_batch(clone, x, side, None, False)
        return mz.batch_loss(clone, probs, labels)[0]

    probs, cache = mz._forward_batch(clone, x, side, None, False)
    _, dlogits = mz.batch_loss(clone, probs, labels)
    grads = mz._backward_batch(clone, cache, dlogits)
    worst = 0.0
    for name in clone.trainable_names():
        numeric = numerical_gradient(loss, clone.params[name])
        worst = max(worst, max_rel_error(grads[name], numeric))
    return worst
