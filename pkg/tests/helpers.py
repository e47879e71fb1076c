"""Finite-difference gradient checks shared by the unit and acceptance tests."""
import numpy as np

from shdeconv import tensor as tn
from shdeconv.layers import hemi_conv
from shdeconv.tensor import Tensor


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_op(fn, arrays, seed=0, h=1e-5):
    """Max relative error between autodiff and central differences for ``sum(fn(*x) * R)``."""
    rng = np.random.default_rng(seed)
    xs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*xs)
    R = rng.standard_normal(out.shape)
    loss = tn.sum_(out * Tensor(R))
    loss.backward()
    worst = 0.0
    for i, a in enumerate(arrays):
        a = np.array(a, dtype=np.float64)
        fd = np.zeros_like(a)
        for j in range(a.size):
            for sgn in (1, -1):
                b = a.copy()
                b.flat[j] += sgn * h
                args = [Tensor(np.array(x, dtype=np.float64)) for x in arrays]
                args[i] = Tensor(b)
                fd.flat[j] += sgn * float((fn(*args).data * R).sum()) / (2 * h)
        worst = max(worst, rel_error(xs[i].grad, fd))
    return worst


def away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-12) * margin, x)


def op_cases(seed):
    """(name, fn, arrays) for every differentiable op, with shapes drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    a, b = rng.standard_normal((n, m)), rng.standard_normal((n, m))
    pos = rng.random((n, m)) + 0.5
    idx = rng.integers(0, m, size=int(rng.integers(1, 6)))
    V = 6
    mats = [np.eye(V)] + [np.linalg.qr(rng.standard_normal((V, V)))[0] for _ in range(2)]
    mats = [0.5 * (M + M.T) for M in mats]
    cases = [
        ("add", lambda x, y: x + y, [a, b]),
        ("add_broadcast", lambda x, y: x + y, [a, b[:1]]),
        ("sub", lambda x, y: x - y, [a, b]),
        ("mul", lambda x, y: x * y, [a, b]),
        ("square", tn.square, [a]),
        ("relu", tn.relu, [away_from_zero(rng, (n, m))]),
        ("softplus", tn.softplus, [a]),
        ("log", tn.log, [pos]),
        ("log1p", tn.log1p, [pos]),
        ("minimum0", tn.minimum0, [away_from_zero(rng, (n, m))]),
        ("reshape", lambda x: tn.reshape(x, (m, n)), [a]),
        ("permute", lambda x: tn.permute(x, (1, 0)), [a]),
        ("slice", lambda x: x[1:, ::2], [a]),
        ("fancy_index", lambda x: x[:, idx], [a]),
        ("concat", lambda x, y: tn.concat([x, y], axis=1), [a, b]),
        ("repeat", lambda x: tn.repeat(x, 2, axis=0), [a]),
        ("gather", lambda x: tn.gather(x, idx, axis=1), [a]),
        ("scatter_add", lambda x: tn.scatter_add(x, rng_idx(m, 3, seed), 3, axis=1), [a]),
        ("sum", lambda x: tn.sum_(x, axis=0), [a]),
        ("mean", lambda x: tn.mean(x, axis=1, keepdims=True), [a]),
        ("matmul", lambda x, y: x @ y, [rng.standard_normal((5, 7)), rng.standard_normal((7, 3))]),
        ("matmul_batched", lambda x, y: x @ y, [rng.standard_normal((2, n, m)), rng.standard_normal((m, 3))]),
        ("batchnorm_train", _bn(True), [rng.standard_normal((2, 3, 4)), rng.random(3) + 0.5, rng.standard_normal(3)]),
        ("batchnorm_eval", _bn(False), [rng.standard_normal((2, 3, 4)), rng.random(3) + 0.5, rng.standard_normal(3)]),
        ("hemi_conv", lambda x, w, bias: hemi_conv(x, w, bias, mats),
         [rng.standard_normal((1, 2, 3, 2, 2, V)), rng.standard_normal((2, 2, 3, 4)), rng.standard_normal(2)]),
    ]
    return cases


def rng_idx(m, size, seed):
    return np.random.default_rng(seed + 99).integers(0, size, size=m)


def _bn(training):
    def fn(x, g, b):
        C = x.shape[1]
        return tn.batchnorm(x, g, b, np.zeros(C), np.ones(C) * 1.5, training=training)

    return fn


def unet_loss_direction_check(seed, h=1e-7):
    """Relative error of the directional derivative of the full training loss, double precision.

    A small U-Net (every layer type, two levels) is run in training mode on a
    random patch; the autodiff gradient projected on a random parameter
    direction is compared to a central difference along that direction. With
    sigma = 1e-5 the sparsity term curves sharply, so ``h`` stays small: the
    truncation error at h = 1e-5 reaches 1e-2 and falls as h^2.
    """
    from shdeconv.deconv import LossWeights, SignalModel, loss_total
    from shdeconv.layers import UNetConfig, build_unet
    from shdeconv.phantom import analytic_rf, gradient_table

    rng = np.random.default_rng(seed)
    cfg = UNetConfig(depth=2, base_features=2, K=3, nside_in=2, sphere_pool_levels=1, shells=2,
                     tissues=2, blocks_per_level=1)
    net = build_unet(cfg, dtype=np.float64, seed=seed)
    net.train()
    hemi = net.hemis[0]
    bvals, bvecs = gradient_table(((1000.0, 8),), 1, seed=seed)
    model = SignalModel(hemi, analytic_rf(bvals, l_max=4, d_iso=3e-3), bvals, bvecs)
    x = rng.random((1, 2, 4, 4, 4, hemi.count))
    S = rng.random((1, 4, 4, 4, bvals.size))
    mask = rng.random((1, 4, 4, 4)) > 0.2
    weights = LossWeights()
    params = net.parameters()

    def loss():
        total, _ = loss_total(S, net(Tensor(x)), model, weights, mask=mask)
        return total

    for p in params:
        p.zero_grad()
    loss().backward()
    dirs = [rng.standard_normal(p.shape) for p in params]
    analytic = sum(float(np.sum(p.grad * d)) for p, d in zip(params, dirs))
    base = [p.data.copy() for p in params]
    vals = []
    for sgn in (1, -1):
        for p, b, d in zip(params, base, dirs):
            p.data = b + sgn * h * d
        vals.append(float(loss().data))
    for p, b in zip(params, base):
        p.data = b
    numeric = (vals[0] - vals[1]) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
