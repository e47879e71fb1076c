"""Spatio-hemispherical convolution, pooling and the U-Net built from them.

Activations have layout ``(N, C, X, Y, Z, V)`` with ``V`` the number of
kept hemisphere vertices.
"""
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tn
from .graph import DEFAULT_K_NEIGHBORS, hemi_stack
from .grid import healpix_hemisphere, hemisphere_pooling
from .tensor import Tensor

# squared offset length |o|^2 of the 3x3x3 neighbourhood: 0, 1, sqrt2, sqrt3
N_RADIAL = 4
RADIAL_DISTANCES = (0.0, 1.0, np.sqrt(2.0), np.sqrt(3.0))
SPATIAL_AXES = (2, 3, 4)


def _pair_shift(x, axis, out=None, add=None):
    """``x[i-1] + x[i+1]`` along ``axis`` with zero padding, plus ``add`` if given."""
    if out is None:
        out = np.empty_like(x)
    n = x.shape[axis]

    def sl(a, b):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(a, b)
        return tuple(idx)

    if n == 1:
        out[...] = 0.0
    else:
        np.add(x[sl(0, n - 2)], x[sl(2, n)], out=out[sl(1, n - 1)])
        out[sl(0, 1)] = x[sl(1, 2)]
        out[sl(n - 1, n)] = x[sl(n - 2, n - 1)]
    if add is not None:
        out += add
    return out


def radial_sums(x, axes=SPATIAL_AXES):
    """Sum ``x`` over each radial shell of the 3x3x3 neighbourhood.

    Returns an array with a new axis 1 of length 4 (offsets with 0, 1, 2 or 3
    nonzero components). Shell ``r`` is the elementary symmetric polynomial of
    degree ``r`` in the per-axis neighbour sums, built one axis at a time.
    """
    ax, ay, az = axes
    out = np.empty((x.shape[0], N_RADIAL) + x.shape[1:], dtype=x.dtype)
    tmp = np.empty_like(x)
    out[:, 0] = x
    _pair_shift(x, ax, out=out[:, 1])
    # fold in y, highest degree first so lower degrees are still unmodified
    _pair_shift(out[:, 1], ay, out=out[:, 2])
    out[:, 1] += _pair_shift(x, ay, out=tmp)
    _pair_shift(out[:, 2], az, out=out[:, 3])
    for r in (2, 1):
        out[:, r] += _pair_shift(out[:, r - 1], az, out=tmp)
    return out


def _radial_adjoint(gb, axes=SPATIAL_AXES):
    """Adjoint of :func:`radial_sums`: (N, 4, C, X, Y, Z, V) -> (N, C, X, Y, Z, V)."""
    ax, ay, az = axes
    h = gb.copy()
    tmp = np.empty_like(gb[:, 0])
    for r in range(3):
        h[:, r] += _pair_shift(gb[:, r + 1], az, out=tmp)
    for r in range(2):
        h[:, r] += _pair_shift(h[:, r + 1], ay, out=tmp)
    return h[:, 0] + _pair_shift(h[:, 1], ax, out=tmp)


def hemi_conv_forward(x, weight, bias, stack_mats):
    """Numpy forward of the spatio-hemispherical convolution.

    ``out[n, o] = sum_{i, k, r} weight[o, i, k, r] T^k (shell_r * x[n, i]) + bias[o]``.
    """
    N, Ci = x.shape[:2]
    Co, _, K, R = weight.shape
    spatial = x.shape[2:-1]
    V = x.shape[-1]
    P = int(np.prod(spatial)) * V
    bins = radial_sums(x)  # (N, R, Ci, X, Y, Z, V)
    A = weight.transpose(0, 2, 3, 1).reshape(Co * K, R * Ci)
    out = np.zeros((N, Co) + spatial + (V,), dtype=x.dtype)
    for n in range(N):
        y = (A @ bins[n].reshape(R * Ci, P)).reshape(Co, K, -1, V)
        acc = out[n].reshape(Co, -1, V)
        for k in range(K):
            acc += y[:, k] @ stack_mats[k]
    if bias is not None:
        out += bias.reshape((1, Co) + (1,) * (x.ndim - 2))
    return out


def hemi_conv(x, weight, bias, stack_mats):
    """Autodiff spatio-hemispherical convolution (see :func:`hemi_conv_forward`)."""
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = hemi_conv_forward(x.data, weight.data, None if bias is None else bias.data, stack_mats)

    def backward(g):
        xd, w = x.data, weight.data
        N, Ci = xd.shape[:2]
        Co, _, K, R = w.shape
        V = xd.shape[-1]
        P = g[0, 0].size
        A = w.transpose(0, 2, 3, 1).reshape(Co * K, R * Ci)
        bins = radial_sums(xd) if weight.requires_grad else None
        gA = np.zeros_like(A)
        gbins = np.empty((N, R) + xd.shape[1:], dtype=xd.dtype) if x.requires_grad else None
        for n in range(N):
            gn = g[n].reshape(Co, -1, V)
            h = np.empty((Co, K) + gn.shape[1:], dtype=gn.dtype)
            for k in range(K):
                h[:, k] = gn @ stack_mats[k]
            h = h.reshape(Co * K, P)
            if bins is not None:
                gA += h @ bins[n].reshape(R * Ci, P).T
            if gbins is not None:
                gbins[n] = (A.T @ h).reshape((R, Ci) + xd.shape[2:])
        gx = _radial_adjoint(gbins) if gbins is not None else None
        gw = gA.reshape(Co, K, R, Ci).transpose(0, 3, 1, 2) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0,) + tuple(range(2, g.ndim))))
        return tuple(grads)

    return Tensor.from_op(out, parents, backward)


@lru_cache(maxsize=32)
def level_operators(nside, K, k_neighbors=DEFAULT_K_NEIGHBORS, sigma=None, kernel="exp"):
    """Cached ``(hemi, stack)`` for one HEALPix resolution."""
    hop, stack = hemi_stack(nside, K, k_neighbors=k_neighbors, sigma=sigma, kernel=kernel)
    return hop.hemi, stack


class Module:
    training = True

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_parameters(self):
        return []

    def buffers(self):
        return {}

    def children(self):
        return []

    def train(self, mode=True):
        self.training = mode
        for c in self.children():
            c.train(mode)
        return self

    def eval(self):
        return self.train(False)


class HemiConv(Module):
    """Isotropic 3x3x3 spatial kernel times Chebyshev hemisphere filter."""

    def __init__(self, in_channels, out_channels, stack, bias=True, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stack = stack
        self.K = stack.K
        self.weight = Tensor(np.zeros((out_channels, in_channels, self.K, N_RADIAL), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None
        self._mats = {}

    @property
    def fan_in(self):
        # every output sums in_channels x K filters over all 27 offsets
        return self.in_channels * self.K * 27

    def named_parameters(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def mats(self, dtype):
        key = np.dtype(dtype).str
        if key not in self._mats:
            self._mats[key] = [np.ascontiguousarray(m, dtype=dtype) for m in self.stack.matrices]
        return self._mats[key]

    def __call__(self, x):
        if x.shape[-1] != self.stack.size:
            raise ValueError(f"input has {x.shape[-1]} vertices, operator has {self.stack.size}")
        if x.shape[1] != self.in_channels:
            raise ValueError(f"input has {x.shape[1]} channels, layer expects {self.in_channels}")
        return hemi_conv(x, self.weight, self.bias, self.mats(x.dtype))


class BatchNorm(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def named_parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x):
        return tn.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=self.training, momentum=self.momentum, eps=self.eps)


class Block(Module):
    """conv -> batch norm -> ReLU"""

    def __init__(self, cin, cout, stack, dtype=np.float32):
        self.conv = HemiConv(cin, cout, stack, dtype=dtype)
        self.bn = BatchNorm(cout, dtype=dtype)

    def children(self):
        return [self.conv, self.bn]

    def named_parameters(self):
        return [(f"conv.{n}", p) for n, p in self.conv.named_parameters()] + [
            (f"bn.{n}", p) for n, p in self.bn.named_parameters()
        ]

    def buffers(self):
        return {f"bn.{k}": v for k, v in self.bn.buffers().items()}

    def __call__(self, x):
        return tn.relu(self.bn(self.conv(x)))


def spatial_pool(x):
    N, C, X, Y, Z, V = x.shape
    if X % 2 or Y % 2 or Z % 2:
        raise ValueError(f"spatial dims {(X, Y, Z)} must be even to pool")
    x = x.reshape(N, C, X // 2, 2, Y // 2, 2, Z // 2, 2, V)
    return x.mean(axis=(3, 5, 7))


def spatial_unpool(x):
    for ax in SPATIAL_AXES:
        x = tn.repeat(x, 2, axis=ax)
    return x


class Pool(Module):
    """2x2x2 spatial mean then mean over the 4 nested children on the hemisphere."""

    def __init__(self, fine_nside, coarse_nside, dtype=np.float32):
        self.fine_nside, self.coarse_nside = fine_nside, coarse_nside
        self.matrix = None
        if coarse_nside != fine_nside:
            pool, _ = hemisphere_pooling(healpix_hemisphere(fine_nside), healpix_hemisphere(coarse_nside))
            self.matrix = pool.astype(dtype)

    def __call__(self, x):
        x = spatial_pool(x)
        if self.matrix is not None:
            x = x @ Tensor(self.matrix.astype(x.dtype, copy=False))
        return x


class Unpool(Module):
    """Replicate voxels 2x2x2 and copy each coarse vertex to its 4 children."""

    def __init__(self, coarse_nside, fine_nside, dtype=np.float32):
        self.coarse_nside, self.fine_nside = coarse_nside, fine_nside
        self.matrix = None
        if coarse_nside != fine_nside:
            if fine_nside != 2 * coarse_nside:
                raise ValueError(f"no hierarchy between nside {coarse_nside} and {fine_nside}")
            _, unpool = hemisphere_pooling(healpix_hemisphere(fine_nside), healpix_hemisphere(coarse_nside))
            self.matrix = unpool.astype(dtype)

    def __call__(self, x):
        x = spatial_unpool(x)
        if self.matrix is not None:
            x = x @ Tensor(self.matrix.astype(x.dtype, copy=False))
        return x


@dataclass
class UNetConfig:
    depth: int = 4
    base_features: int = 32
    K: int = 5
    nside_in: int = 8
    tissues: int = 2
    shells: int = 1
    sphere_pool_levels: int | None = None
    k_neighbors: int | None = DEFAULT_K_NEIGHBORS
    sigma: float | None = None
    kernel: str = "exp"
    blocks_per_level: int = 2

    def level_nsides(self):
        n_sph = self.depth - 1 if self.sphere_pool_levels is None else self.sphere_pool_levels
        return [self.nside_in // 2 ** min(i, n_sph) for i in range(self.depth)]

    def validate(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not 1 <= self.K <= 16:
            raise ValueError(f"K must be in 1..16, got {self.K}")
        n_sph = self.depth - 1 if self.sphere_pool_levels is None else self.sphere_pool_levels
        if not 0 <= n_sph <= self.depth - 1:
            raise ValueError("sphere_pool_levels must be within 0..depth-1")
        if self.nside_in < 2 ** n_sph:
            raise ValueError(
                f"nside_in={self.nside_in} cannot be pooled {n_sph} times; need >= {2 ** n_sph}"
            )
        for name in ("base_features", "tissues", "shells", "blocks_per_level"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        return self

    def to_dict(self):
        return asdict(self)


class UNet(Module):
    def __init__(self, cfg, dtype=np.float32):
        self.cfg = cfg.validate()
        self.dtype = dtype
        nsides = cfg.level_nsides()
        self.nsides = nsides
        ops = [level_operators(n, cfg.K, cfg.k_neighbors, cfg.sigma, cfg.kernel) for n in nsides]
        self.hemis = [h for h, _ in ops]
        stacks = [s for _, s in ops]
        F = cfg.base_features
        feats = [F * 2 ** i for i in range(cfg.depth)]

        self.encoder = []
        cin = cfg.shells
        for i in range(cfg.depth):
            level = []
            for b in range(cfg.blocks_per_level):
                level.append(Block(cin, feats[i], stacks[i], dtype))
                cin = feats[i]
            self.encoder.append(level)
        self.pools = [Pool(nsides[i], nsides[i + 1], dtype) for i in range(cfg.depth - 1)]
        self.unpools = [Unpool(nsides[i + 1], nsides[i], dtype) for i in range(cfg.depth - 1)]
        self.decoder = []
        for i in range(cfg.depth - 1):
            level = []
            cin = feats[i + 1] + feats[i]
            for b in range(cfg.blocks_per_level):
                level.append(Block(cin, feats[i], stacks[i], dtype))
                cin = feats[i]
            self.decoder.append(level)
        self.head = HemiConv(feats[0], cfg.tissues, stacks[0], dtype=dtype)

    @property
    def n_vertices(self):
        return self.hemis[0].count

    def children(self):
        return [b for lvl in self.encoder + self.decoder for b in lvl] + [self.head]

    def named_parameters(self):
        out = []
        for i, lvl in enumerate(self.encoder):
            for j, blk in enumerate(lvl):
                out += [(f"enc{i}.{j}.{n}", p) for n, p in blk.named_parameters()]
        for i, lvl in enumerate(self.decoder):
            for j, blk in enumerate(lvl):
                out += [(f"dec{i}.{j}.{n}", p) for n, p in blk.named_parameters()]
        out += [(f"head.{n}", p) for n, p in self.head.named_parameters()]
        return out

    def buffers(self):
        out = {}
        for i, lvl in enumerate(self.encoder):
            for j, blk in enumerate(lvl):
                out.update({f"enc{i}.{j}.{k}": v for k, v in blk.buffers().items()})
        for i, lvl in enumerate(self.decoder):
            for j, blk in enumerate(lvl):
                out.update({f"dec{i}.{j}.{k}": v for k, v in blk.buffers().items()})
        return out

    def state_dict(self):
        state = {n: p.data for n, p in self.named_parameters()}
        state.update(self.buffers())
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        bufs = self.buffers()
        missing = (set(params) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for n, p in params.items():
            if state[n].shape != p.shape:
                raise ValueError(f"{n}: shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=p.dtype)
        for n, b in bufs.items():
            b[...] = state[n]

    def min_spatial_multiple(self):
        return 2 ** (self.cfg.depth - 1)

    def __call__(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.shape[1] != self.cfg.shells:
            raise ValueError(f"input has {x.shape[1]} shells, network expects {self.cfg.shells}")
        if x.shape[-1] != self.n_vertices:
            raise ValueError(f"input has {x.shape[-1]} vertices, network expects {self.n_vertices}")
        m = self.min_spatial_multiple()
        if any(s % m for s in x.shape[2:5]):
            raise ValueError(f"spatial dims {x.shape[2:5]} must be multiples of {m}")
        skips = []
        h = x
        for i, lvl in enumerate(self.encoder):
            for blk in lvl:
                h = blk(h)
            if i < self.cfg.depth - 1:
                skips.append(h)
                h = self.pools[i](h)
        for i in reversed(range(self.cfg.depth - 1)):
            h = self.unpools[i](h)
            h = tn.concat([h, skips[i]], axis=1)
            for blk in self.decoder[i]:
                h = blk(h)
        return tn.softplus(self.head(h))


def build_unet(cfg, dtype=np.float32, seed=None):
    net = UNet(cfg, dtype=dtype)
    init_weights(net, 0 if seed is None else seed)
    return net


def init_weights(network, seed):
    """Kaiming-normal conv weights (fan-in scaled), zero biases, unit batch-norm scale."""
    rng = np.random.default_rng(seed)
    modules = []

    def walk(m):
        modules.append(m)
        for c in m.children():
            walk(c)

    walk(network)
    for m in modules:
        if isinstance(m, HemiConv):
            std = np.sqrt(2.0 / m.fan_in)
            m.weight.data = (rng.standard_normal(m.weight.shape) * std).astype(m.weight.dtype)
            if m.bias is not None:
                m.bias.data = np.zeros_like(m.bias.data)
        elif isinstance(m, BatchNorm):
            m.gamma.data = np.ones_like(m.gamma.data)
            m.beta.data = np.zeros_like(m.beta.data)
            m.running_mean[...] = 0.0
            m.running_var[...] = 1.0


def parameter_count(network):
    return int(sum(p.size for p in network.parameters()))


def receptive_radius(cfg):
    """Spatial radius (in input voxels) beyond which inputs cannot affect an output voxel."""
    r = 0
    for i in range(cfg.depth):
        r += cfg.blocks_per_level * 2 ** i
        if i < cfg.depth - 1:
            r += 2 ** i  # pooling window
    for i in reversed(range(cfg.depth - 1)):
        r += 2 ** i + cfg.blocks_per_level * 2 ** i
    return r + 1
