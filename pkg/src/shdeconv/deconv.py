"""fODF forward model, the regularized reconstruction loss, training and inference."""
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .grid import HemisphereSampling
from .harmonics import (
    IllConditionedFit,
    fit_matrix,
    fodf_degree,
    rf_scaling,
    sh_matrix,
    shell_groups,
    shell_resampling_matrices,
)
from .layers import UNet, UNetConfig, build_unet, receptive_radius
from .tensor import Adam, Tensor, load_checkpoint, save_checkpoint

CHECKPOINT_KIND = "shd-unet"
CONTAINER_DTYPE = "f32le"
CONTAINER_LAYOUT = "sample-fastest, then x,y,z"


class TrainingDiverged(RuntimeError):
    """Raised when a loss term or gradient becomes non-finite; carries the last good state."""

    def __init__(self, message, state=None, epoch=None):
        super().__init__(message)
        self.state = state
        self.epoch = epoch


@dataclass
class DwiVolume:
    samples: np.ndarray  # (X, Y, Z, N)
    bvals: np.ndarray
    bvecs: np.ndarray
    mask: np.ndarray | None = None
    b0_reference: float = 1.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        self.bvals = np.asarray(self.bvals, dtype=np.float64)
        self.bvecs = np.asarray(self.bvecs, dtype=np.float64)
        if self.samples.ndim != 4:
            raise ValueError(f"samples must be (X, Y, Z, N), got shape {self.samples.shape}")
        n = self.samples.shape[-1]
        if self.bvals.shape != (n,) or self.bvecs.shape != (n, 3):
            raise ValueError(f"gradient table does not match {n} samples")
        norms = np.linalg.norm(self.bvecs, axis=1)
        weighted = self.bvals > 50.0
        if np.any(np.abs(norms[weighted] - 1.0) > 1e-6):
            raise ValueError("diffusion-weighted gradient directions must be unit vectors")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.dims:
                raise ValueError(f"mask shape {self.mask.shape} != dims {self.dims}")
        if not self.b0_reference > 0:
            raise ValueError("b0_reference must be positive")

    @property
    def dims(self):
        return self.samples.shape[:3]

    @property
    def n_samples(self):
        return self.samples.shape[-1]

    def normalized(self):
        return self.samples / self.b0_reference

    def full_mask(self):
        return np.ones(self.dims, dtype=bool) if self.mask is None else self.mask

    def subset(self, indices):
        """Same volume restricted to a subset of gradient-table rows."""
        idx = np.asarray(indices)
        return DwiVolume(self.samples[..., idx], self.bvals[idx], self.bvecs[idx], self.mask, self.b0_reference)


@dataclass
class FodfField:
    values: np.ndarray  # (T, X, Y, Z, V+)
    hemi: HemisphereSampling

    def __post_init__(self):
        if self.values.shape[-1] != self.hemi.count:
            raise ValueError(f"{self.values.shape[-1]} vertices but sampling has {self.hemi.count}")

    @property
    def n_tissues(self):
        return self.values.shape[0]

    @property
    def dims(self):
        return self.values.shape[1:4]


@dataclass
class LossWeights:
    nn: float = 1e-1
    sparse: float = 5e-5
    tv: float = 5e-1
    sigma: float = 1e-5

    def __post_init__(self):
        if min(self.nn, self.sparse, self.tv) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not self.sigma > 0:
            raise ValueError("sparsity sigma must be positive")


# ---------------------------------------------------------------------------
# forward model


class SignalModel:
    """Linear map from hemisphere fODF samples of every tissue to dMRI samples.

    Per tissue: fit SH coefficients on V+ (degree capped at 18), scale each
    coefficient by the shell's zonal response, synthesize at the gradient
    directions. ``matrix`` has shape (T, V+, N).
    """

    def __init__(self, hemi, rf, bvals, bvecs, l_max=None):
        bvals = np.asarray(bvals, dtype=np.float64)
        bvecs = np.asarray(bvecs, dtype=np.float64)
        self.l_max = fodf_degree(hemi.count) if l_max is None else l_max
        Yv = sh_matrix(hemi.vertices, self.l_max)
        try:
            fit = fit_matrix(Yv)
        except IllConditionedFit:
            fit = fit_matrix(Yv, reg=1e-6)
        dirs = np.where(np.linalg.norm(bvecs, axis=1, keepdims=True) > 0.5, bvecs, [0.0, 0.0, 1.0])
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        Yd = sh_matrix(dirs, self.l_max).values  # (N, nc)
        T = rf.n_tissues
        mat = np.zeros((T, hemi.count, bvals.size))
        for b, idx in shell_groups(bvals):
            try:
                scale = rf_scaling(rf, b, self.l_max)  # (T, nc)
            except ValueError:
                raise ValueError(f"response function has no shell for b={b:g}") from None
            for t in range(T):
                mat[t][:, idx] = fit.T @ (Yd[idx] * scale[t]).T
        self.matrix = mat
        self.n_tissues = T
        self.hemi = hemi
        self._flat = {}

    def flat(self, dtype=np.float32):
        key = np.dtype(dtype).str
        if key not in self._flat:
            T, V, N = self.matrix.shape
            self._flat[key] = np.ascontiguousarray(self.matrix.reshape(T * V, N), dtype=dtype)
        return self._flat[key]

    def apply(self, F):
        """Autodiff reconstruction: F (N, T, X, Y, Z, V+) -> (N, X, Y, Z, n_samples)."""
        n, T, X, Y, Z, V = F.shape
        flat = tn.reshape(tn.permute(F, (0, 2, 3, 4, 1, 5)), (n, X, Y, Z, T * V))
        return flat @ Tensor(self.flat(F.dtype))

    def __call__(self, values):
        """numpy reconstruction of (T, X, Y, Z, V+) values -> (X, Y, Z, n_samples)."""
        return np.einsum("txyzv,tvn->xyzn", values, self.matrix)


def reconstruct_signal(F, rf, bvals, bvecs):
    model = SignalModel(F.hemi, rf, bvals, bvecs)
    return model(F.values)


# ---------------------------------------------------------------------------
# loss


def _masked_mean(sq, mask, count):
    if mask is not None:
        sq = sq * mask
    return sq.sum() * (1.0 / count)


def tv_loss(F, mask=None):
    """Sum over the 3 spatial axes of mean squared forward differences.

    ``F`` has layout (N, T, X, Y, Z, V); the difference past the last slice is
    zero (Neumann). With a voxel mask (N, X, Y, Z), only differences between
    two masked voxels count and the mean runs over masked elements.
    """
    F = tn._wrap(F)
    n, T, X, Y, Z, V = F.shape
    m = None if mask is None else np.asarray(mask, dtype=F.dtype)[:, None, :, :, :, None]
    count = F.data.size if m is None else max(float(m.sum()) * T * V, 1.0)
    total = None
    for ax, size in zip((2, 3, 4), (X, Y, Z)):
        if size < 2:
            continue
        hi = [slice(None)] * 6
        lo = [slice(None)] * 6
        hi[ax], lo[ax] = slice(1, None), slice(0, -1)
        d = F[tuple(hi)] - F[tuple(lo)]
        pair = None if m is None else m[tuple(hi)] * m[tuple(lo)]
        term = _masked_mean(tn.square(d), pair, count)
        total = term if total is None else total + term
    return total if total is not None else Tensor(np.zeros((), dtype=F.dtype))


def loss_total(S, F, model, weights, mask=None):
    """Reconstruction loss with non-negativity, sparsity and TV regularizers.

    ``S`` is (N, X, Y, Z, n_samples), ``F`` a Tensor (N, T, X, Y, Z, V+),
    ``model`` a :class:`SignalModel`. Returns ``(total, terms)`` where ``terms``
    maps term name to its weighted scalar Tensor; ``total`` is their sum.
    """
    F = tn._wrap(F)
    S = np.asarray(S, dtype=F.dtype)
    n, T, X, Y, Z, V = F.shape
    vm = None if mask is None else np.asarray(mask, dtype=F.dtype)
    n_vox = n * X * Y * Z if vm is None else max(float(vm.sum()), 1.0)

    resid = model.apply(F) - Tensor(S)
    data = _masked_mean(tn.square(resid), None if vm is None else vm[..., None], n_vox * S.shape[-1])

    fm = None if vm is None else vm[:, None, :, :, :, None]
    count = n_vox * T * V
    nn = _masked_mean(tn.square(tn.minimum0(F)), fm, count)
    sp = _masked_mean(tn.square(tn.log1p(tn.square(F) * (1.0 / weights.sigma ** 2))), fm, count)
    tv = tv_loss(F, mask)

    terms = {
        "data": data,
        "nonneg": nn * weights.nn,
        "sparsity": sp * weights.sparse,
        "tv": tv * weights.tv,
    }
    for name, t in terms.items():
        if not np.isfinite(t.data):
            raise FloatingPointError(f"loss term '{name}' is not finite")
    total = terms["data"] + terms["nonneg"] + terms["sparsity"] + terms["tv"]
    return total, terms


# ---------------------------------------------------------------------------
# training


@dataclass
class Schedule:
    epochs: int = 50
    steps_per_epoch: int = 10
    batch_size: int = 16
    patch: int = 16
    lr: float = 1.7e-2
    milestones: tuple = (30, 40, 45)
    decay: float = 0.1
    seed: int = 0
    calibrate_head: bool = True
    recalibrate_bn: int = 8

    def lr_at(self, epoch):
        """Learning rate during 1-based ``epoch``; decays apply after each milestone."""
        return self.lr * self.decay ** sum(epoch > m for m in self.milestones)


@dataclass
class TrainResult:
    net: UNet
    history: list = field(default_factory=list)
    best_loss: float = math.inf


@dataclass
class PreparedVolume:
    inputs: np.ndarray  # (B, X, Y, Z, V+)
    target: np.ndarray  # (X, Y, Z, N)
    mask: np.ndarray  # (X, Y, Z)


def network_input(dwi, hemi, input_indices=None):
    """Normalized, shell-resampled network input (B, X, Y, Z, V+)."""
    src = dwi if input_indices is None else dwi.subset(input_indices)
    mats = shell_resampling_matrices(src.bvals, src.bvecs, hemi)
    s = src.normalized()
    shells = [s[..., idx] @ M for _, idx, M in mats]
    return np.stack(shells, axis=0).astype(np.float32)


def prepare(dwi, hemi, input_indices=None):
    mask = dwi.full_mask()
    if not mask.any():
        raise ValueError("mask is empty; nothing to train on")
    return PreparedVolume(
        inputs=network_input(dwi, hemi, input_indices),
        target=dwi.normalized().astype(np.float32),
        mask=mask,
    )


def _patch_origins(mask, patch, multiple):
    dims = mask.shape
    if any(d < patch for d in dims):
        raise ValueError(f"volume {dims} is smaller than patch size {patch}")
    ranges = [np.arange(0, d - patch + 1) for d in dims]
    origins = [(i, j, k) for i in ranges[0] for j in ranges[1] for k in ranges[2]
               if mask[i:i + patch, j:j + patch, k:k + patch].any()]
    if not origins:
        raise ValueError("no patch intersects the mask")
    return np.array(origins)


def _sample_batch(prepared, origins, patch, batch, rng):
    xs, ss, ms = [], [], []
    for _ in range(batch):
        v = int(rng.integers(len(prepared)))
        o = origins[v][rng.integers(len(origins[v]))]
        sl = tuple(slice(a, a + patch) for a in o)
        p = prepared[v]
        xs.append(p.inputs[(slice(None),) + sl])
        ss.append(p.target[sl])
        ms.append(p.mask[sl])
    return np.stack(xs), np.stack(ss), np.stack(ms)


def calibrate_head(net, model, prepared, gain=0.1):
    """Set the output bias so the initial fODF reconstructs the mean measured signal.

    Each tissue gets an equal share of the masked mean signal, spread
    uniformly over the sphere, and the head weights are shrunk by ``gain`` so
    the softplus starts close to that level everywhere. Without this the softplus head starts an order
    of magnitude above the normalized signal and Adam overshoots into the
    flat negative tail.
    """
    target = np.mean([p.target[p.mask].mean() for p in prepared])
    per_unit = model.matrix.sum(axis=1).mean(axis=1)  # signal of F = 1 on every vertex, per tissue
    share = target / (model.n_tissues * np.maximum(per_unit, 1e-12))
    # inverse softplus
    bias = np.log(np.expm1(np.maximum(share, 1e-6)))
    net.head.bias.data = bias.astype(net.head.bias.dtype)
    net.head.weight.data = (net.head.weight.data * gain).astype(net.head.weight.dtype)
    return share


def recalibrate_batchnorm(net, batches):
    """Replace running statistics by exact averages over ``batches`` (inputs only).

    Running means from a short, fast-moving training run lag the final
    weights; a few forward passes with cumulative averaging remove the
    train/eval mismatch.
    """
    bns = [blk.bn for lvl in net.encoder + net.decoder for blk in lvl]
    saved = [bn.momentum for bn in bns]
    for bn in bns:
        bn.running_mean[...] = 0.0
        bn.running_var[...] = 0.0
    net.train()
    try:
        for i, x in enumerate(batches):
            for bn in bns:
                bn.momentum = 1.0 / (i + 1)
            net(Tensor(x))
    finally:
        for bn, m in zip(bns, saved):
            bn.momentum = m
    net.eval()


def train(volumes, rf, net, weights=None, schedule=None, input_indices=None,
          log_path=None, checkpoint_path=None, verbose=False):
    """Train ``net`` on patches drawn from ``volumes`` (a DwiVolume or a list).

    The network input uses the gradient-table rows ``input_indices`` (all by
    default); the loss reconstructs every row, which allows super-resolution
    training. Returns a :class:`TrainResult`; writes one JSON line per epoch to
    ``log_path`` and the final weights to ``checkpoint_path`` when given.
    """
    weights = weights or LossWeights()
    schedule = schedule or Schedule()
    if isinstance(volumes, DwiVolume):
        volumes = [volumes]
    hemi = net.hemis[0]
    prepared = [prepare(v, hemi, input_indices) for v in volumes]
    if prepared[0].inputs.shape[0] != net.cfg.shells:
        raise ValueError(f"data has {prepared[0].inputs.shape[0]} shells, network expects {net.cfg.shells}")
    ref = volumes[0]
    model = SignalModel(hemi, rf, ref.bvals, ref.bvecs)
    if model.n_tissues != net.cfg.tissues:
        raise ValueError(f"response function has {model.n_tissues} tissues, network outputs {net.cfg.tissues}")
    patch = min(schedule.patch, *[min(p.mask.shape) for p in prepared])
    m = net.min_spatial_multiple()
    patch -= patch % m
    if patch < m:
        raise ValueError(f"volumes are too small for a depth-{net.cfg.depth} network")
    origins = [_patch_origins(p.mask, patch, m) for p in prepared]

    rng = np.random.default_rng(schedule.seed)
    if schedule.calibrate_head and net.head.bias is not None:
        calibrate_head(net, model, prepared)
    params = net.parameters()
    opt = Adam(params, lr=schedule.lr)
    result = TrainResult(net=net)
    last_good = {k: v.copy() for k, v in net.state_dict().items()}
    log = open(log_path, "w") if log_path else None
    net.train()
    t0 = time.perf_counter()
    try:
        for epoch in range(1, schedule.epochs + 1):
            opt.lr = schedule.lr_at(epoch)
            sums = {}
            for _ in range(schedule.steps_per_epoch):
                x, s, mk = _sample_batch(prepared, origins, patch, schedule.batch_size, rng)
                opt.zero_grad()
                try:
                    F = net(Tensor(x))
                    total, terms = loss_total(s, F, model, weights, mask=mk)
                    total.backward()
                    opt.step()
                except FloatingPointError as exc:
                    net.load_state_dict(last_good)
                    raise TrainingDiverged(f"epoch {epoch}: {exc}", state=last_good, epoch=epoch) from exc
                for k, v in terms.items():
                    sums[k] = sums.get(k, 0.0) + float(v.data)
                sums["total"] = sums.get("total", 0.0) + float(total.data)
            row = {k: v / schedule.steps_per_epoch for k, v in sums.items()}
            row.update(epoch=epoch, lr=opt.lr, wall_time=time.perf_counter() - t0)
            result.history.append(row)
            result.best_loss = min(result.best_loss, row["total"])
            last_good = {k: v.copy() for k, v in net.state_dict().items()}
            if log:
                log.write(json.dumps(row) + "\n")
                log.flush()
            if verbose:
                print(f"epoch {epoch:3d}  loss {row['total']:.5f}  lr {opt.lr:.2e}")
    finally:
        if log:
            log.close()
    if schedule.recalibrate_bn:
        bn_rng = np.random.default_rng(schedule.seed + 1)
        recalibrate_batchnorm(net, (_sample_batch(prepared, origins, patch, schedule.batch_size, bn_rng)[0]
                                    for _ in range(schedule.recalibrate_bn)))
    net.eval()
    if checkpoint_path:
        save_model(net, checkpoint_path)
    return result


def save_model(net, path, extra=None):
    config = {"kind": CHECKPOINT_KIND, "unet": net.cfg.to_dict()}
    if extra:
        config.update(extra)
    save_checkpoint(path, net.state_dict(), config)


def load_model(path):
    config, tensors = load_checkpoint(path)
    if config.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path} is not a network checkpoint")
    net = UNet(UNetConfig(**config["unet"]))
    net.load_state_dict(tensors)
    net.eval()
    return net, config


# ---------------------------------------------------------------------------
# inference


def _tile_starts(size, tile, stride):
    if size <= tile:
        return [0]
    starts = list(range(0, size - tile + 1, stride))
    if starts[-1] != size - tile:
        starts.append(size - tile)
    return starts


def predict(net, inputs, tile=None):
    """Forward ``inputs`` (B, X, Y, Z, V+) through ``net`` in eval mode: (T, X, Y, Z, V+).

    With ``tile`` set, the volume is processed in overlapping windows aligned to
    the pooling grid. Each window contributes only voxels at least one
    receptive-field radius from its cut edges, and overlapping contributions
    are averaged, so the result matches a single pass.
    """
    net.eval()
    B, X, Y, Z, V = inputs.shape
    dims = (X, Y, Z)
    m = net.min_spatial_multiple()
    if any(d % m for d in dims):
        raise ValueError(f"spatial dims {dims} must be multiples of {m}")
    x = inputs[None].astype(net.dtype)
    if tile is None or all(d <= tile for d in dims):
        return net(Tensor(x)).data[0]
    tile = max(m, tile - tile % m)
    margin = receptive_radius(net.cfg)
    stride = tile - 2 * margin
    stride -= stride % m
    if stride < m:
        return net(Tensor(x)).data[0]
    out = np.zeros((net.cfg.tissues,) + dims + (V,), dtype=np.float64)
    weight = np.zeros(dims)
    starts = [_tile_starts(d, tile, stride) for d in dims]
    for i in starts[0]:
        for j in starts[1]:
            for k in starts[2]:
                o = (i, j, k)
                sl = tuple(slice(a, min(a + tile, d)) for a, d in zip(o, dims))
                y = net(Tensor(np.ascontiguousarray(x[(slice(None), slice(None)) + sl]))).data[0]
                keep = []
                for a, d, s in zip(o, dims, sl):
                    lo = 0 if a == 0 else margin
                    hi = (s.stop - a) if s.stop == d else (s.stop - a - margin)
                    keep.append(slice(lo, hi))
                tgt = tuple(slice(a + kk.start, a + kk.stop) for a, kk in zip(o, keep))
                out[(slice(None),) + tgt] += y[(slice(None),) + tuple(keep)]
                weight[tgt] += 1.0
    if np.any(weight == 0):
        raise RuntimeError("tiling left voxels uncovered")
    return (out / weight[None, :, :, :, None]).astype(net.dtype)


def infer(net, dwi, input_indices=None, tile=None):
    hemi = net.hemis[0]
    x = network_input(dwi, hemi, input_indices)
    if x.shape[0] != net.cfg.shells:
        raise ValueError(f"data has {x.shape[0]} shells, network expects {net.cfg.shells}")
    return FodfField(values=predict(net, x, tile=tile), hemi=hemi)


# ---------------------------------------------------------------------------
# file formats


def _json_path(path):
    p = Path(path)
    return p if p.suffix == ".json" else p.with_suffix(".json")


def write_volume(path, samples, **meta):
    """Write (X, Y, Z, S) samples as a JSON sidecar plus raw little-endian f32 ``.bin``."""
    samples = np.asarray(samples)
    if samples.ndim != 4:
        raise ValueError("volume samples must be (X, Y, Z, S)")
    jp = _json_path(path)
    bp = jp.with_suffix(".bin")
    header = {
        "dims": list(samples.shape[:3]),
        "n_samples": int(samples.shape[3]),
        "dtype": CONTAINER_DTYPE,
        "layout": CONTAINER_LAYOUT,
        "data_file": bp.name,
    }
    header.update(meta)
    # sample index fastest, then x, then y, z slowest
    raw = np.ascontiguousarray(samples.transpose(2, 1, 0, 3), dtype="<f4")
    bp.write_bytes(raw.tobytes())
    jp.write_text(json.dumps(header, indent=2))
    return jp


def read_volume(path):
    jp = _json_path(path)
    if not jp.exists():
        raise FileNotFoundError(jp)
    header = json.loads(jp.read_text())
    if header.get("dtype") != CONTAINER_DTYPE:
        raise ValueError(f"unsupported container dtype {header.get('dtype')!r}")
    X, Y, Z = header["dims"]
    S = header["n_samples"]
    bp = jp.parent / header.get("data_file", jp.with_suffix(".bin").name)
    raw = np.frombuffer(bp.read_bytes(), dtype="<f4")
    if raw.size != X * Y * Z * S:
        raise ValueError(f"{bp} holds {raw.size} values, header expects {X * Y * Z * S}")
    return raw.reshape(Z, Y, X, S).transpose(2, 1, 0, 3).astype(np.float32), header


def write_gradient_table(path, bvals, bvecs):
    rows = np.column_stack([bvals, bvecs])
    np.savetxt(path, rows, fmt="%.17g")


def read_gradient_table(path):
    rows = np.loadtxt(path, ndmin=2)
    return rows[:, 0], rows[:, 1:4]


def save_dwi(dwi, directory, stem="dwi", **meta):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    grad = f"{stem}_grad.txt"
    write_gradient_table(d / grad, dwi.bvals, dwi.bvecs)
    extra = {"gradients_file": grad, "b0_reference": float(dwi.b0_reference)}
    if dwi.mask is not None:
        mask_stem = f"{stem}_mask"
        write_volume(d / f"{mask_stem}.json", dwi.mask[..., None].astype(np.float32))
        extra["mask_file"] = f"{mask_stem}.json"
    extra.update(meta)
    return write_volume(d / f"{stem}.json", dwi.samples, **extra)


def load_dwi(path):
    p = Path(path)
    if p.is_dir():
        p = p / "dwi.json"
    samples, header = read_volume(p)
    bvals, bvecs = read_gradient_table(p.parent / header["gradients_file"])
    mask = None
    if header.get("mask_file"):
        m, _ = read_volume(p.parent / header["mask_file"])
        mask = m[..., 0] > 0.5
    return DwiVolume(samples, bvals, bvecs, mask=mask, b0_reference=header.get("b0_reference", 1.0))


def save_fodf(F, path, vertices_file="vertices.txt", **meta):
    T = F.n_tissues
    values = np.moveaxis(F.values, 0, 3).reshape(F.dims + (T * F.hemi.count,))
    return write_volume(path, values, tissues=T, nside=F.hemi.nside,
                        n_vertices=F.hemi.count, vertices_file=vertices_file, **meta)


def load_fodf(path):
    from .grid import healpix_hemisphere

    values, header = read_volume(path)
    hemi = healpix_hemisphere(header["nside"])
    T = header["tissues"]
    v = values.reshape(values.shape[:3] + (T, hemi.count))
    return FodfField(values=np.moveaxis(v, 3, 0), hemi=hemi), header


def metrics_rows(path):
    return [json.loads(line) for line in open(path) if line.strip()]


def schedule_dict(s):
    d = asdict(s)
    d["milestones"] = list(d["milestones"])
    return d
