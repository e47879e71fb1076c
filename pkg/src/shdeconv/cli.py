"""Command-line entry point: ``shdeconv <subcommand> [options]``.

Every subcommand takes an optional JSON config (sections grid, graph, unet,
loss, train, phantom, eval, bench), accepts ``--set section.key=value``
overrides, and writes the resolved config plus ``result.json`` into its
output directory.
"""
import argparse
import copy
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

from . import __version__

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4

DEFAULTS = {
    "grid": {"nside": 4},
    "graph": {"k_neighbors": 8, "sigma": None, "kernel": "exp", "K": 5},
    "unet": {"depth": 4, "base_features": 16, "sphere_pool_levels": None, "blocks_per_level": 2},
    "loss": {"nn": 0.1, "sparse": 5e-5, "tv": 0.5, "sigma": 1e-5},
    "train": {
        "epochs": 50, "steps_per_epoch": 10, "batch_size": 1, "patch": 16, "lr": 2e-3,
        "milestones": [30, 40, 45], "decay": 0.1, "seed": 0, "input_bvals": None,
        "input_max_dirs": None,
    },
    "phantom": {
        "dims": [16, 16, 16], "shells": [[1000.0, 29]], "n_b0": 1, "crossing_angles": [90.0],
        "snr": 30.0, "seed": 0, "d_par": 1.7e-3, "d_perp": 0.2e-3, "d_iso": 3.0e-3, "block": 4,
        "fiber_fraction": 0.8, "b0_reference": 100.0, "direction_mode": "grid", "rf_l_max": 8,
    },
    "eval": {
        "min_separation_deg": 15.0, "rel_floor": 0.1, "cone_deg": 25.0, "tissue": 0,
        "n_trials": 1000, "seed": 0, "nside": 8, "dims": [8, 8, 8], "channels_out": 4,
        "exact_grid_only": False,
    },
    "bench": {"nsides": [1, 2, 4, 8], "dims": [8, 8, 8], "K": 5, "reps": 50, "warmup": 5, "k_neighbors": 8},
}

# keys whose value may be null or a number
NULLABLE = {"graph.k_neighbors", "graph.sigma", "unet.sphere_pool_levels", "train.input_bvals",
            "train.input_max_dirs", "bench.k_neighbors"}


class SchemaError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


def _type_ok(default, value):
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def validate_config(doc, defaults=DEFAULTS):
    """Merge ``doc`` onto the defaults; unknown keys or wrong types raise :class:`SchemaError`."""
    if not isinstance(doc, dict):
        raise SchemaError("<root>", "config must be a JSON object")
    out = copy.deepcopy(defaults)
    for section, body in doc.items():
        if section not in defaults:
            raise SchemaError(section, "unknown section")
        if not isinstance(body, dict):
            raise SchemaError(section, "section must be an object")
        for key, value in body.items():
            path = f"{section}.{key}"
            if key not in defaults[section]:
                raise SchemaError(path, "unknown key")
            default = defaults[section][key]
            if value is None:
                if path not in NULLABLE:
                    raise SchemaError(path, "may not be null")
            elif default is None:
                if not isinstance(value, (int, float, list)) or isinstance(value, bool):
                    raise SchemaError(path, "expected a number or list")
            elif not _type_ok(default, value):
                raise SchemaError(path, f"expected {type(default).__name__}, got {type(value).__name__}")
            out[section][key] = value
    return out


def apply_overrides(doc, pairs):
    doc = copy.deepcopy(doc)
    for pair in pairs or []:
        if "=" not in pair:
            raise SchemaError(pair, "override must look like section.key=value")
        path, raw = pair.split("=", 1)
        parts = path.split(".")
        if len(parts) != 2:
            raise SchemaError(path, "override path must be section.key")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        doc.setdefault(parts[0], {})[parts[1]] = value
    return doc


def load_config(path, overrides=None):
    doc = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(p)
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(str(p), f"invalid JSON ({exc})") from None
    return validate_config(apply_overrides(doc, overrides))


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def versions():
    import numpy
    import scipy

    from .deconv import CONTAINER_DTYPE
    from .graph import STACK_VERSION
    from .tensor import CHECKPOINT_VERSION

    return {
        "artifact": __version__, "python": platform.python_version(),
        "numpy": numpy.__version__, "scipy": scipy.__version__,
        "formats": {"checkpoint": CHECKPOINT_VERSION, "chebyshev_stack": STACK_VERSION,
                    "volume": CONTAINER_DTYPE},
    }


def _require(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    return p


# ---------------------------------------------------------------------------
# subcommands


def _unet_config(cfg, shells, tissues):
    from .layers import UNetConfig

    g, u = cfg["graph"], cfg["unet"]
    return UNetConfig(
        depth=u["depth"], base_features=u["base_features"], K=g["K"], nside_in=cfg["grid"]["nside"],
        tissues=tissues, shells=shells, sphere_pool_levels=u["sphere_pool_levels"],
        k_neighbors=g["k_neighbors"], sigma=g["sigma"], kernel=g["kernel"],
        blocks_per_level=u["blocks_per_level"],
    )


def _phantom_spec(cfg):
    from .phantom import PhantomSpec

    p = dict(cfg["phantom"])
    p["dims"] = tuple(p["dims"])
    p["shells"] = tuple((float(b), int(n)) for b, n in p["shells"])
    p["crossing_angles"] = tuple(float(a) for a in p["crossing_angles"])
    return PhantomSpec(nside=cfg["grid"]["nside"], **p)


def cmd_phantom(args, cfg, out):
    from .harmonics import save_rf
    from .phantom import make_phantom, phantom_rf, save_phantom

    spec = _phantom_spec(cfg)
    dwi, fibers = make_phantom(spec)
    save_phantom(dwi, fibers, spec, out)
    save_rf(phantom_rf(spec), out / "rf.txt")
    return {"seed": spec.seed, "outputs": ["dwi.json", "dwi.bin", "dwi_grad.txt", "gt.json", "rf.txt"]}


def _input_indices(dwi, tcfg):
    import numpy as np

    bvals = tcfg["input_bvals"]
    if bvals is None and tcfg["input_max_dirs"] is None:
        return None
    keep = np.ones(dwi.n_samples, dtype=bool)
    if bvals is not None:
        bvals = bvals if isinstance(bvals, list) else [bvals]
        keep = np.zeros(dwi.n_samples, dtype=bool)
        for b in bvals:
            keep |= np.abs(dwi.bvals - b) <= max(50.0, 0.05 * b)
    idx = np.flatnonzero(keep)
    n = tcfg["input_max_dirs"]
    if n is not None:
        dw = idx[dwi.bvals[idx] > 50]
        b0 = idx[dwi.bvals[idx] <= 50]
        idx = np.sort(np.concatenate([b0, dw[: int(n)]]))
    return idx


def _load_rf(args, data_dir):
    from .harmonics import load_rf

    path = Path(args.rf) if getattr(args, "rf", None) else data_dir / "rf.txt"
    return load_rf(_require(path))


def cmd_train(args, cfg, out):
    from .deconv import LossWeights, Schedule, load_dwi, network_input, train
    from .harmonics import save_rf
    from .layers import build_unet
    from .grid import healpix_hemisphere

    data = _require(args.data)
    dwi = load_dwi(data)
    rf = _load_rf(args, data if data.is_dir() else data.parent)
    t = cfg["train"]
    idx = _input_indices(dwi, t)
    shells = network_input(dwi, healpix_hemisphere(cfg["grid"]["nside"]), idx).shape[0]
    net = build_unet(_unet_config(cfg, shells, rf.n_tissues), seed=t["seed"])
    sched = Schedule(epochs=t["epochs"], steps_per_epoch=t["steps_per_epoch"], batch_size=t["batch_size"],
                     patch=t["patch"], lr=t["lr"], milestones=tuple(t["milestones"]), decay=t["decay"],
                     seed=t["seed"])
    res = train(dwi, rf, net, LossWeights(**cfg["loss"]), sched, input_indices=idx,
                log_path=out / "metrics.jsonl", checkpoint_path=out / "ckpt", verbose=args.verbose)
    save_rf(rf, out / "rf.txt")
    meta = {"input_indices": None if idx is None else [int(i) for i in idx]}
    (out / "train_meta.json").write_text(json.dumps(meta))
    return {"seed": t["seed"], "final_loss": res.history[-1]["total"], "best_loss": res.best_loss,
            "outputs": ["ckpt", "metrics.jsonl", "rf.txt", "train_meta.json"]}


def cmd_infer(args, cfg, out):
    import numpy as np

    from .deconv import FodfField, infer, load_dwi, load_model, save_fodf
    from .grid import export_vertices

    model_path = _require(args.model)
    net, _ = load_model(model_path)
    dwi = load_dwi(_require(args.data))
    meta_path = model_path.parent / "train_meta.json"
    idx = None
    if meta_path.exists():
        idx = json.loads(meta_path.read_text()).get("input_indices")
    F = infer(net, dwi, input_indices=None if idx is None else np.array(idx), tile=args.tile)
    export_vertices(F.hemi, out / "vertices.txt")
    save_fodf(FodfField(F.values, F.hemi), out / "fodf.json")
    return {"outputs": ["fodf.json", "fodf.bin", "vertices.txt"]}


def cmd_eval_peaks(args, cfg, out):
    import numpy as np

    from .deconv import load_fodf
    from .evaluation import detect_peaks, gt_directions, region_voxels, sweep_thresholds
    from .phantom import load_ground_truth

    e = cfg["eval"]
    F, _ = load_fodf(_require(args.fodf))
    fibers = load_ground_truth(_require(args.gt))
    peaks = detect_peaks(F.values[e["tissue"]], F.hemi, e["min_separation_deg"], e["rel_floor"])
    gt = gt_directions(fibers)
    summary = {"params": peaks.params | {"cone_deg": e["cone_deg"]}, "regions": {}}
    labels = sorted(set(fibers.labels.ravel().tolist()))
    fiber_vox = np.flatnonzero(fibers.count().ravel() > 0)
    for name, vox in [("all", fiber_vox)] + [(lab, region_voxels(fibers, lab)) for lab in labels]:
        report = sweep_thresholds(peaks, gt, vox, e["cone_deg"])
        report.write_csv(out / f"thresholds_{name}.csv")
        s = report.summary()
        counts = peaks.counts().ravel()[vox]
        s["n_voxels"] = int(len(vox))
        s["mean_peak_count"] = float(counts.mean()) if len(vox) else 0.0
        summary["regions"][name] = s
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return {"outputs": ["summary.json"] + [f"thresholds_{n}.csv" for n in summary["regions"]],
            "best_f1_all": summary["regions"]["all"]["best"]["f1"]}


def cmd_equivariance(args, cfg, out):
    from .evaluation import (concat_graph_op, hemi_conv_op, run_equivariance_suite, spatial_sh_op,
                             write_suite_reports)
    from .layers import level_operators

    e, g = cfg["eval"], cfg["graph"]
    hemi, stack = level_operators(e["nside"], g["K"], g["k_neighbors"], g["sigma"], g["kernel"])
    ops = {
        "hemi_conv": hemi_conv_op(stack, c_out=e["channels_out"]),
        "spatial_sh": spatial_sh_op(hemi),
        "concat_graph": concat_graph_op(stack, c_out=e["channels_out"]),
    }
    results = run_equivariance_suite(ops, n_trials=e["n_trials"], seed=e["seed"], nside=e["nside"],
                                     dims=tuple(e["dims"]), exact_grid_only=e["exact_grid_only"])
    summary = write_suite_reports(results, out / "trials.csv", out / "summary.json")
    return {"seed": e["seed"], "summary": summary, "outputs": ["trials.csv", "summary.json"]}


def cmd_bench(args, cfg, out):
    from .bench import BASELINE, ablation_table, write_csv

    b = cfg["bench"]
    results, gates = ablation_table(tuple(b["nsides"]), tuple(b["dims"]), b["K"], b["reps"], b["warmup"],
                                    b["k_neighbors"])
    write_csv(results, out / "ablation.csv")
    summary = {
        "baseline": BASELINE,
        "gates": {str(n): {k: {"max_abs_diff": v[0], "ok": v[1]} for k, v in g.items()} for n, g in gates.items()},
        "failures": [{"variant": r.variant, "nside": r.nside, "error": r.error} for r in results if not r.ok],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return {"outputs": ["ablation.csv", "summary.json"]}


def cmd_export_grid(args, cfg, out):
    from .grid import export_vertices, healpix_sphere, hemisphere_restrict

    nside = args.nside or cfg["grid"]["nside"]
    sphere = healpix_sphere(nside)
    export_vertices(sphere, out / "sphere.txt")
    export_vertices(hemisphere_restrict(sphere), out / "hemisphere.txt")
    return {"nside": nside, "outputs": ["sphere.txt", "hemisphere.txt"]}


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval-peaks": cmd_eval_peaks,
    "equivariance": cmd_equivariance,
    "bench": cmd_bench,
    "export-grid": cmd_export_grid,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="shdeconv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="store_true", help="print versions and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (JSON-parsed)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1, help="BLAS thread count")
        p.add_argument("--verbose", action="store_true")
        return p

    common(sub.add_parser("phantom", help="generate a synthetic phantom"))
    p = common(sub.add_parser("train", help="train the deconvolution network"))
    p.add_argument("--data", required=True, help="phantom/data directory or dwi.json")
    p.add_argument("--rf", help="response function file (default: <data>/rf.txt)")
    p = common(sub.add_parser("infer", help="predict fODFs with a trained checkpoint"))
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="data directory or dwi.json")
    p.add_argument("--tile", type=int, default=None, help="sliding-window tile size")
    p = common(sub.add_parser("eval-peaks", help="peak metrics against ground truth"))
    p.add_argument("--fodf", required=True, help="fodf.json from infer")
    p.add_argument("--gt", required=True, help="gt.json from phantom")
    common(sub.add_parser("equivariance", help="equivariance-error suite"))
    common(sub.add_parser("bench", help="runtime/memory ablation of graph-filter variants"))
    p = common(sub.add_parser("export-grid", help="write HEALPix vertex tables"))
    p.add_argument("--nside", type=int, default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.version:
        print(json.dumps(versions(), indent=2))
        return EXIT_OK
    if not args.command:
        parser.print_help()
        return EXIT_SCHEMA
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(args.threads))
    out = Path(args.out)
    result = {"command": args.command, "status": "error"}
    code = EXIT_OK
    try:
        cfg = load_config(args.config, args.set)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
        if args.verbose:
            print(json.dumps(cfg, indent=2, sort_keys=True))
        result.update(config_hash=config_hash(cfg), versions=versions(), threads=args.threads)
        result.update(COMMANDS[args.command](args, cfg, out))
        result["status"] = "ok"
    except SchemaError as exc:
        code = EXIT_SCHEMA
        result.update(error=str(exc), key=exc.path)
    except FileNotFoundError as exc:
        code = EXIT_MISSING
        result.update(error=f"missing file: {exc}")
    except (FloatingPointError, ArithmeticError) as exc:
        code = EXIT_NUMERICAL
        result.update(error=str(exc))
    except Exception as exc:  # numerical failures from linear algebra and training
        from numpy.linalg import LinAlgError

        from .deconv import TrainingDiverged

        if isinstance(exc, (LinAlgError, TrainingDiverged)):
            code = EXIT_NUMERICAL
            result.update(error=str(exc))
        else:
            raise
    result["exit_code"] = code
    if code != EXIT_OK:
        print(f"shdeconv {args.command}: {result['error']}", file=sys.stderr)
    if out.exists() or code == EXIT_OK:
        out.mkdir(parents=True, exist_ok=True)
        (out / "result.json").write_text(json.dumps(result, indent=2, default=float))
    return code


if __name__ == "__main__":
    sys.exit(main())
