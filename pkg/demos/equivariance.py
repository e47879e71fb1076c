"""Rotation-equivariance error of three graph/spatial layers on random lattice rotations.

    python demos/equivariance.py [n_trials]
"""
import sys

import numpy as np

from shdeconv.evaluation import concat_graph_op, hemi_conv_op, run_equivariance_suite, spatial_sh_op
from shdeconv.graph import hemi_stack
from shdeconv.grid import healpix_hemisphere

n_trials = int(sys.argv[1]) if len(sys.argv) > 1 else 5
hemi = healpix_hemisphere(8)
_, stack = hemi_stack(8, 5)
ops = {"hemi_conv": hemi_conv_op(stack, c_out=4), "spatial_sh": spatial_sh_op(hemi),
       "concat_graph": concat_graph_op(stack, c_out=4)}
for r in run_equivariance_suite(ops, n_trials=n_trials, seed=0, nside=8, dims=(8, 8, 8)):
    print(f"{r.name:>13} {r.mode:>6}  median {np.median(r.errors):.2e}  max {np.max(r.errors):.2e}")
