#!/usr/bin/env python3
"""Smoke test for the priorflow Python extension.

Builds the cdylib with cargo if needed, loads it, and exercises the main
types and operations against known values.

Usage: python3 python/smoke_test.py
"""

import json
import math
import os
import shutil
import subprocess
import sys
import tempfile

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def ensure_module():
    lib = os.path.join(REPO, "target", "release", "libpriorflow.so")
    if not os.path.exists(lib):
        print("building priorflow-py ...")
        subprocess.run(
            ["cargo", "build", "--release", "-p", "priorflow-py"],
            cwd=REPO,
            check=True,
        )
    stage = tempfile.mkdtemp(prefix="priorflow-py-")
    shutil.copy(lib, os.path.join(stage, "priorflow.so"))
    sys.path.insert(0, stage)


def approx(a, b, rel=1e-9, abs_tol=0.0):
    gap = abs(a - b)
    assert gap <= max(rel * max(abs(a), abs(b)), abs_tol), f"{a} vs {b} (gap {gap})"


def main():
    ensure_module()
    import priorflow as pf

    # spectra
    approx(pf.levelset_stddev(1, 8.0, 4.0), (math.pi**2 + 64.0) ** -2)
    approx(pf.levelset_stddev(1, 5.0, 4.0, k=1), (2 * math.pi**2 + 25.0) ** -2)
    approx(pf.matern_stddev(1, 1.0, 0.5, 1.5, 2, k=1), 0.2343, rel=1e-3)

    # prior sampling: deterministic, bounded for the smooth level-set family
    mesh = pf.Mesh(1, 65)
    spec = pf.PriorSpec.level_set(8.0, 1.0, 2.0, tau=10.0, modes=20)
    z1 = pf.push_sample(spec, 42, mesh)
    z2 = pf.push_sample(spec, 42, mesh)
    assert z1 == z2, "push_sample must be deterministic per seed"
    assert all(1.0 <= v <= 2.0 for v in z1)

    # solver: analytic midpoint value for constant coefficients
    mesh = pf.Mesh(1, 257)
    u = pf.solve_darcy([1.0] * 257, 10.0, mesh)
    approx(u[128], 1.25, rel=1e-7)
    r = pf.residual([1.0] * 257, u, 10.0, mesh)
    assert max(abs(v) for v in r) < 1e-9

    # observation picks nodal values
    y = pf.observe(u, [128, 64], mesh)
    approx(y[0], 1.25, rel=1e-7)

    # divergences
    approx(pf.w2sq_1d([0.0, 2.0], [1.0, 3.0]), 1.0)
    approx(pf.w2sq_dirac([0.02, 0.0], [[0.0, 0.0]], 0.01), 4.0)
    dirs = pf.sample_sphere(5, 200, 3)
    for row in dirs:
        approx(sum(v * v for v in row), 1.0, rel=1e-12)
    batch = [[float(i), float(-i)] for i in range(8)]
    assert pf.sw2sq(batch, batch, 0.5, 64, 1) == 0.0

    # dataset generation round-trips through JSON
    mesh = pf.Mesh(1, 33)
    sharp = pf.PriorSpec.level_set(8.0, 1.0, 2.0, sharp=True, modes=10)
    ds = json.loads(pf.generate_dataset_json(sharp, 5, 8, 0.01, 10.0, mesh, 11))
    assert ds["N"] == 5 and ds["d_y"] == 8
    assert len(ds["observations"]) == 5

    # Bayes recovery against the conjugate posterior
    (m, s), (m_hat, s_hat) = pf.bayes_check(1.0, 1.0, n_samples=2048, steps=800, seed=0)
    approx(m_hat, 0.5)
    approx(s_hat, math.sqrt(0.5))
    approx(m, m_hat, rel=0.05)
    approx(s, s_hat, rel=0.05)
    approx(pf.gaussian_kl(1.0, 1.0, 0.0, 1.0), 0.5)

    # operator surrogate: boundary exactly zero, residual loss finite
    mesh = pf.Mesh(1, 17)
    op = pf.Operator(mesh, layers=2, channels=4, modes=4, seed=1)
    z = pf.push_sample(pf.PriorSpec.level_set(8.0, 1.0, 2.0, modes=6), 3, mesh)
    uhat = op.forward(z, mesh)
    assert uhat[0] == 0.0 and uhat[-1] == 0.0
    loss = op.residual_loss([z], 10.0, mesh)
    assert loss > 0.0 and math.isfinite(loss)

    # end-to-end config run in a scratch directory
    with tempfile.TemporaryDirectory() as tmp:
        config = f"""
out_dir = "{tmp}"
master_seed = 5

[prior]
family = "levelset-smooth"
modes = 8

[mesh]
n = 33

[data]
n_systems = 10
d_y = 8
true_family = "levelset-sharp"

[loss]
n_s = 10
n_dirs = 32

[optimizer]
iters = 3
alpha0 = [7.0, 1.1, 1.9]
"""
        assert pf.run_from_config(config, "gen-data") is None
        summary = json.loads(pf.run_from_config(config, "calibrate"))
        assert summary["iters"] == 3
        assert len(summary["final_alpha"]) == 3

    print("smoke test passed")


if __name__ == "__main__":
    main()
