#!/usr/bin/env python3
"""Smoke test for the cpaem_py extension module.

Builds the extension if needed, imports it straight from the cargo target
directory, and exercises the main surface: model round-trip, partition
enumeration, exact marginal/posterior queries cross-checked against the
built-in Monte-Carlo oracles, MAP inference, and a short EM fit.

Run from anywhere:  python3 python/smoke_test.py
"""

import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def load_module():
    so = REPO / "target" / "release" / "libcpaem_py.so"
    if not so.exists():
        subprocess.run(
            ["cargo", "build", "-p", "cpaem-py", "--release"],
            cwd=REPO,
            check=True,
        )
    stage = Path(tempfile.mkdtemp(prefix="cpaem_py_"))
    shutil.copy2(so, stage / "cpaem_py.so")
    sys.path.insert(0, str(stage))
    import cpaem_py

    return cpaem_py


def check(name, ok, detail=""):
    status = "ok" if ok else "FAIL"
    print(f"  {name:<42} {status}  {detail}")
    if not ok:
        raise SystemExit(f"smoke test failed at: {name}")


def main():
    cpaem = load_module()
    print(f"loaded {cpaem.__name__} from {cpaem.__file__}")

    # Model construction and JSON round-trip.
    model = cpaem.Model.random("1-8-2 relu", seed=7, var_x=0.01)
    check(
        "random model shape",
        model.latent_dim == 1 and model.output_dim == 2 and model.depth == 2,
        repr(model),
    )
    clone = cpaem.Model.from_json(model.to_json())
    z = [0.37]
    check(
        "JSON round-trip preserves the forward map",
        clone.forward(z) == model.forward(z),
        f"g({z[0]}) = {model.forward(z)}",
    )

    # Partition enumeration and prior masses.
    inf = model.inference()
    masses = inf.prior_masses()
    check(
        "region prior masses sum to 1",
        abs(sum(masses) - 1.0) < 1e-9,
        f"{len(inf)} regions, |sum-1| = {abs(sum(masses)-1.0):.2e}",
    )
    check(
        "codes enumerate distinct regions",
        len(set(inf.codes())) == len(inf),
        f"e.g. {inf.codes()[0]!r}",
    )

    # Exact marginal vs the Monte-Carlo oracle.
    x = model.sample(1, seed=11)[0]
    exact = math.exp(inf.log_marginal(x))
    est, se = cpaem.mc_marginal(model, x, n=200_000, seed=5)
    check(
        "marginal matches MC oracle (3 sigma)",
        abs(exact - est) <= 3.0 * se,
        f"exact {exact:.5f} vs {est:.5f} +/- {se:.5f}",
    )

    # Exact posterior vs the importance-sampling oracle.
    logp, mean, second, region_masses = inf.posterior(x)
    check(
        "posterior region masses sum to 1",
        abs(sum(region_masses) - 1.0) < 1e-9,
        f"|sum-1| = {abs(sum(region_masses)-1.0):.2e}",
    )
    is_mean, is_se, _, ess = cpaem.is_posterior_moments(model, x, n=200_000, seed=6)
    check(
        "posterior mean matches IS oracle (3 sigma)",
        all(abs(m - e) <= 3.0 * s for m, e, s in zip(mean, is_mean, is_se)),
        f"exact {mean[0]:.5f} vs {is_mean[0]:.5f} +/- {is_se[0]:.5f} (ESS {ess:.0f})",
    )
    var = second[0][0] - mean[0] ** 2
    check("posterior variance is positive", var > 0.0, f"var = {var:.6f}")

    # MAP latent reconstructs a noiseless observation's latent.
    z0 = [0.8]
    x0 = model.forward(z0)
    map_z, map_code, log_joint = inf.map_latent(x0)
    check(
        "MAP latent lands near the generating latent",
        abs(map_z[0] - z0[0]) < 0.2,
        f"z* = {map_z[0]:.4f} in region {map_code!r}, log joint {log_joint:.3f}",
    )

    # A short EM fit on the circle dataset improves the NLL monotonically.
    data = cpaem.circle_dataset(60, noise_std=0.05, seed=17)
    fitted, trace, converged = model.fit_em(data, max_iters=5, tol=0.0)
    nlls = [row[1] for row in trace]
    check(
        "EM trace is monotone non-increasing",
        all(b <= a + 1e-8 for a, b in zip(nlls, nlls[1:])),
        f"NLL {nlls[0]:.2f} -> {nlls[-1]:.2f} in {len(nlls)-1} iterations",
    )
    check("EM improves the NLL", nlls[-1] < nlls[0])
    check(
        "fitted model evaluates on fresh data",
        math.isfinite(fitted.inference().nll(cpaem.circle_dataset(20, seed=23))),
    )

    # Model files round-trip through the filesystem too.
    with tempfile.TemporaryDirectory() as d:
        path = str(Path(d) / "fitted.json")
        fitted.save(path)
        reloaded = cpaem.Model.load(path)
        check(
            "save/load round-trip preserves the forward map",
            reloaded.forward(z) == fitted.forward(z),
        )

    print("smoke test passed")


if __name__ == "__main__":
    main()
