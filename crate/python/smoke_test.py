"""Smoke test for the pym4n extension module.

Build and run from the repository root:

    cargo build --release -p m4n-python --features extension-module
    cp target/release/libpym4n.so python/pym4n.so
    python3 python/smoke_test.py

`maturin develop -m crates/python/Cargo.toml` works as well when maturin is installed.
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pym4n  # noqa: E402


def check(name, cond):
    print(f"{'PASS' if cond else 'FAIL'} {name}")
    return cond


def main():
    ok = True

    binary = pym4n.Task.binary()
    for v in (-1.3, -0.2, 0.0, 0.4, 2.0):
        res = pym4n.spmp_solve(binary, [v, -v], iterations=2000)
        ok &= check(f"binary partition function at v={v}", abs(res.saddle_value - max(abs(v), 0.5)) < 5e-3)

    mc = pym4n.Task.multiclass(3)
    ok &= check("multiclass loss matrix", mc.loss_matrix() == [[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
    ok &= check("decode picks the largest score", mc.decode([0.1, 0.7, 0.2]) == 1)
    risk, label = mc.bayes_risk([0.5, 0.3, 0.2])
    ok &= check("bayes risk", abs(risk - 0.5) < 1e-12 and label == 0)
    ok &= check("constant C for 0-1 loss is k", abs(pym4n.constant_c(mc) - 3.0) < 1e-9)

    res = pym4n.spmp_solve(mc, [0.3, -0.1, 0.2], iterations=200)
    exact = pym4n.partition_function(mc, [0.3, -0.1, 0.2])
    ok &= check("certified gap brackets the exact value", res.lower_value - 1e-9 <= exact <= res.upper_value + 1e-9)

    p = pym4n.project_simplex([0.5, 0.25, 0.25], [0.0, 0.0, 0.0], 1.0)
    ok &= check("simplex projection fixed point", all(abs(a - b) < 1e-12 for a, b in zip(p, [0.5, 0.25, 0.25])))
    q = pym4n.sinkhorn([0.25] * 4, [1.0, 0.0, 0.0, 2.0], 1.0)
    ok &= check("sinkhorn output is doubly stochastic", abs(q[0] + q[1] - 1) < 1e-9 and abs(q[0] + q[2] - 1) < 1e-9)

    d = pym4n.ranking_d_bound(4)
    ok &= check("cyclic decomposition of uniform marginals", len(d["permutations"]) == 4 and d["max_residual"] < 1e-12)

    x, y, bayes, bayes_err = pym4n.synth("blobs", seed=1, k=3, n=150, separation=4.0, dim=2)
    ok &= check("synthetic blobs", len(x) == 150 and bayes_err is not None and bayes_err < 0.1)
    model = pym4n.train(mc, x[:100], y[:100], lam=0.1, passes=10, seed=0)
    err = model.evaluate(x[100:], y[100:])
    ok &= check(f"trained model test error {err:.3f}", err < 0.2)
    history = model.history
    ok &= check("dual gap shrinks", history[-1]["dual_gap"] < history[1]["dual_gap"])
    ok &= check("predict returns labels", set(model.predict(x[100:110])) <= {0, 1, 2})

    try:
        pym4n.Task.multiclass(1)
        ok &= check("invalid task rejected", False)
    except pym4n.M4nError:
        ok &= check("invalid task rejected", True)

    chain = pym4n.Task.chain(3, 2)
    ok &= check("chain embedding size", len(chain.embed([0, 1, 1])) == chain.embed_dim == 3 * 2 + 2 * 4)
    ok &= check("chain loss is normalized Hamming", math.isclose(chain.loss([0, 1, 1], [0, 0, 1]), 1 / 3))

    print("all checks passed" if ok else "some checks failed")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
