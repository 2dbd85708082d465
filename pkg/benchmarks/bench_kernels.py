"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 200] [--dtype float32]

Shapes match one critic update at the default toy scale (batch 64, K=8,
hidden 128, 51 atoms).
"""
import argparse
import timeit

import numpy as np

from cqnas import kernels, _kernels_py


def cases(dt, rng):
    M, K, H, N, B, A = 64, 8, 128, 2, 5, 51
    x = rng.normal(size=(M * K, H)).astype(dt)
    y, xhat, rstd = kernels.layernorm_silu_fwd(x, impl=_kernels_py)
    gi, gh = (rng.normal(size=(M, 3 * H)).astype(dt) for _ in range(2))
    hp = rng.normal(size=(M, H)).astype(dt)
    _, r, z, n = kernels.gru_gates_fwd(gi, gh, hp, impl=_kernels_py)
    g = rng.normal(size=(M, H)).astype(dt)
    probs = rng.dirichlet(np.ones(A), size=M * K * N).astype(dt)
    R = rng.uniform(0, 1, size=M * K * N)
    acts = rng.uniform(-1, 1, size=(M, K, N)).astype(dt)
    q = rng.normal(size=(M * K * N, B)).astype(dt)
    e = rng.integers(0, B, size=M * K * N)
    lo, hi = -np.ones(N, dt), np.ones(N, dt)
    return {
        "layernorm_silu_fwd": lambda impl: kernels.layernorm_silu_fwd(x, impl=impl),
        "layernorm_silu_bwd": lambda impl: kernels.layernorm_silu_bwd(x, xhat, rstd, impl=impl),
        "gru_gates_fwd": lambda impl: kernels.gru_gates_fwd(gi, gh, hp, impl=impl),
        "gru_gates_bwd": lambda impl: kernels.gru_gates_bwd(g, r, z, n, gh, hp, impl=impl),
        "categorical_projection": lambda impl: kernels.categorical_projection(probs, R, 0.99, -2, 2, impl=impl),
        "c2f_encode": lambda impl: kernels.c2f_encode(acts, lo, hi, 3, 5, impl=impl),
        "margin_loss_fwd": lambda impl: kernels.margin_loss_fwd(q, e, 0.1, impl=impl),
    }


def best_ms(fn, repeat):
    return 1e3 * min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--dtype", choices=["float32", "float64"], nargs="+", default=["float32", "float64"])
    args = ap.parse_args(argv)
    impls = kernels.backends()
    if len(impls) < 2:
        print("compiled extension not built; only the numpy fallback is available")
    names = [m.BACKEND for m in impls]
    print(f"{'kernel':24s} {'dtype':8s} " + " ".join(f"{n + ' ms':>12s}" for n in names) + "   speedup")
    for dt in args.dtype:
        for name, fn in cases(np.dtype(dt), np.random.default_rng(0)).items():
            t = [best_ms(lambda: fn(m), args.repeat) for m in impls]
            speed = f"{t[-1] / t[0]:8.2f}x" if len(t) > 1 else ""
            print(f"{name:24s} {dt:8s} " + " ".join(f"{v:12.3f}" for v in t) + "  " + speed)


if __name__ == "__main__":
    main()
