"""Compare the compiled and pure-numpy kernel backends.

Times trajectory simulation of the default categorical model and the RBF Gram
matrix, checks that both backends agree, and prints one line per case::

    python3 benchmarks/bench_backends.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from causil import _accel, rng, simgen


def kernel_inputs(params, n, T, seed=1):
    """Arguments of ``simulate_categorical`` as ``simgen.simulate`` builds them."""
    p = params
    return (
        simgen._cum(simgen.latent_kernel(p)), simgen._cum(simgen.state_kernel(p)),
        simgen._cum(simgen.proxy_kernel(p)), np.ascontiguousarray(simgen.expert_table(p)),
        simgen._cum(p.init_u), simgen._cum(p.init_s), simgen._cum(p.init_a),
        rng.uniforms(seed, n, 3, rng.CH_INIT), rng.uniforms(seed, n, T, rng.CH_LATENT),
        rng.uniforms(seed, n, T, rng.CH_STATE), rng.uniforms(seed, n, T, rng.CH_PROXY),
    )


def cases():
    params = simgen.default_params()
    X = np.random.default_rng(0).standard_normal((1500, 3))
    # the end-to-end timings include per-episode stream setup and validation, shared by both backends
    args = kernel_inputs(params, 2000, 50)
    yield "kernel n=2000 T=50", lambda be: be.simulate_categorical(*args)
    yield "simulate n=200 T=10", lambda be: simgen.simulate(params, 200, 10, seed=1, backend=be)
    yield "simulate n=2000 T=10", lambda be: simgen.simulate(params, 2000, 10, seed=1, backend=be)
    yield "rbf_gram 1500x1500x3", lambda be: be.rbf_gram(X, X, 1.3)


def same(a, b) -> bool:
    if isinstance(a, tuple) and not hasattr(a, "episodes"):
        return all(np.array_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return np.allclose(a, b, rtol=1e-12, atol=1e-12)
    return a == b


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = _accel.backends()
    print(f"default backend: {_accel.BACKEND}; available: {', '.join(backends)}")
    print(f"{'case':24s} " + " ".join(f"{name + ' ms':>12s}" for name in backends) + "  speedup  agree")
    for label, fn in cases():
        times, outs = {}, {}
        for name, be in backends.items():
            outs[name] = fn(be)
            times[name] = 1000.0 * min(timeit.repeat(lambda: fn(be), number=1, repeat=args.repeat))
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        agree = all(same(o, outs["python"]) for o in outs.values())
        print(f"{label:24s} " + " ".join(f"{times[n]:12.2f}" for n in backends) + f"  {speed:7.2f}  {agree}")


if __name__ == "__main__":
    main()
