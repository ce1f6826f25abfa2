import os
import subprocess
import sys

import numpy as np
import pytest

from causil import _accel, rng, simgen
from causil.core import pool_tuples

BACKENDS = _accel.backends()


def test_streams_are_reproducible_and_distinct():
    a = rng.stream(7, 3, rng.CH_STATE).random(5)
    assert np.array_equal(a, rng.stream(7, 3, rng.CH_STATE).random(5))
    assert not np.array_equal(a, rng.stream(7, 4, rng.CH_STATE).random(5))
    assert not np.array_equal(a, rng.stream(7, 3, rng.CH_PROXY).random(5))
    assert not np.array_equal(a, rng.stream(8, 3, rng.CH_STATE).random(5))


def test_uniforms_rows_follow_streams():
    u = rng.uniforms(11, 4, 6, rng.CH_LATENT)
    for i in range(4):
        assert np.array_equal(u[i], rng.stream(11, i, rng.CH_LATENT).random(6))


def test_derive_seed_stable():
    assert rng.derive_seed(1, 2, 3) == rng.derive_seed(1, 2, 3)
    assert rng.derive_seed(1, 2, 3) != rng.derive_seed(1, 3, 2)


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled backend not built")
def test_backends_simulate_identically():
    p = simgen.default_params()
    a = simgen.simulate(p, 30, 12, seed=5, backend=BACKENDS["python"])
    b = simgen.simulate(p, 30, 12, seed=5, backend=BACKENDS["cython"])
    assert a == b


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled backend not built")
def test_backends_rbf_agree():
    gen = np.random.default_rng(0)
    X, Y = gen.normal(size=(40, 3)), gen.normal(size=(25, 3))
    ref = BACKENDS["python"].rbf_gram(X, Y, 0.7)
    assert np.allclose(BACKENDS["cython"].rbf_gram(X, Y, 0.7), ref, atol=1e-14, rtol=0)


def test_pure_env_selects_python_backend():
    env = dict(os.environ, CAUSIL_PURE="1")
    out = subprocess.run([sys.executable, "-c", "from causil import _accel; print(_accel.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_episode_order_independence():
    p = simgen.default_params()
    big = simgen.simulate(p, 6, 5, seed=9)
    small = simgen.simulate(p, 2, 5, seed=9)
    for x, y in zip(big.episodes[:2], small.episodes):
        for name in ("states", "proxies", "actions", "latents"):
            assert np.array_equal(getattr(x, name), getattr(y, name))
    assert pool_tuples(small).N == 10
