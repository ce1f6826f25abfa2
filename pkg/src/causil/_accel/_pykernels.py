"""Pure numpy implementations of the hot kernels.

These are the reference versions. The Cython module ``_ckernels`` exposes the
same functions with the same signatures; categorical sampling is done by
comparisons against precomputed cumulative tables so both backends return
bit-identical draws.
"""
import numpy as np


def _draw(cum_rows, u):
    # index of the first cumulative entry strictly above u
    return (cum_rows <= u[:, None]).sum(axis=1)


def simulate_categorical(cum_lat, cum_state, cum_proxy, expert,
                         cum_init_u, cum_init_s, cum_init_a,
                         u_init, u_lat, u_state, u_proxy):
    """Run ``n`` categorical episodes of length ``T`` by inverse-CDF sampling.

    Parameters
    ----------
    cum_lat : ndarray, shape (k_u, k_s, k_a, k_u)
        Cumulative next-latent probabilities given (U_{t-1}, S_{t-1}, A_{t-1}).
    cum_state : ndarray, shape (k_u, k_u, k_s, k_a, k_s)
        Cumulative next-state probabilities given (U_t, U_{t-1}, S_{t-1}, A_{t-1}).
    cum_proxy : ndarray, shape (k_u, k_w)
    expert : ndarray of int, shape (k_s, k_u)
        Deterministic expert action table.
    cum_init_u, cum_init_s, cum_init_a : ndarray
        Cumulative initial distributions.
    u_init : ndarray, shape (n, 3)
    u_lat, u_state, u_proxy : ndarray, shape (n, T)
        Uniform draws, one stream per channel.

    Returns
    -------
    states (n, T+1), proxies (n, T), actions (n, T), latents (n, T)
    """
    n, T = u_lat.shape
    states = np.empty((n, T + 1), dtype=np.int64)
    proxies = np.empty((n, T), dtype=np.int64)
    actions = np.empty((n, T), dtype=np.int64)
    latents = np.empty((n, T), dtype=np.int64)
    if n == 0:
        return states, proxies, actions, latents

    u_prev = _draw(np.broadcast_to(cum_init_u, (n, cum_init_u.size)), u_init[:, 0])
    s_prev = _draw(np.broadcast_to(cum_init_s, (n, cum_init_s.size)), u_init[:, 1])
    a_prev = _draw(np.broadcast_to(cum_init_a, (n, cum_init_a.size)), u_init[:, 2])
    states[:, 0] = s_prev
    latents[:, 0] = u_prev
    proxies[:, 0] = _draw(cum_proxy[u_prev], u_proxy[:, 0])
    for t in range(1, T + 1):
        u_t = _draw(cum_lat[u_prev, s_prev, a_prev], u_lat[:, t - 1])
        s_t = _draw(cum_state[u_t, u_prev, s_prev, a_prev], u_state[:, t - 1])
        a_t = expert[s_t, u_prev]
        states[:, t] = s_t
        actions[:, t - 1] = a_t
        if t < T:
            latents[:, t] = u_t
            proxies[:, t] = _draw(cum_proxy[u_t], u_proxy[:, t])
        u_prev, s_prev, a_prev = u_t, s_t, a_t
    return states, proxies, actions, latents


def rbf_gram(X, Y, bandwidth):
    """Gaussian RBF cross-kernel ``exp(-|x - y|^2 / (2 h^2))``."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    sq = (
        np.einsum("ij,ij->i", X, X)[:, None]
        + np.einsum("ij,ij->i", Y, Y)[None, :]
        - 2.0 * (X @ Y.T)
    )
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-sq / (2.0 * bandwidth * bandwidth))
