# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``; same signatures."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


cdef inline Py_ssize_t _draw(const double[::1] cum, double u) noexcept nogil:
    cdef Py_ssize_t k = 0
    cdef Py_ssize_t n = cum.shape[0]
    while k < n and cum[k] <= u:
        k += 1
    return k


def simulate_categorical(const double[:, :, :, ::1] cum_lat,
                         const double[:, :, :, :, ::1] cum_state,
                         const double[:, ::1] cum_proxy,
                         const cnp.int64_t[:, ::1] expert,
                         const double[::1] cum_init_u,
                         const double[::1] cum_init_s,
                         const double[::1] cum_init_a,
                         const double[:, ::1] u_init,
                         const double[:, ::1] u_lat,
                         const double[:, ::1] u_state,
                         const double[:, ::1] u_proxy):
    cdef Py_ssize_t n = u_lat.shape[0]
    cdef Py_ssize_t T = u_lat.shape[1]
    states_arr = np.empty((n, T + 1), dtype=np.int64)
    proxies_arr = np.empty((n, T), dtype=np.int64)
    actions_arr = np.empty((n, T), dtype=np.int64)
    latents_arr = np.empty((n, T), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] states = states_arr
    cdef cnp.int64_t[:, ::1] proxies = proxies_arr
    cdef cnp.int64_t[:, ::1] actions = actions_arr
    cdef cnp.int64_t[:, ::1] latents = latents_arr
    cdef Py_ssize_t i, t
    cdef Py_ssize_t u_prev, s_prev, a_prev, u_t, s_t, a_t
    with nogil:
        for i in range(n):
            u_prev = _draw(cum_init_u, u_init[i, 0])
            s_prev = _draw(cum_init_s, u_init[i, 1])
            a_prev = _draw(cum_init_a, u_init[i, 2])
            states[i, 0] = s_prev
            latents[i, 0] = u_prev
            proxies[i, 0] = _draw(cum_proxy[u_prev], u_proxy[i, 0])
            for t in range(1, T + 1):
                u_t = _draw(cum_lat[u_prev, s_prev, a_prev], u_lat[i, t - 1])
                s_t = _draw(cum_state[u_t, u_prev, s_prev, a_prev], u_state[i, t - 1])
                a_t = expert[s_t, u_prev]
                states[i, t] = s_t
                actions[i, t - 1] = a_t
                if t < T:
                    latents[i, t] = u_t
                    proxies[i, t] = _draw(cum_proxy[u_t], u_proxy[i, t])
                u_prev = u_t
                s_prev = s_t
                a_prev = a_t
    return states_arr, proxies_arr, actions_arr, latents_arr


def rbf_gram(X, Y, double bandwidth):
    cdef const double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] y = np.ascontiguousarray(Y, dtype=np.float64)
    cdef Py_ssize_t m = x.shape[0]
    cdef Py_ssize_t n = y.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double scale = -1.0 / (2.0 * bandwidth * bandwidth)
    cdef double acc, diff
    cdef Py_ssize_t i, j, k
    with nogil:
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for k in range(d):
                    diff = x[i, k] - y[j, k]
                    acc = acc + diff * diff
                out[i, j] = exp(acc * scale)
    return out_arr
