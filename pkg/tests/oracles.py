"""Independent reference computations used only by the tests.

Everything here is written with explicit loops over category codes so that it
shares no code path with the vectorized library implementation.
"""
import itertools
import math

import numpy as np


def softmax_vec(logits):
    m = max(logits)
    e = [math.exp(x - m) for x in logits]
    tot = sum(e)
    return [x / tot for x in e]


def expert_action(p, s, u):
    logits = [p.gamma_0[a] + p.Gamma_S[a, s] + p.Gamma_U[a, u] for a in range(p.cards.k_a)]
    probs = softmax_vec(logits)
    best = max(probs)
    return next(a for a in range(p.cards.k_a) if probs[a] >= best - 1e-12)


def latent_prob(p, u_prev, s_prev, a_prev):
    c = p.cards
    return softmax_vec([p.alpha_0[u] + p.A_U[u, u_prev] + p.A_S[u, s_prev] + p.A_A[u, a_prev]
                        for u in range(c.k_u)])


def state_prob(p, u, u_prev, s_prev, a_prev):
    c = p.cards
    return softmax_vec([p.beta_0[s] + p.B_U[s, u] + p.B_U_minus[s, u_prev] + p.B_S[s, s_prev]
                        + p.B_A[s, a_prev] for s in range(c.k_s)])


def proxy_prob(p, u):
    return softmax_vec([p.omega_0[w] + p.Omega_U[w, u] for w in range(p.cards.k_w)])


def chain_step(p, law):
    """One step of the (U, S, A) chain by chain-rule enumeration."""
    c = p.cards
    out = {}
    for (u, s, a), mass in law.items():
        if mass == 0:
            continue
        pu = latent_prob(p, u, s, a)
        for u2 in range(c.k_u):
            ps = state_prob(p, u2, u, s, a)
            for s2 in range(c.k_s):
                a2 = expert_action(p, s2, u)
                key = (u2, s2, a2)
                out[key] = out.get(key, 0.0) + mass * pu[u2] * ps[s2]
    return out


def pooled_tuple_joint(p, T):
    """Exact law of ``(U_{t-1}, S_{t-1}, S_t, W_{t-1}, A_t)`` averaged over t = 1..T."""
    c = p.cards
    law = {(u, s, a): p.init_u[u] * p.init_s[s] * p.init_a[a]
           for u, s, a in itertools.product(range(c.k_u), range(c.k_s), range(c.k_a))}
    J = np.zeros((c.k_u, c.k_s, c.k_s, c.k_w, c.k_a))
    for _ in range(T):
        for (u, z, b), mass in law.items():
            pu = latent_prob(p, u, z, b)
            pw = proxy_prob(p, u)
            for u2 in range(c.k_u):
                ps = state_prob(p, u2, u, z, b)
                for s in range(c.k_s):
                    a = expert_action(p, s, u)
                    for w in range(c.k_w):
                        J[u, z, s, w, a] += mass * pu[u2] * ps[s] * pw[w]
        law = chain_step(p, law)
    return J / T


def interventional(expert, s, marginal, k_a):
    """``sum_u 1{pi_E(s, u) = a} P(u)`` by direct counting."""
    out = [0.0] * k_a
    for u, pu in enumerate(marginal):
        out[expert(s, u)] += pu
    return np.array(out)


def random_static_joint(gen, k_u, k_z, k_s, k_w, k_a):
    """Random law ``p(u) p(z|u) p(s|u,z) p(w|u) 1{a = pi(s,u)}`` indexed [u, z, s, w, a].

    Returns the joint, the latent marginal and the expert table ``pi[s, u]``.
    """
    pu = gen.dirichlet(np.ones(k_u))
    pz = gen.dirichlet(np.ones(k_z), size=k_u)
    ps = gen.dirichlet(np.ones(k_s), size=(k_u, k_z))
    # diagonally weighted proxy channel keeps the matrix away from singular
    pw = np.array([gen.dirichlet(np.ones(k_w) + 4.0 * (np.arange(k_w) == u % k_w)) for u in range(k_u)])
    pi = gen.integers(0, k_a, size=(k_s, k_u))
    J = np.zeros((k_u, k_z, k_s, k_w, k_a))
    for u in range(k_u):
        for z in range(k_z):
            for s in range(k_s):
                for w in range(k_w):
                    J[u, z, s, w, pi[s, u]] += pu[u] * pz[u, z] * ps[u, z, s] * pw[u, w]
    return J, pu, pi


def proxy_given_z(J, s):
    """``P[w, z]`` at fixed ``s`` by explicit summation."""
    k_u, k_z, _, k_w, k_a = J.shape
    M = np.zeros((k_w, k_z))
    for z in range(k_z):
        col = sum(J[u, z, s, w, a] for u in range(k_u) for w in range(k_w) for a in range(k_a))
        for w in range(k_w):
            M[w, z] = sum(J[u, z, s, w, a] for u in range(k_u) for a in range(k_a)) / col
    return M


def dense_alpha(K_H, Gamma, y, lam_h, N):
    """Minimizer of ``xi' Gamma xi + lam_h alpha' K_H alpha`` with ``xi = (y - K_H alpha) / N``.

    Setting the gradient to zero gives
    ``(K_H Gamma K_H / N^2 + lam_h K_H) alpha = K_H Gamma y / N^2``; for full-rank
    ``K_H`` this is solved by a dense LU solve.
    """
    A = K_H @ Gamma @ K_H / N ** 2 + lam_h * K_H
    b = K_H @ Gamma @ y / N ** 2
    return np.linalg.solve(A, b)


def reduced_objective(alpha, K_H, Gamma, y, lam_h, N):
    xi = (y - K_H @ alpha) / N
    return float(xi @ Gamma @ xi + lam_h * alpha @ K_H @ alpha)


def gaussian_kernel_naive(X, Y, h):
    out = np.zeros((len(X), len(Y)))
    for i in range(len(X)):
        for j in range(len(Y)):
            d2 = sum((X[i][k] - Y[j][k]) ** 2 for k in range(len(X[i])))
            out[i, j] = math.exp(-d2 / (2 * h * h))
    return out


def adversary_value(beta, alpha, K_H, K_Q, y, lam_q, N):
    """Penalized moment objective of ``q = K_Q beta`` against ``h = K_H alpha``, by explicit sums.

    ``(1/N) sum_i (y_i - h_i) q_i - (1/N) sum_i q_i^2 - lam_q beta' K_Q beta``.
    """
    h = [sum(K_H[i][j] * alpha[j] for j in range(N)) for i in range(N)]
    q = [sum(K_Q[i][j] * beta[j] for j in range(N)) for i in range(N)]
    moment = sum((y[i] - h[i]) * q[i] for i in range(N)) / N
    second = sum(q[i] * q[i] for i in range(N)) / N
    norm = sum(beta[i] * q[i] for i in range(N))
    return moment - second - lam_q * norm


def maximize_adversary(alpha, K_H, K_Q, y, lam_q, N):
    """Numerical supremum over ``beta`` by BFGS with an analytic gradient."""
    from scipy.optimize import minimize

    r = np.asarray(y, dtype=float) - K_H @ alpha

    def neg(beta):
        return -adversary_value(beta, alpha, K_H, K_Q, y, lam_q, N)

    def grad(beta):
        q = K_Q @ beta
        return -(K_Q @ r / N - 2 * K_Q @ q / N - 2 * lam_q * q)

    res = minimize(neg, np.zeros(N), jac=grad, method="BFGS", options={"gtol": 1e-12, "maxiter": 10_000})
    return -res.fun


def random_kernel_instance(gen, N):
    X = gen.normal(size=(N, 2))
    Zq = gen.normal(size=(N, 2))
    K_H = gaussian_kernel_naive(X, X, 1.0)
    K_Q = gaussian_kernel_naive(Zq, Zq, 1.0)
    y = gen.integers(0, 2, N).astype(float)
    lam_q = float(10 ** gen.uniform(-3, -1))
    lam_h = float(10 ** gen.uniform(-3, -1))
    return K_H, K_Q, y, lam_h, lam_q


def conditional_modes(x, a, k_x, k_a):
    """Per-cell list of modal actions by counting (empty for unseen cells)."""
    counts = [[0] * k_a for _ in range(k_x)]
    for xi, ai in zip(x, a):
        counts[xi][ai] += 1
    out = []
    for c in counts:
        top = max(c)
        out.append([k for k in range(k_a) if c[k] == top] if top > 0 else [])
    return out
