"""Strong-constraint 4DVAR: observational cost, adjoint gradient, L-BFGS solver.

The observation operator and its transpose are applied implicitly through the
zero entries of the precision field r_inv; no projection matrices are built.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import line_search

from .dynamics import adjoint_sweep, integrate


@dataclass(frozen=True)
class BackgroundTerm:
    """Quadratic prior (lambda_b/2)*||x0 - x_b||^2; lambda_b = 0 disables it."""

    x_b: np.ndarray
    lambda_b: float = 0.1

    def __post_init__(self):
        if self.lambda_b < 0:
            raise ValueError("lambda_b must be >= 0")


@dataclass
class AssimilationResult:
    x0_hat: np.ndarray
    cost_trace: list
    grad_norm_trace: list
    n_iterations: int
    n_model_integrations: int
    converged: bool
    line_search_failed: bool = False


class IntegrationCounter:
    """Mutable counter of forward + adjoint model integrations."""

    def __init__(self):
        self.count = 0

    def add(self, n=1):
        self.count += n


def cost_4dvar(x0, obs, dyn_cfg, counter=None):
    """J(x0) = 1/2 sum_{t,n} r_inv[t,n] * (M_{0->t}(x0)[n] - y[t,n])^2."""
    traj = integrate(x0, dyn_cfg, obs.n_steps)
    if counter is not None:
        counter.add()
    return 0.5 * float(np.sum(obs.r_inv * np.square(traj - obs.y)))


def grad_4dvar(x0, obs, dyn_cfg, counter=None):
    """Exact gradient of cost_4dvar: one forward run plus one adjoint sweep."""
    traj = integrate(x0, dyn_cfg, obs.n_steps)
    forcings = obs.r_inv * (traj - obs.y)
    g = adjoint_sweep(traj, forcings, dyn_cfg)
    if counter is not None:
        counter.add(2)
    return g


def cost_and_grad_4dvar(x0, obs, dyn_cfg, counter=None):
    """Joint (cost, gradient) evaluation sharing a single forward integration."""
    traj = integrate(x0, dyn_cfg, obs.n_steps)
    residual = traj - obs.y
    forcings = obs.r_inv * residual
    cost = 0.5 * float(np.sum(forcings * residual))
    grad = adjoint_sweep(traj, forcings, dyn_cfg)
    if counter is not None:
        counter.add(2)
    return cost, grad


def cost_and_grad_with_background(x0, obs, dyn_cfg, bg: BackgroundTerm, counter=None):
    """4DVAR cost and gradient plus the quadratic background term."""
    cost, grad = cost_and_grad_4dvar(x0, obs, dyn_cfg, counter)
    if bg is not None and bg.lambda_b > 0:
        d = x0 - bg.x_b
        cost += 0.5 * bg.lambda_b * float(np.dot(d, d))
        grad = grad + bg.lambda_b * d
    return cost, grad


@dataclass(frozen=True)
class SolverOptions:
    memory: int = 10
    max_iter: int = 150
    grad_tol: float = 1e-8
    c1: float = 1e-4
    c2: float = 0.9


def lbfgs_minimize(objective, x_init, opts: SolverOptions = SolverOptions()):
    """Two-loop-recursion L-BFGS with a strong-Wolfe line search.

    `objective(x)` must return (value, gradient) and be deterministic. Stops
    on ||g||_inf < grad_tol, max_iter, or line-search failure (best iterate
    kept, flag set). n_model_integrations counts unique objective evaluations;
    callers whose objective wraps model runs should prefer their own
    instrumented counter.
    """
    cache = {}
    n_evals = 0

    def evaluate(x):
        nonlocal n_evals
        key = x.tobytes()
        if key not in cache:
            n_evals += 1
            cache[key] = objective(x)
        return cache[key]

    def f_only(x):
        return evaluate(x)[0]

    def g_only(x):
        return evaluate(x)[1]

    x = np.asarray(x_init, dtype=np.float64).copy()
    f, g = evaluate(x)
    cost_trace = [f]
    grad_norm_trace = [float(np.max(np.abs(g)))]
    s_hist, y_hist, rho_hist = [], [], []
    old_f = None
    converged = False
    ls_failed = False
    n_iter = 0

    for _ in range(opts.max_iter):
        if np.max(np.abs(g)) < opts.grad_tol:
            converged = True
            break

        d = _two_loop_direction(g, s_hist, y_hist, rho_hist)
        if float(np.dot(g, d)) >= 0:
            d = -g  # safeguard: fall back to steepest descent

        alpha, _, _, f_new, _, g_new = line_search(
            f_only, g_only, x, d, gfk=g, old_fval=f, old_old_fval=old_f,
            c1=opts.c1, c2=opts.c2, maxiter=40,
        )
        if alpha is None:
            ls_failed = True
            break
        x_new = x + alpha * d
        if g_new is None:
            g_new = g_only(x_new)
        if f_new is None:
            f_new = f_only(x_new)

        s = x_new - x
        yk = g_new - g
        sy = float(np.dot(s, yk))
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(yk)):
            s_hist.append(s)
            y_hist.append(yk)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > opts.memory:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)

        old_f, x, f, g = f, x_new, f_new, np.asarray(g_new)
        n_iter += 1
        cost_trace.append(f)
        grad_norm_trace.append(float(np.max(np.abs(g))))
        cache.clear()
        cache[x.tobytes()] = (f, g)
    else:
        converged = np.max(np.abs(g)) < opts.grad_tol

    if not converged and not ls_failed:
        converged = bool(np.max(np.abs(g)) < opts.grad_tol)
    return AssimilationResult(
        x0_hat=x,
        cost_trace=cost_trace,
        grad_norm_trace=grad_norm_trace,
        n_iterations=n_iter,
        n_model_integrations=n_evals,
        converged=converged,
        line_search_failed=ls_failed,
    )


def _two_loop_direction(g, s_hist, y_hist, rho_hist):
    q = g.copy()
    alphas = []
    for s, yk, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * float(np.dot(s, q))
        alphas.append(a)
        q -= a * yk
    if s_hist:
        gamma = 1.0 / (rho_hist[-1] * float(np.dot(y_hist[-1], y_hist[-1])))
        q *= gamma
    for (s, yk, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * float(np.dot(yk, q))
        q += (a - b) * s
    return -q


def first_guess(obs, clim_mean):
    """Observed values at t=0 where available, climatological mean elsewhere."""
    return np.where(obs.r_inv[0] > 0, obs.y[0], clim_mean)


def assimilate(obs, dyn_cfg, bg=None, clim_mean=2.3, opts: SolverOptions = SolverOptions(),
               x_init=None):
    """Run 4DVAR (optionally with a background term) on one observation window.

    The default first guess takes observed values at t=0 and fills the rest
    with the climatological mean. A BackgroundTerm with x_b=None is anchored
    at the first guess. n_model_integrations counts forward and adjoint runs
    separately (2 per objective evaluation).
    """
    if x_init is None:
        x_init = first_guess(obs, clim_mean)
    if bg is not None and bg.x_b is None:
        bg = BackgroundTerm(x_b=x_init.copy(), lambda_b=bg.lambda_b)
    counter = IntegrationCounter()

    def objective(x):
        if bg is None:
            return cost_and_grad_4dvar(x, obs, dyn_cfg, counter)
        return cost_and_grad_with_background(x, obs, dyn_cfg, bg, counter)

    result = lbfgs_minimize(objective, x_init, opts)
    result.n_model_integrations = counter.count
    return result
