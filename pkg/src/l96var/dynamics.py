"""Lorenz96 dynamics: RK4 stepping, trajectories, tangent-linear and adjoint maps.

The state lives on a periodic 1-D grid of ``n_space`` points. All operators here
are pure functions of their ndarray inputs; trajectories are plain float64
arrays of shape ``(T+1, n_space)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NonFiniteError(RuntimeError):
    """Raised when an integration produces NaN or infinite values (blow-up)."""


@dataclass(frozen=True)
class DynamicsConfig:
    """Lorenz96 model parameters. dt=0.1, forcing=8 is the chaotic regime."""

    n_space: int = 40
    dt: float = 0.1
    forcing: float = 8.0

    def __post_init__(self):
        if self.n_space < 4:
            raise ValueError("n_space must be >= 4 for a non-degenerate stencil")
        if self.dt < 0:
            raise ValueError("dt must be >= 0")


def tendency(x, forcing):
    """Lorenz96 right-hand side dX/dt with cyclic indexing.

    dX_n/dt = (X_{n+1} - X_{n-2}) X_{n-1} - X_n + F
    """
    x = np.asarray(x, dtype=np.float64)
    return (np.roll(x, -1) - np.roll(x, 2)) * np.roll(x, 1) - x + forcing


def _tendency_tl(x, u):
    """Tangent linear of `tendency` at x applied to perturbation u."""
    return (
        (np.roll(u, -1) - np.roll(u, 2)) * np.roll(x, 1)
        + (np.roll(x, -1) - np.roll(x, 2)) * np.roll(u, 1)
        - u
    )


def _tendency_adj(x, w):
    """Transpose of `_tendency_tl` at x applied to w."""
    a = np.roll(x, 1) * w
    b = (np.roll(x, -1) - np.roll(x, 2)) * w
    return np.roll(a, 1) - np.roll(a, -2) + np.roll(b, -1) - w


def rk4_step(x, cfg):
    """One classical RK4 step of the Lorenz96 model."""
    dt, f = cfg.dt, cfg.forcing
    k1 = dt * tendency(x, f)
    k2 = dt * tendency(x + 0.5 * k1, f)
    k3 = dt * tendency(x + 0.5 * k2, f)
    k4 = dt * tendency(x + k3, f)
    return x + (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0


def integrate(x0, cfg, steps):
    """Integrate `steps` RK4 steps from x0.

    Returns the trajectory as an array of shape (steps+1, n_space) whose first
    row is x0. Raises NonFiniteError as soon as a step leaves the finite range.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    traj = np.empty((steps + 1, x0.shape[0]))
    traj[0] = x0
    for t in range(steps):
        traj[t + 1] = rk4_step(traj[t], cfg)
        if not np.all(np.isfinite(traj[t + 1])):
            raise NonFiniteError(f"non-finite state at step {t + 1}")
    return traj


def tangent_step(x_lin, u, cfg):
    """Jacobian-vector product of the discrete RK4 map at x_lin applied to u.

    This differentiates the discrete map exactly (not the continuous ODE), so
    it is consistent with `rk4_step` to machine precision.
    """
    dt, f = cfg.dt, cfg.forcing
    k1 = dt * tendency(x_lin, f)
    u1 = dt * _tendency_tl(x_lin, u)
    k2 = dt * tendency(x_lin + 0.5 * k1, f)
    u2 = dt * _tendency_tl(x_lin + 0.5 * k1, u + 0.5 * u1)
    k3 = dt * tendency(x_lin + 0.5 * k2, f)
    u3 = dt * _tendency_tl(x_lin + 0.5 * k2, u + 0.5 * u2)
    u4 = dt * _tendency_tl(x_lin + k3, u + u3)
    return u + (u1 + 2.0 * u2 + 2.0 * u3 + u4) / 6.0


def adjoint_step(x_lin, lam, cfg):
    """Transpose of `tangent_step`'s linear map at x_lin applied to lam."""
    dt, f = cfg.dt, cfg.forcing
    k1 = dt * tendency(x_lin, f)
    x2 = x_lin + 0.5 * k1
    k2 = dt * tendency(x2, f)
    x3 = x_lin + 0.5 * k2
    k3 = dt * tendency(x3, f)
    x4 = x_lin + k3

    dk1 = lam / 6.0
    dk2 = lam / 3.0
    dk3 = lam / 3.0
    dk4 = lam / 6.0

    dx = lam.astype(np.float64, copy=True)
    g4 = dt * _tendency_adj(x4, dk4)
    dx += g4
    dk3 = dk3 + g4
    g3 = dt * _tendency_adj(x3, dk3)
    dx += g3
    dk2 = dk2 + 0.5 * g3
    g2 = dt * _tendency_adj(x2, dk2)
    dx += g2
    dk1 = dk1 + 0.5 * g2
    dx += dt * _tendency_adj(x_lin, dk1)
    return dx


def adjoint_sweep(traj, forcings, cfg):
    """Backward adjoint pass accumulating the gradient with respect to X0.

    `forcings[t]` is the gradient of a per-time cost with respect to traj[t].
    Returns sum_t (dM_{0->t}/dX0)^T forcings[t] via the recursion
    lam_t = forcings[t] + M'(traj[t])^T lam_{t+1}.
    """
    traj = np.asarray(traj)
    forcings = np.asarray(forcings)
    if forcings.shape != traj.shape:
        raise ValueError(
            f"forcings shape {forcings.shape} does not match trajectory {traj.shape}"
        )
    T = traj.shape[0] - 1
    lam = forcings[T].astype(np.float64, copy=True)
    for t in range(T - 1, -1, -1):
        lam = forcings[t] + adjoint_step(traj[t], lam, cfg)
    return lam
