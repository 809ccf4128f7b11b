"""Time-free action, the boundary action function, and the shooting solver.

The action of an energy-k trajectory is

    integral of ( |sigma'|_g^2 / 2 + k - alpha(sigma') - U(sigma) ) dt,

evaluated by composite Gauss-Legendre quadrature on the integrator's dense
output.  The boundary action function samples it on connecting trajectories
found by a Newton shooting method in the initial direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .geometry import boundary_point
from .systems import MPSystem, sphere_lift
from .flow import (
    NoExitError,
    ReducedTrajectory,
    Trajectory,
    _direction_derivatives,
    exit_time,
    integrate,
    transverse_basis,
    variational_flow,
)

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


class ShootingError(RuntimeError):
    """The shooting iteration failed to connect the boundary points."""


def _gauss_legendre(fn, breakpoints) -> float:
    total = 0.0
    for a, b in zip(breakpoints[:-1], breakpoints[1:]):
        if b <= a:
            continue
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        for w, t in zip(_GL_WEIGHTS, mid + half * _GL_NODES):
            total += half * w * fn(t)
    return total


def _clip_breakpoints(samples, t0, t1):
    inner = samples[(samples > t0) & (samples < t1)]
    return np.concatenate([[t0], inner, [t1]])


def action_along(sys: MPSystem, traj: Trajectory, t_span=None) -> float:
    """Time-free action of energy ``sys.k`` along an integrated trajectory."""
    n = sys.dim
    k = sys.k
    f = sys.fields
    t0, t1 = (0.0, traj.t_end) if t_span is None else t_span

    def integrand(t):
        x = traj.position(t)
        v = traj.velocity(t)
        g = np.asarray(f.metric(x), dtype=float)
        a = np.asarray(f.one_form(x), dtype=float)
        return 0.5 * float(v @ g @ v) + k - float(a @ v) - float(f.potential(x))

    return _gauss_legendre(integrand, _clip_breakpoints(traj.t, t0, t1))


def magnetic_action_along(reduced_sys: MPSystem, gtraj: ReducedTrajectory) -> float:
    """Action of the reduced magnetic system along an arc-parameter curve.

    For a unit-speed curve this is the reduced length minus the 1-form
    flux; it is evaluated in the arc parameter with its own quadrature, so
    comparisons against the unreduced action are between two independently
    computed numbers.
    """
    f = reduced_sys.fields

    def integrand(s):
        x, gp = gtraj.state(s)
        g = np.asarray(f.metric(x), dtype=float)
        a = np.asarray(f.one_form(x), dtype=float)
        return 0.5 * float(gp @ g @ gp) + reduced_sys.k - float(a @ gp)

    return _gauss_legendre(integrand, gtraj.s)


# ---------------------------------------------------------------------------
# shooting

def _wrap_angle(a: float) -> float:
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def _boundary_residual(y: np.ndarray, q: np.ndarray):
    """Residual coordinates of the exit point ``q`` relative to target ``y``.

    2D: wrapped polar-angle difference (well defined on star-shaped
    boundaries).  3D: sphere log-map components in a tangent basis at the
    target.
    """
    if len(y) == 2:
        return np.array([_wrap_angle(np.arctan2(q[1], q[0]) - np.arctan2(y[1], y[0]))])
    ry, rq = np.linalg.norm(y), np.linalg.norm(q)
    yn, qn = y / ry, q / rq
    c = float(np.clip(yn @ qn, -1.0, 1.0))
    ang = np.arccos(c)
    if ang < 1e-14:
        w = np.zeros(3)
    else:
        w = ang * (qn - c * yn) / np.sin(ang)
    a = np.zeros(3)
    a[int(np.argmin(np.abs(yn)))] = 1.0
    e1 = np.cross(yn, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(yn, e1)
    return np.array([w @ e1, w @ e2])


@dataclass
class ShootResult:
    v0: np.ndarray
    direction: np.ndarray
    trajectory: Trajectory
    tau: float
    exit_point: np.ndarray
    residual: float
    iterations: int
    converged: bool


def _shot(sys, x, u, rtol, atol):
    v0 = sphere_lift(sys, x, u)
    traj = integrate(sys, "euler_lagrange", (x, v0), rtol=rtol, atol=atol)
    tau = exit_time(sys, traj)
    return v0, traj, tau, traj.position(tau)


def shoot(sys: MPSystem, x, y, *, u0=None, tol: float = 1e-9,
          max_iter: int = 50, rtol: float = 1e-10, atol: float = 1e-10) -> ShootResult:
    """Connect two boundary points by Newton iteration on the shot direction.

    The direction iterate moves along its transverse basis (one parameter
    in 2D, two in 3D); derivatives of the exit point come from the
    variational flow with an exit-time correction keeping the endpoint on
    the boundary.  The initial guess is the straight chord unless a
    warm-start direction is supplied.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.allclose(x, y):
        raise ValueError("shooting needs distinct boundary points")
    u = np.asarray(u0, dtype=float) if u0 is not None else (y - x)
    u = u / np.linalg.norm(u)
    n = sys.dim

    try:
        v0, traj, tau, q = _shot(sys, x, u, rtol, atol)
    except NoExitError as exc:
        raise ShootingError(f"initial shot trapped: {exc}") from exc
    err = float(np.linalg.norm(q - y))

    for it in range(1, max_iter + 1):
        if err <= tol:
            return ShootResult(v0, u, traj, tau, q, err, it - 1, True)
        res = _boundary_residual(y, q)
        grad_rho = sys.domain.drho(q)
        v_exit = traj.velocity(tau)
        basis = transverse_basis(u)
        jac = np.zeros((len(res), len(basis)))
        for j, dv in enumerate(_direction_derivatives(sys, x, u)):
            var = variational_flow(sys, traj, np.concatenate([np.zeros(n), dv]))
            dx = var.delta(tau)[:n]
            dtau = -float(grad_rho @ dx) / float(grad_rho @ v_exit)
            dq = dx + v_exit * dtau
            # finite-difference derivative of the residual coordinates
            h = 1e-7 * max(1.0, np.linalg.norm(q))
            jac[:, j] = (_boundary_residual(y, q + h * dq) -
                         _boundary_residual(y, q - h * dq)) / (2.0 * h)
        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            raise ShootingError("singular shooting Jacobian") from None

        accepted = False
        for _ in range(8):
            trial = u + sum(s * e for s, e in zip(step, basis))
            trial = trial / np.linalg.norm(trial)
            try:
                v0_t, traj_t, tau_t, q_t = _shot(sys, x, trial, rtol, atol)
            except NoExitError:
                step *= 0.5
                continue
            err_t = float(np.linalg.norm(q_t - y))
            if err_t < err or err_t <= tol:
                u, v0, traj, tau, q, err = trial, v0_t, traj_t, tau_t, q_t, err_t
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break

    if err <= tol:
        return ShootResult(v0, u, traj, tau, q, err, max_iter, True)
    raise ShootingError(
        f"no convergence after {max_iter} iterations (residual {err:.3e})")


@dataclass
class ActionValue:
    """Boundary action sample with its connecting trajectory diagnostics."""

    value: float
    T: float
    converged: bool
    residual: float
    direction: np.ndarray = None
    trajectory: Trajectory = dc_field(repr=False, default=None)


def mane_potential(sys: MPSystem, x, y, *, u0=None, tol: float = 1e-9,
                   rtol: float = 1e-10, atol: float = 1e-10,
                   keep_trajectory: bool = False) -> ActionValue:
    """Action potential between boundary points via the connecting trajectory.

    Valid for simple systems, where the infimum over admissible curves is
    attained on the unique connecting MP-geodesic; shooting failures
    propagate so callers can exclude (not silently fill) those entries.
    """
    shot = shoot(sys, x, y, u0=u0, tol=tol, rtol=rtol, atol=atol)
    value = action_along(sys, shot.trajectory, t_span=(0.0, shot.tau))
    return ActionValue(value=value, T=shot.tau, converged=shot.converged,
                       residual=shot.residual, direction=shot.direction,
                       trajectory=shot.trajectory if keep_trajectory else None)


@dataclass
class ActionTable:
    """Boundary action function sampled on a boundary parameter grid."""

    thetas: np.ndarray
    points: np.ndarray
    values: np.ndarray
    transit_times: np.ndarray
    failures: list

    def asymmetry(self) -> float:
        d = np.abs(self.values - self.values.T)
        return float(np.nanmax(d)) if np.isfinite(d).any() else np.nan

    def max_difference(self, other: "ActionTable") -> float:
        both = np.isfinite(self.values) & np.isfinite(other.values)
        if not both.any():
            return np.nan
        return float(np.max(np.abs(self.values[both] - other.values[both])))

    def n_entries(self) -> int:
        return int(np.isfinite(self.values).sum())


def boundary_action_table(sys: MPSystem, n: int, *, tol: float = 1e-9,
                          rtol: float = 1e-10, atol: float = 1e-10) -> ActionTable:
    """Action table over ``n`` equally spaced boundary points (diagonal excluded).

    Rows are swept outward from the antipodal column with warm-started
    shooting parameters; failed entries are recorded and left NaN.
    """
    if n < 2:
        raise ValueError("need at least two boundary samples")
    if sys.dim != 2:
        raise NotImplementedError("boundary tables are built on 2D charts")
    thetas = 2.0 * np.pi * np.arange(n) / n
    points = np.stack([boundary_point(sys.domain, t) for t in thetas])
    values = np.full((n, n), np.nan)
    times = np.full((n, n), np.nan)
    failures = []

    def rot(a):
        return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])

    def chord_angle(y):
        return np.arctan2(y[1] - x[1], y[0] - x[0])

    half = n // 2
    for i in range(n):
        x = points[i]
        # two sweeps away from the antipode, warm-starting each neighbor
        sweeps = [range(half, n), range(half - 1, 0, -1)]
        for sweep in sweeps:
            prev_u = None
            prev_j = None
            for off in sweep:
                j = (i + off) % n
                y = points[j]
                u0 = None
                if prev_u is not None:
                    u0 = rot(chord_angle(y) - chord_angle(points[prev_j])) @ prev_u
                try:
                    av = mane_potential(sys, x, y, u0=u0, tol=tol,
                                        rtol=rtol, atol=atol)
                except ShootingError:
                    try:
                        av = mane_potential(sys, x, y, tol=tol, rtol=rtol, atol=atol)
                    except ShootingError as exc:
                        failures.append((i, j, str(exc)))
                        prev_u, prev_j = None, None
                        continue
                values[i, j] = av.value
                times[i, j] = av.T
                prev_u, prev_j = av.direction, j

    return ActionTable(thetas=thetas, points=points, values=values,
                       transit_times=times, failures=failures)
