"""MP-flow integration in all of its phase-space formulations.

Four equivalent formulations are integrated (they must produce the same
base curves, which is one of the things the test suite verifies):

* ``euler_lagrange``      -- velocity states, the geodesic-type equation
  ``a^i = -Gamma^i_jk v^j v^k + Y^i_j v^j - (grad U)^i``,
* ``tangent_hamiltonian`` -- velocity states through the Hamiltonian
  vector field of the energy w.r.t. the twisted form on TM (identical
  coordinate equations),
* ``twisted``             -- momenta ``xi = v^flat`` with the twisted
  symplectic form on the cotangent side,
* ``canonical``           -- momenta ``xi = v^flat - alpha`` with the
  canonical form and Hamiltonian ``|xi + alpha|^2/2 + U``.

The elliptic-factor flow (``integrate_tilde``) integrates the deformed
Hamiltonian ``mu (H - k) + k`` without assuming the on-shell cancellation,
so its agreement with the time-changed canonical flow is a genuine check.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .geometry import ScalarField, inverse_metric, inward_normal_at
from .systems import MPSystem, energy, legendre_inv, reduce_system, sphere_lift

FORMULATIONS = ("euler_lagrange", "tangent_hamiltonian", "twisted", "canonical")

REPRESENTATION = {
    "euler_lagrange": "velocity",
    "tangent_hamiltonian": "velocity",
    "twisted": "twisted-momentum",
    "canonical": "canonical-momentum",
}

GLANCING_TOL = 1e-6


class RepresentationError(ValueError):
    """State representation does not match the requested formulation."""


class NoExitError(RuntimeError):
    """No boundary crossing before the horizon; possibly a trapped ray."""


class FlowDomainError(RuntimeError):
    """Trajectory left the chart bounding box."""


class IntegrationError(RuntimeError):
    """The adaptive integrator failed (step-size underflow)."""


@dataclass(frozen=True)
class PhaseState:
    x: np.ndarray
    w: np.ndarray
    rep: str = "velocity"


def from_velocity(sys: MPSystem, formulation: str, x, v) -> np.ndarray:
    """Map a velocity to the fiber variable of the given formulation."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    rep = REPRESENTATION[formulation]
    if rep == "velocity":
        return v.copy()
    g = np.asarray(sys.fields.metric(x), dtype=float)
    if rep == "twisted-momentum":
        return g @ v
    return g @ v - np.asarray(sys.fields.one_form(x), dtype=float)


def to_velocity(sys: MPSystem, formulation: str, x, w) -> np.ndarray:
    """Map the fiber variable of a formulation back to a velocity."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    rep = REPRESENTATION[formulation]
    if rep == "velocity":
        return w.copy()
    ginv = inverse_metric(np.asarray(sys.fields.metric(x), dtype=float))
    if rep == "twisted-momentum":
        return ginv @ w
    return ginv @ (w + np.asarray(sys.fields.one_form(x), dtype=float))


def launch(sys: MPSystem, formulation: str, x, v) -> PhaseState:
    """Phase state in the right representation from a position-velocity pair."""
    return PhaseState(np.asarray(x, dtype=float),
                      from_velocity(sys, formulation, x, v),
                      REPRESENTATION[formulation])


# ---------------------------------------------------------------------------
# right-hand sides

def _make_rhs(sys: MPSystem, formulation: str) -> Callable[[np.ndarray], np.ndarray]:
    f = sys.fields
    n = sys.dim
    metric, dmetric = f.metric, f.dmetric
    done_form, dpotential = f.done_form, f.dpotential
    one_form = f.one_form

    if REPRESENTATION[formulation] == "velocity":
        def rhs(y):
            x, v = y[:n], y[n:]
            g = np.asarray(metric(x), dtype=float)
            ginv = inverse_metric(g)
            dg = dmetric(x)
            da = done_form(x)
            du = dpotential(x)
            # Gamma^i_jk v^j v^k without forming the full symbol
            dgv = np.einsum("ijk,j->ik", dg, v)          # d_k g_ij v^j -> [i,k]
            gamma_v = ginv @ (dgv @ v - 0.5 * np.einsum("jki,j,k->i", dg, v, v))
            force = ginv @ ((da.T - da) @ v)
            return np.concatenate([v, -gamma_v + force - ginv @ du])
        return rhs

    if formulation == "twisted":
        def rhs(y):
            x, xi = y[:n], y[n:]
            g = np.asarray(metric(x), dtype=float)
            ginv = inverse_metric(g)
            dg = dmetric(x)
            da = done_form(x)
            du = dpotential(x)
            v = ginv @ xi
            # d_k g^{ij} xi_i xi_j = -(d_k g_ab) v^a v^b
            dq = -np.einsum("abk,a,b->k", dg, v, v)
            xidot = -0.5 * dq - du + (da.T - da) @ v
            return np.concatenate([v, xidot])
        return rhs

    if formulation == "canonical":
        def rhs(y):
            x, xi = y[:n], y[n:]
            g = np.asarray(metric(x), dtype=float)
            ginv = inverse_metric(g)
            dg = dmetric(x)
            da = done_form(x)
            du = dpotential(x)
            eta = xi + np.asarray(one_form(x), dtype=float)
            v = ginv @ eta
            dq = -np.einsum("abk,a,b->k", dg, v, v)
            xidot = -0.5 * dq - da.T @ v - du
            return np.concatenate([v, xidot])
        return rhs

    raise ValueError(f"unknown formulation {formulation!r}")


def rhs(sys: MPSystem, formulation: str, state: PhaseState) -> np.ndarray:
    """Phase-space derivative of a state under the chosen formulation."""
    if formulation not in FORMULATIONS:
        raise ValueError(f"unknown formulation {formulation!r}")
    if state.rep != REPRESENTATION[formulation]:
        raise RepresentationError(
            f"state carries {state.rep!r} but formulation {formulation!r} "
            f"needs {REPRESENTATION[formulation]!r}")
    y = np.concatenate([np.asarray(state.x, dtype=float),
                        np.asarray(state.w, dtype=float)])
    return _make_rhs(sys, formulation)(y)


def _make_rhs_tilde(sys: MPSystem, mu: ScalarField) -> Callable[[np.ndarray], np.ndarray]:
    f = sys.fields
    n = sys.dim
    k = sys.k

    def rhs(y):
        x, xi = y[:n], y[n:]
        g = np.asarray(f.metric(x), dtype=float)
        ginv = inverse_metric(g)
        dg = f.dmetric(x)
        da = f.done_form(x)
        du = f.dpotential(x)
        eta = xi + np.asarray(f.one_form(x), dtype=float)
        v = ginv @ eta
        h_val = 0.5 * float(eta @ v) + float(f.potential(x))
        dh = 0.5 * np.einsum("abk,a,b->k", dg, v, v) * (-1.0) + da.T @ v + du
        m = float(mu.value(x))
        dm = np.asarray(mu.gradient(x), dtype=float)
        # full Hamilton equations of mu (H - k) + k; the (H - k) term is
        # retained even though it vanishes on shell
        return np.concatenate([m * v, -dm * (h_val - k) - m * dh])

    return rhs


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class Trajectory:
    """Dense-output integrated curve with conservation diagnostics."""

    sys: MPSystem
    formulation: str
    t: np.ndarray
    y: np.ndarray
    sol: Callable[[float], np.ndarray]
    energy0: float
    drift: np.ndarray
    nfev: int
    naccepted: int
    nrejected: int
    exited: bool
    energy_fn: Callable[[np.ndarray, np.ndarray], float] = dc_field(repr=False, default=None)

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    @property
    def energy_drift(self) -> float:
        return float(np.max(self.drift))

    def state(self, t: float) -> np.ndarray:
        return np.asarray(self.sol(t), dtype=float)

    def position(self, t: float) -> np.ndarray:
        return self.state(t)[: self.sys.dim]

    def velocity(self, t: float) -> np.ndarray:
        s = self.state(t)
        n = self.sys.dim
        return to_velocity(self.sys, self.formulation, s[:n], s[n:])

    def positions(self) -> np.ndarray:
        return self.y[:, : self.sys.dim]


def _exit_event(sys: MPSystem, overshoot: float):
    n = sys.dim
    rho = sys.domain.rho

    def ev(t, y):
        return float(rho(y[:n])) + overshoot

    ev.terminal = True
    ev.direction = -1.0
    return ev


def _bbox_event(sys: MPSystem):
    n = sys.dim
    bbox = np.asarray(sys.domain.bbox, dtype=float)

    def ev(t, y):
        x = y[:n]
        return float(np.min(np.concatenate([x - bbox[0], bbox[1] - x])))

    ev.terminal = True
    ev.direction = -1.0
    return ev


def _finish(sys, formulation, res, energy_fn, exited):
    if res.status == -1:
        raise IntegrationError(res.message)
    t = res.t
    y = res.y.T
    n = sys.dim
    e = np.array([energy_fn(row[:n], row[n:]) for row in y])
    drift = np.abs(e - e[0])
    naccepted = len(t) - 1
    attempts = max(naccepted, round((res.nfev - 1) / 6))
    return Trajectory(
        sys=sys, formulation=formulation, t=t, y=y, sol=res.sol,
        energy0=float(e[0]), drift=drift, nfev=res.nfev,
        naccepted=naccepted, nrejected=int(attempts - naccepted),
        exited=exited, energy_fn=energy_fn)


def _as_y0(sys, formulation, state0):
    if isinstance(state0, PhaseState):
        want = REPRESENTATION[formulation] if formulation in REPRESENTATION \
            else "canonical-momentum"
        if state0.rep != want:
            raise RepresentationError(
                f"state carries {state0.rep!r} but {formulation!r} needs {want!r}")
        x, w = state0.x, state0.w
    else:
        x, w = state0
    return np.concatenate([np.asarray(x, dtype=float), np.asarray(w, dtype=float)])


def integrate(sys: MPSystem, formulation: str, state0, t_max: Optional[float] = None,
              *, rtol: float = 1e-10, atol: float = 1e-10,
              stop_at_exit: bool = True, exit_overshoot: Optional[float] = None,
              max_step: float = np.inf) -> Trajectory:
    """Integrate the MP-flow with an embedded RK5(4) pair and dense output.

    With ``stop_at_exit`` the run is terminated a small overshoot past the
    boundary so the dense output brackets the exit (catalog fields extend
    smoothly slightly beyond ``M``).  Leaving the bounding box raises.
    """
    if formulation not in FORMULATIONS:
        raise ValueError(f"unknown formulation {formulation!r}")
    y0 = _as_y0(sys, formulation, state0)
    if t_max is None:
        t_max = sys.t_max_hint()
    events = [_bbox_event(sys)]
    if stop_at_exit:
        if exit_overshoot is None:
            exit_overshoot = 1e-3 * sys.domain.diameter()
        events.append(_exit_event(sys, exit_overshoot))
    fun = _make_rhs(sys, formulation)
    res = solve_ivp(lambda t, y: fun(y), (0.0, float(t_max)), y0, method="RK45",
                    rtol=rtol, atol=atol, dense_output=True, events=events,
                    max_step=max_step)
    if len(res.t_events[0]):
        raise FlowDomainError("trajectory left the chart bounding box")
    exited = stop_at_exit and len(res.t_events[1]) > 0

    def efun(x, w):
        return energy(sys, x, to_velocity(sys, formulation, x, w))

    return _finish(sys, formulation, res, efun, exited)


def integrate_tilde(sys: MPSystem, mu: ScalarField, state0,
                    s_max: Optional[float] = None, *, rtol: float = 1e-10,
                    atol: float = 1e-10, stop_at_exit: bool = True,
                    exit_overshoot: Optional[float] = None) -> Trajectory:
    """Integrate the elliptic-factor Hamiltonian flow (canonical momenta).

    The initial state must lie on the shared level set, checked through
    the deformed Hamiltonian itself.
    """
    y0 = _as_y0(sys, "canonical", state0)
    n = sys.dim

    def h_tilde(x, xi):
        ginv = inverse_metric(np.asarray(sys.fields.metric(x), dtype=float))
        eta = xi + np.asarray(sys.fields.one_form(x), dtype=float)
        h = 0.5 * float(eta @ ginv @ eta) + float(sys.fields.potential(x))
        return float(mu.value(x)) * (h - sys.k) + sys.k

    if abs(h_tilde(y0[:n], y0[n:]) - sys.k) > 1e-10 * max(1.0, abs(sys.k)):
        raise ValueError("initial state is not on the deformed energy level")
    if s_max is None:
        mu0 = float(mu.value(y0[:n]))
        s_max = sys.t_max_hint() / max(mu0, 1e-12)
    events = [_bbox_event(sys)]
    if stop_at_exit:
        if exit_overshoot is None:
            exit_overshoot = 1e-3 * sys.domain.diameter()
        events.append(_exit_event(sys, exit_overshoot))
    fun = _make_rhs_tilde(sys, mu)
    res = solve_ivp(lambda t, y: fun(y), (0.0, float(s_max)), y0, method="RK45",
                    rtol=rtol, atol=atol, dense_output=True, events=events)
    if len(res.t_events[0]):
        raise FlowDomainError("trajectory left the chart bounding box")
    exited = stop_at_exit and len(res.t_events[1]) > 0
    return _finish(sys, "canonical", res, h_tilde, exited)


def time_change(traj: Trajectory, mu: ScalarField, *, rtol: float = 1e-12,
                atol: float = 1e-12):
    """Cumulative time change ``beta`` with ``beta'(s) = mu(x(s))``.

    Returns ``(beta, beta_samples)`` where ``beta`` is callable on the
    trajectory's parameter interval and ``beta_samples`` matches
    ``traj.t``.
    """
    n = traj.sys.dim

    def fun(s, b):
        return [float(mu.value(traj.sol(s)[:n]))]

    res = solve_ivp(fun, (0.0, traj.t_end), [0.0], method="RK45",
                    rtol=rtol, atol=atol, dense_output=True)

    def beta(s):
        return float(res.sol(s)[0])

    return beta, np.array([beta(s) for s in traj.t])


# ---------------------------------------------------------------------------
# exit times and the scattering relation

def exit_time(sys: MPSystem, traj: Trajectory) -> float:
    """First boundary crossing, refined on the dense output.

    Scans trajectory samples for a sign change of ``rho`` and refines by
    bracketing root finding; absence of a crossing is reported as a
    possible trapped ray (simplicity violation), not an integrator error.
    """
    rho = sys.domain.rho
    n = sys.dim
    r = np.array([float(rho(row[:n])) for row in traj.y])
    idx = None
    for i in range(1, len(r)):
        if r[i] < 0.0 <= r[i - 1]:
            idx = i
            break
    if idx is None:
        raise NoExitError(
            f"no boundary crossing before t={traj.t_end:.6g}; "
            "possible trapped ray (non-simple system?)")
    tau = brentq(lambda t: float(rho(traj.sol(t)[:n])),
                 traj.t[idx - 1], traj.t[idx], xtol=1e-14, rtol=8.9e-16)
    return float(tau)


@dataclass
class ScatteringRecord:
    """One entry of the scattering relation at the fixed energy level."""

    entry_point: np.ndarray
    entry_velocity: np.ndarray
    exit_point: np.ndarray
    exit_velocity: np.ndarray
    tau: float
    action: float
    glancing: bool
    energy_entry: float
    energy_exit: float
    trajectory: Trajectory = dc_field(repr=False, default=None)


def scattering(sys: MPSystem, p, u, *, rtol: float = 1e-10, atol: float = 1e-10,
               keep_trajectory: bool = False) -> ScatteringRecord:
    """Follow one inbound boundary state to its outbound image.

    ``u`` is an inward direction at the boundary point ``p``; it is lifted
    to the energy sphere before integration.  Nearly tangential entries
    are accepted but flagged.
    """
    p = np.asarray(p, dtype=float)
    v0 = sphere_lift(sys, p, np.asarray(u, dtype=float))
    nu = inward_normal_at(sys.fields, sys.domain, p)
    g = np.asarray(sys.fields.metric(p), dtype=float)
    inward = float(v0 @ g @ nu)
    if inward < -GLANCING_TOL:
        raise ValueError("entry velocity points outward")
    glancing = abs(inward) < GLANCING_TOL
    traj = integrate(sys, "euler_lagrange", (p, v0), rtol=rtol, atol=atol,
                     stop_at_exit=True)
    tau = exit_time(sys, traj)
    s = traj.state(tau)
    q, v_out = s[: sys.dim], s[sys.dim:]

    from .action import action_along  # deferred: action builds on flow

    act = action_along(sys, traj, t_span=(0.0, tau))
    return ScatteringRecord(
        entry_point=p, entry_velocity=v0, exit_point=q, exit_velocity=v_out,
        tau=tau, action=act, glancing=glancing,
        energy_entry=energy(sys, p, v0), energy_exit=energy(sys, q, v_out),
        trajectory=traj if keep_trajectory else None)


# ---------------------------------------------------------------------------
# linearized flow

@dataclass
class VariationalSolution:
    t: np.ndarray
    deltas: np.ndarray
    sol: Callable[[float], np.ndarray]

    def delta(self, t: float) -> np.ndarray:
        return np.asarray(self.sol(t), dtype=float)


def variational_flow(sys: MPSystem, traj: Trajectory, delta0,
                     *, fd_step: float = 1e-6, rtol: float = 1e-8,
                     atol: float = 1e-8) -> VariationalSolution:
    """Transport a phase-space perturbation along a velocity trajectory.

    The linearization is the directional derivative of the nonlinear
    vector field (central differences along the normalized perturbation),
    so no second derivatives of the fields are required.
    """
    if REPRESENTATION[traj.formulation] != "velocity":
        raise RepresentationError("variational flow runs along velocity trajectories")
    fun = _make_rhs(sys, traj.formulation)
    delta0 = np.asarray(delta0, dtype=float)

    def dfun(t, d):
        nrm = np.linalg.norm(d)
        if nrm == 0.0:
            return np.zeros_like(d)
        y = traj.sol(t)
        e = d / nrm
        return nrm * (fun(y + fd_step * e) - fun(y - fd_step * e)) / (2.0 * fd_step)

    res = solve_ivp(dfun, (0.0, traj.t_end), delta0, method="RK45",
                    rtol=rtol, atol=atol, dense_output=True)
    if res.status == -1:
        raise IntegrationError(res.message)
    return VariationalSolution(t=res.t, deltas=res.y.T, sol=res.sol)


def transverse_basis(u: np.ndarray):
    """Euclidean-orthonormal complements of a direction (1 vector in 2D, 2 in 3D).

    These are the shooting parameters: perturbing ``u`` along them spans
    the direction sphere to first order, and the same basis is used both
    for the variational derivatives and for the Newton update.
    """
    u = np.asarray(u, dtype=float)
    un = u / np.linalg.norm(u)
    if len(u) == 2:
        return [np.array([-un[1], un[0]])]
    a = np.zeros(3)
    a[int(np.argmin(np.abs(un)))] = 1.0
    e1 = np.cross(un, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(un, e1)
    e2 /= np.linalg.norm(e2)
    return [e1, e2]


def _direction_derivatives(sys: MPSystem, p, u):
    """d(sphere lift)/d(transverse parameters), by central differences."""
    p = np.asarray(p, dtype=float)
    u = np.asarray(u, dtype=float)
    u = u / np.linalg.norm(u)
    h = 1e-6
    outs = []
    for e in transverse_basis(u):
        vp = sphere_lift(sys, p, u + h * e)
        vm = sphere_lift(sys, p, u - h * e)
        outs.append((vp - vm) / (2.0 * h))
    return outs


def exp_jacobian_monitor(sys: MPSystem, p, u, *, n_checks: int = 40,
                         rtol: float = 1e-10, atol: float = 1e-10) -> float:
    """Minimum normalized Jacobian determinant of the exponential map.

    Transports the derivative of the energy-sphere direction family along
    the ray and monitors ``det[velocity, J_1, ...]``; a sign change before
    exit signals a conjugate point (failure of the diffeomorphism half of
    simplicity).  Returns the minimum over a sample of interior times.
    """
    p = np.asarray(p, dtype=float)
    v0 = sphere_lift(sys, p, np.asarray(u, dtype=float))
    traj = integrate(sys, "euler_lagrange", (p, v0), rtol=rtol, atol=atol)
    tau = exit_time(sys, traj)
    n = sys.dim
    variations = []
    for dv in _direction_derivatives(sys, p, u):
        d0 = np.concatenate([np.zeros(n), dv])
        variations.append(variational_flow(sys, traj, d0))
    worst = np.inf
    for t in np.linspace(0.05 * tau, tau, n_checks):
        cols = [traj.velocity(t)]
        cols += [var.delta(t)[:n] for var in variations]
        mat = np.stack(cols, axis=-1)
        scale = np.prod([np.linalg.norm(c) for c in cols])
        if scale == 0.0:
            return 0.0
        worst = min(worst, float(np.linalg.det(mat) / scale))
    return worst


def flow_map(sys: MPSystem, formulation: str, state0, t: float, *,
             rtol: float = 1e-10, atol: float = 1e-10) -> np.ndarray:
    """Flow a state for time ``t`` and return the endpoint state array."""
    traj = integrate(sys, formulation, state0, t_max=t, rtol=rtol, atol=atol,
                     stop_at_exit=False)
    return traj.state(t)


# ---------------------------------------------------------------------------
# reparametrization to the reduced magnetic system

@dataclass
class ReducedTrajectory:
    """Arc-parameter view of an MP trajectory as a magnetic geodesic.

    The new parameter integrates ``2(k - U)`` along the curve; positions
    are shared with the base trajectory and fiber velocities rescale by
    the same factor, producing a unit-speed curve of the reduced metric.
    """

    reduced_sys: MPSystem
    base: Trajectory
    s_sol: Callable[[float], np.ndarray]
    s: np.ndarray

    @property
    def s_end(self) -> float:
        return float(self.s[-1])

    def t_of_s(self, s: float) -> float:
        if s <= 0.0:
            return 0.0
        if s >= self.s_end:
            return self.base.t_end
        return float(brentq(lambda t: float(self.s_sol(t)[0]) - s,
                            0.0, self.base.t_end, xtol=1e-14, rtol=8.9e-16))

    def state(self, s: float):
        t = self.t_of_s(s)
        x = self.base.position(t)
        v = self.base.velocity(t)
        k = self.base.sys.k
        u = float(self.base.sys.fields.potential(x))
        return x, v / (2.0 * (k - u))

    def unit_speed_residual(self, m: int = 60) -> float:
        worst = 0.0
        for s in np.linspace(0.0, self.s_end, m):
            x, gp = self.state(s)
            g_red = np.asarray(self.reduced_sys.fields.metric(x), dtype=float)
            worst = max(worst, abs(float(np.sqrt(gp @ g_red @ gp)) - 1.0))
        return worst


def reparametrize_to_reduced(sys: MPSystem, traj: Trajectory,
                             reduced: Optional[MPSystem] = None,
                             *, rtol: float = 1e-12, atol: float = 1e-12) -> ReducedTrajectory:
    """Reparametrize an energy-k trajectory as a unit-speed reduced geodesic."""
    red = reduced if reduced is not None else reduce_system(sys)
    n = sys.dim
    k = sys.k
    pot = sys.fields.potential

    def fun(t, s):
        x = traj.sol(t)[:n]
        return [2.0 * (k - float(pot(x)))]

    res = solve_ivp(fun, (0.0, traj.t_end), [0.0], method="RK45",
                    rtol=rtol, atol=atol, dense_output=True)
    s_samples = np.array([float(res.sol(t)[0]) for t in traj.t])
    return ReducedTrajectory(reduced_sys=red, base=traj, s_sol=res.sol, s=s_samples)
