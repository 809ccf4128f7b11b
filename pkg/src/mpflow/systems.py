"""MP-system records, energies, Hamiltonians, and the magnetic reduction.

An MP-system is a chart domain together with a metric, a magnetic 1-form
and a potential, plus a fixed energy level ``k``.  The standing assumption
``k > max_M U`` is enforced at construction by dense grid sampling (it is
what makes every energy sphere nonempty and the reduction metric
positive).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .geometry import (
    ChartDomain,
    DegenerateBoundaryError,
    DegenerateMetricError,
    ScalarField,
    ScenarioFields,
    boundary_samples,
    christoffel_at,
    inverse_metric,
    inward_normal_at,
    lorentz_at,
    metric_at,
    second_fundamental_form_at,
    tangent_project,
)

# grid resolutions for the standing-assumption check; 201^3 would be
# needlessly slow, 41^3 samples the interior at comparable spacing cost
VALIDATION_GRID = {2: 201, 3: 41}
ENERGY_MARGIN = 1e-6


class BelowPotentialError(ValueError):
    """Energy level does not dominate the potential on the domain."""


@dataclass(frozen=True)
class GridStats:
    max_potential: float
    min_metric_eig: float
    min_chart_speed: float
    n_points: int


def _grid_points(domain: ChartDomain, resolution: int) -> np.ndarray:
    bbox = np.asarray(domain.bbox, dtype=float)
    axes = [np.linspace(bbox[0, i], bbox[1, i], resolution) for i in range(domain.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    inside = np.asarray(domain.rho(pts)) >= 0.0
    return pts[inside]


def grid_stats(domain: ChartDomain, fields: ScenarioFields, k: float,
               resolution: Optional[int] = None) -> GridStats:
    """Sampled field statistics over the bounding-box grid intersected with M."""
    res = resolution or VALIDATION_GRID[domain.dim]
    pts = _grid_points(domain, res)
    u = np.asarray(fields.potential(pts), dtype=float)
    g = np.asarray(fields.metric(pts), dtype=float)
    eigs = np.linalg.eigvalsh(g)
    max_u = float(np.max(u))
    min_eig = float(np.min(eigs))
    # lower bound on chart-coordinate speed sqrt(2(k-U))/sqrt(lambda_max(g))
    with np.errstate(invalid="ignore"):
        speed = np.sqrt(np.maximum(2.0 * (k - u), 0.0) / np.max(eigs, axis=-1))
    return GridStats(max_u, min_eig, float(np.min(speed)), len(pts))


@dataclass(frozen=True)
class MPSystem:
    """Chart domain + fields + fixed energy level, validated on creation."""

    domain: ChartDomain
    fields: ScenarioFields
    k: float
    name: str = ""
    grid_resolution: Optional[int] = None
    stats: GridStats = dc_field(init=False, repr=False, compare=False)

    def __post_init__(self):
        st = grid_stats(self.domain, self.fields, self.k, self.grid_resolution)
        if st.min_metric_eig <= 0.0:
            raise DegenerateMetricError(
                f"metric not positive definite on the sampling grid "
                f"(min eigenvalue {st.min_metric_eig:.3e})")
        if self.k <= st.max_potential + ENERGY_MARGIN:
            raise BelowPotentialError(
                f"energy level k={self.k} does not exceed max U="
                f"{st.max_potential:.6g} plus margin {ENERGY_MARGIN:g}")
        for xb in boundary_samples(self.domain, 16 if self.domain.dim == 2 else 32):
            if np.linalg.norm(self.domain.drho(xb)) < 1e-8:
                raise DegenerateBoundaryError(
                    f"d rho vanishes at sampled boundary point {xb}")
        object.__setattr__(self, "stats", st)

    @property
    def dim(self) -> int:
        return self.domain.dim

    def t_max_hint(self) -> float:
        """Default no-exit horizon, 100 crossings at the slowest chart speed."""
        return 100.0 * self.domain.diameter() / self.stats.min_chart_speed


def energy(sys: MPSystem, x, v) -> float:
    """Kinetic-plus-potential energy ``E(x, v) = |v|_g^2 / 2 + U(x)``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    g = np.asarray(sys.fields.metric(x), dtype=float)
    return float(0.5 * v @ g @ v + sys.fields.potential(x))


HAMILTONIAN_KINDS = ("H", "H_tilde", "H_hat", "H_reduced")


@dataclass(frozen=True)
class HamiltonianSpec:
    """Selector for the Hamiltonian family sharing the level set {H = k}."""

    kind: str
    k: float
    mu: Optional[ScalarField] = None

    def __post_init__(self):
        if self.kind not in HAMILTONIAN_KINDS:
            raise ValueError(f"unknown Hamiltonian kind {self.kind!r}")
        if self.kind == "H_tilde" and self.mu is None:
            raise ValueError("H_tilde requires an elliptic factor mu")


def hamiltonian(sys: MPSystem, spec: HamiltonianSpec, x, xi) -> float:
    """Evaluate the requested Hamiltonian at a cotangent point.

    ``H`` is the canonical one, ``H_tilde`` its elliptic-factor deformation
    ``mu (H - k) + k``, ``H_hat`` the potential-free normalization, and
    ``H_reduced`` the Hamiltonian of the reduced magnetic system (energy
    level 1/2).
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    f = sys.fields
    ginv = inverse_metric(metric_at(f, x))
    eta = xi + np.asarray(f.one_form(x), dtype=float)
    q = float(eta @ ginv @ eta)
    u = float(f.potential(x))
    k = spec.k
    if spec.kind == "H":
        return 0.5 * q + u
    if spec.kind == "H_tilde":
        mu = float(spec.mu.value(x))
        return mu * (0.5 * q + u - k) + k
    if spec.kind == "H_hat":
        return k * q / (2.0 * (k - u))
    return q / (4.0 * (k - u))  # H_reduced


def legendre(sys: MPSystem, x, v) -> np.ndarray:
    """Legendre transform to the canonical momentum, ``xi = v^flat - alpha``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    g = np.asarray(sys.fields.metric(x), dtype=float)
    return g @ v - np.asarray(sys.fields.one_form(x), dtype=float)


def legendre_inv(sys: MPSystem, x, xi) -> np.ndarray:
    """Inverse Legendre transform, ``v = g^{-1} (xi + alpha)``."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    ginv = inverse_metric(np.asarray(sys.fields.metric(x), dtype=float))
    return ginv @ (xi + np.asarray(sys.fields.one_form(x), dtype=float))


def scaled_fields(fields: ScenarioFields, scale: ScalarField,
                  name: str = "") -> ScenarioFields:
    """Fields with the metric conformally rescaled by ``scale`` (>0).

    One-form and potential are kept; analytic metric derivatives are
    propagated through the product rule when available.
    """
    def metric(x):
        c = np.asarray(scale.value(x), dtype=float)
        return c[..., None, None] * np.asarray(fields.metric(x), dtype=float)

    metric_d = None
    if fields.metric_d is not None and scale.grad is not None:
        def metric_d(x):
            c = np.asarray(scale.value(x), dtype=float)
            dc = np.asarray(scale.grad(x), dtype=float)
            g = np.asarray(fields.metric(x), dtype=float)
            dg = np.asarray(fields.metric_d(x), dtype=float)
            return (c[..., None, None, None] * dg
                    + g[..., :, :, None] * dc[..., None, None, :])

    return ScenarioFields(
        metric=metric,
        one_form=fields.one_form,
        potential=fields.potential,
        metric_d=metric_d,
        one_form_d=fields.one_form_d,
        potential_d=fields.potential_d,
        fd_step=fields.fd_step,
        name=name or f"scaled({fields.name})",
    )


def reduce_system(sys: MPSystem) -> MPSystem:
    """Reduction to the magnetic system ``(2(k - U) g, alpha)`` at energy 1/2.

    The potential of the result is zero and its 1-form is unchanged; MP
    trajectories of ``sys`` reparametrize to unit-speed magnetic geodesics
    of the result.
    """
    k = sys.k
    f = sys.fields
    scale = ScalarField(
        value=lambda x: 2.0 * (k - np.asarray(f.potential(x), dtype=float)),
        grad=(lambda x: -2.0 * np.asarray(f.potential_d(x), dtype=float))
        if f.potential_d is not None else None,
    )
    gfields = scaled_fields(f, scale, name=f"reduced({f.name})")
    zero_pot = ScenarioFields(
        metric=gfields.metric,
        one_form=gfields.one_form,
        potential=lambda x: np.zeros(np.shape(x)[:-1]),
        metric_d=gfields.metric_d,
        one_form_d=gfields.one_form_d,
        potential_d=lambda x: np.zeros(np.shape(x)),
        fd_step=f.fd_step,
        name=gfields.name,
    )
    return MPSystem(sys.domain, zero_pot, 0.5,
                    name=f"reduced({sys.name})",
                    grid_resolution=sys.grid_resolution)


def sphere_lift(sys: MPSystem, x, u) -> np.ndarray:
    """Scale direction ``u`` to the energy-k sphere, ``|v|_g^2 = 2(k - U)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    s2 = 2.0 * (sys.k - float(sys.fields.potential(x)))
    if s2 <= 0.0:
        raise BelowPotentialError(
            f"energy level {sys.k} at or below the potential at {x}")
    g = np.asarray(sys.fields.metric(x), dtype=float)
    norm = np.sqrt(u @ g @ u)
    if norm == 0.0:
        raise ValueError("cannot lift the zero direction")
    return np.sqrt(s2) * u / norm


def mp_convexity_margin(sys: MPSystem, x, v) -> float:
    """Margin of the strict convexity inequality at a boundary state.

    Positive for every tangent ``v`` on the energy sphere certifies (at
    the sampled states) that trajectories tangent to the boundary bend
    outward: second fundamental form minus the normal force component
    plus the normal potential slope.
    """
    x = np.asarray(x, dtype=float)
    f = sys.fields
    vt = tangent_project(f, sys.domain, x, v)
    lam = second_fundamental_form_at(f, sys.domain, x, vt)
    nu = inward_normal_at(f, sys.domain, x)
    g = metric_at(f, x)
    yv = lorentz_at(f, x) @ vt
    du = f.dpotential(x)
    return float(lam - yv @ g @ nu + du @ nu)
