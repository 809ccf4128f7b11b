"""Chart domains, tensor fields, and pointwise differential geometry.

Conventions used throughout the package:

* points are float arrays of shape ``(n,)`` with ``n`` in {2, 3}; every
  field callable also accepts batches shaped ``(..., n)`` and broadcasts,
* ``metric(x)`` returns covariant components ``g_ij`` as ``(..., n, n)``,
* derivative arrays carry the differentiation index last:
  ``dmetric(x)[i, j, k] = d g_ij / d x^k``,
  ``done_form(x)[i, k]  = d alpha_i / d x^k``,
  ``dpotential(x)[k]    = d U / d x^k``,
* the magnetic 2-form is the exterior derivative of the 1-form,
  ``Omega_ij = d_i alpha_j - d_j alpha_i``, and the force endomorphism is
  ``Y^i_j = g^{ik} Omega_kj``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq


class GeometryError(ValueError):
    """Base class for geometric evaluation failures."""


class DegenerateMetricError(GeometryError):
    """Metric is not symmetric positive definite at the requested point."""


class DegenerateBoundaryError(GeometryError):
    """Defining-function gradient vanishes where a normal is required."""


BOUNDARY_TOL = 1e-9

# 4th-order central difference stencil, f'(x) ~ sum(w_j f(x + s_j h)) / h
_FD4_SHIFTS = np.array([-2.0, -1.0, 1.0, 2.0])
_FD4_WEIGHTS = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0


def fd4(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float) -> np.ndarray:
    """4th-order central-difference Jacobian of ``fn`` at a single point.

    Returns an array of shape ``fn(x).shape + (n,)`` with the derivative
    index last.  All stencil points are evaluated in one batched call, so
    ``fn`` only needs to support ``(..., n)`` inputs.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    h = step * (1.0 + np.linalg.norm(x))
    # stencil points, shape (4, n, n): shift s, coordinate k
    pts = x + h * _FD4_SHIFTS[:, None, None] * np.eye(n)[None, :, :]
    vals = np.asarray(fn(pts.reshape(-1, n)), dtype=float)
    vals = vals.reshape((4, n) + vals.shape[1:])
    deriv = np.einsum("s,sk...->...k", _FD4_WEIGHTS, vals) / h
    return deriv


@dataclass(frozen=True)
class ScalarField:
    """Scalar function on the chart with optional analytic derivatives."""

    value: Callable[[np.ndarray], np.ndarray]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hess: Optional[Callable[[np.ndarray], np.ndarray]] = None
    fd_step: float = 1e-5

    def __call__(self, x):
        return self.value(x)

    def gradient(self, x):
        if self.grad is not None:
            return np.asarray(self.grad(x), dtype=float)
        return fd4(self.value, x, self.fd_step)

    def hessian(self, x):
        if self.hess is not None:
            return np.asarray(self.hess(x), dtype=float)
        if self.grad is not None:
            return fd4(self.grad, x, self.fd_step)

        def fd_grad(pts):
            pts = np.atleast_2d(pts)
            return np.stack([fd4(self.value, p, self.fd_step) for p in pts])

        # second differences are noisier; widen the outer step
        return fd4(fd_grad, x, 1e-4)


def constant_field(c: float) -> ScalarField:
    return ScalarField(
        value=lambda x: np.full(np.shape(x)[:-1], float(c)),
        grad=lambda x: np.zeros(np.shape(x)),
        hess=lambda x: np.zeros(np.shape(x) + (np.shape(x)[-1],)),
    )


@dataclass(frozen=True)
class ChartDomain:
    """Disk-type chart domain ``M = closure{rho > 0}`` in R^n.

    ``bbox`` is ``(2, n)``: row 0 the lower corner, row 1 the upper corner;
    it must contain ``{rho >= 0}``.  The defining function must have a
    nonvanishing gradient on ``{rho = 0}`` and be positive at the chart
    center (the origin is assumed interior; boundary lookups shoot rays
    from it).
    """

    dim: int
    rho: Callable[[np.ndarray], np.ndarray]
    bbox: np.ndarray
    rho_d: Optional[Callable[[np.ndarray], np.ndarray]] = None
    rho_dd: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = ""
    fd_step: float = 1e-5

    def drho(self, x):
        if self.rho_d is not None:
            return np.asarray(self.rho_d(x), dtype=float)
        return fd4(self.rho, x, self.fd_step)

    def d2rho(self, x):
        if self.rho_dd is not None:
            return np.asarray(self.rho_dd(x), dtype=float)
        return fd4(self.drho, x, self.fd_step)

    def contains(self, x, tol=0.0):
        return np.asarray(self.rho(x)) >= -tol

    def on_boundary(self, x, tol=BOUNDARY_TOL):
        return abs(float(self.rho(x))) < tol

    def diameter(self) -> float:
        bbox = np.asarray(self.bbox, dtype=float)
        return float(np.linalg.norm(bbox[1] - bbox[0]))


@dataclass(frozen=True)
class ScenarioFields:
    """Metric, magnetic 1-form and potential on a chart domain.

    Analytic derivative callables are optional; when absent, 4th-order
    central differences with step ``fd_step * (1 + |x|)`` are used.
    """

    metric: Callable[[np.ndarray], np.ndarray]
    one_form: Callable[[np.ndarray], np.ndarray]
    potential: Callable[[np.ndarray], np.ndarray]
    metric_d: Optional[Callable[[np.ndarray], np.ndarray]] = None
    one_form_d: Optional[Callable[[np.ndarray], np.ndarray]] = None
    potential_d: Optional[Callable[[np.ndarray], np.ndarray]] = None
    fd_step: float = 1e-5
    name: str = ""

    @property
    def analytic(self) -> bool:
        return (self.metric_d is not None and self.one_form_d is not None
                and self.potential_d is not None)

    def dmetric(self, x):
        if self.metric_d is not None:
            return np.asarray(self.metric_d(x), dtype=float)
        return fd4(self.metric, x, self.fd_step)

    def done_form(self, x):
        if self.one_form_d is not None:
            return np.asarray(self.one_form_d(x), dtype=float)
        return fd4(self.one_form, x, self.fd_step)

    def dpotential(self, x):
        if self.potential_d is not None:
            return np.asarray(self.potential_d(x), dtype=float)
        return fd4(self.potential, x, self.fd_step)

    def without_analytic(self) -> "ScenarioFields":
        """Copy forced into finite-difference mode (cross-mode oracle)."""
        return replace(self, metric_d=None, one_form_d=None, potential_d=None)


def inverse_metric(g: np.ndarray) -> np.ndarray:
    """Inverse of a small SPD matrix (explicit 2x2, LAPACK otherwise)."""
    if g.shape == (2, 2):
        det = g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
        if det <= 0.0:
            raise DegenerateMetricError("metric determinant <= 0")
        return np.array([[g[1, 1], -g[0, 1]], [-g[1, 0], g[0, 0]]]) / det
    return np.linalg.inv(g)


def metric_at(fields: ScenarioFields, x) -> np.ndarray:
    """Covariant metric at ``x``, validated symmetric positive definite."""
    g = np.asarray(fields.metric(np.asarray(x, dtype=float)), dtype=float)
    if not np.allclose(g, g.T, atol=1e-12):
        raise DegenerateMetricError(f"metric not symmetric at {x}")
    try:
        np.linalg.cholesky(g)
    except np.linalg.LinAlgError:
        raise DegenerateMetricError(f"metric not positive definite at {x}") from None
    return g


def christoffel_at(fields: ScenarioFields, x) -> np.ndarray:
    """Christoffel symbols ``Gamma^i_jk``, symmetric in the lower pair."""
    x = np.asarray(x, dtype=float)
    g = metric_at(fields, x)
    ginv = inverse_metric(g)
    dg = fields.dmetric(x)
    return christoffel_from(ginv, dg)


def christoffel_from(ginv: np.ndarray, dg: np.ndarray) -> np.ndarray:
    # Gamma^i_jk = 1/2 g^{il} (d_j g_lk + d_k g_jl - d_l g_jk)
    t1 = np.einsum("il,lkj->ijk", ginv, dg)
    t2 = np.einsum("il,jlk->ijk", ginv, dg)
    t3 = np.einsum("il,jkl->ijk", ginv, dg)
    return 0.5 * (t1 + t2 - t3)


def omega_at(fields: ScenarioFields, x) -> np.ndarray:
    """Magnetic 2-form ``Omega_ij = d_i alpha_j - d_j alpha_i``."""
    da = fields.done_form(np.asarray(x, dtype=float))
    return da.T - da


def lorentz_at(fields: ScenarioFields, x) -> np.ndarray:
    """Force endomorphism ``Y^i_j = g^{ik} Omega_kj`` (g-antisymmetric)."""
    x = np.asarray(x, dtype=float)
    ginv = inverse_metric(metric_at(fields, x))
    return ginv @ omega_at(fields, x)


def grad_at(fields: ScenarioFields, x) -> np.ndarray:
    """Metric gradient of the potential, ``(grad U)^i = g^{ij} d_j U``."""
    x = np.asarray(x, dtype=float)
    ginv = inverse_metric(metric_at(fields, x))
    return ginv @ fields.dpotential(x)


def inward_normal_at(fields: ScenarioFields, domain: ChartDomain, x) -> np.ndarray:
    """Inward unit normal of the boundary, ``nu^i = g^{ij} d_j rho / |d rho|``.

    ``rho`` increases into the domain, so the metric gradient of ``rho``
    points inward without a sign flip.
    """
    x = np.asarray(x, dtype=float)
    grad = domain.drho(x)
    if np.linalg.norm(grad) < 1e-8:
        raise DegenerateBoundaryError(f"d rho vanishes near the boundary at {x}")
    ginv = inverse_metric(metric_at(fields, x))
    dual_norm = np.sqrt(grad @ ginv @ grad)
    return (ginv @ grad) / dual_norm


def tangent_project(fields: ScenarioFields, domain: ChartDomain, x, v) -> np.ndarray:
    """Remove the g-normal component of ``v`` at a boundary point."""
    v = np.asarray(v, dtype=float)
    nu = inward_normal_at(fields, domain, x)
    g = metric_at(fields, x)
    return v - (v @ g @ nu) * nu


def second_fundamental_form_at(fields: ScenarioFields, domain: ChartDomain, x, v) -> float:
    """Second fundamental form of the boundary evaluated on ``v``.

    Sign convention: the Euclidean unit disk gives ``|v|^2 > 0`` (inward
    normal, convex boundary positive).  ``v`` is projected onto the
    boundary tangent space before evaluation.
    """
    x = np.asarray(x, dtype=float)
    vt = tangent_project(fields, domain, x, v)
    grad = domain.drho(x)
    hess = domain.d2rho(x)
    gam = christoffel_at(fields, x)
    # covariant Hessian of rho on the tangent vector
    hess_cov = hess - np.einsum("kij,k->ij", gam, grad)
    ginv = inverse_metric(metric_at(fields, x))
    dual_norm = np.sqrt(grad @ ginv @ grad)
    if dual_norm < 1e-8:
        raise DegenerateBoundaryError(f"d rho vanishes near the boundary at {x}")
    return float(-(vt @ hess_cov @ vt) / dual_norm)


# ---------------------------------------------------------------------------
# boundary sampling (star-shaped domains, rays from the chart center)

def boundary_point(domain: ChartDomain, angles) -> np.ndarray:
    """Boundary point in the ray direction given by chart angles.

    2D: ``angles`` is a single angle theta.  3D: ``(theta, phi)`` with
    polar angle ``phi`` measured from the +z axis.
    """
    if domain.dim == 2:
        theta = float(np.atleast_1d(angles)[0])
        u = np.array([np.cos(theta), np.sin(theta)])
    else:
        theta, phi = np.atleast_1d(angles)[:2]
        u = np.array([np.cos(theta) * np.sin(phi),
                      np.sin(theta) * np.sin(phi),
                      np.cos(phi)])
    bbox = np.asarray(domain.bbox, dtype=float)
    r_hi = float(np.linalg.norm(bbox[1] - bbox[0]))
    if domain.rho(r_hi * u) >= 0:
        raise GeometryError("bounding box does not contain the boundary in this direction")
    r = brentq(lambda s: float(domain.rho(s * u)), 0.0, r_hi, xtol=1e-15, rtol=8.9e-16)
    return r * u


def boundary_samples(domain: ChartDomain, m: int) -> np.ndarray:
    """``m`` boundary points: uniform angles in 2D, Fibonacci sphere in 3D."""
    if domain.dim == 2:
        thetas = 2.0 * np.pi * np.arange(m) / m
        return np.stack([boundary_point(domain, t) for t in thetas])
    golden = np.pi * (3.0 - np.sqrt(5.0))
    pts = []
    for j in range(m):
        z = 1.0 - 2.0 * (j + 0.5) / m
        phi = np.arccos(z)
        theta = golden * j
        pts.append(boundary_point(domain, (theta, phi)))
    return np.stack(pts)


def boundary_frame(fields: ScenarioFields, domain: ChartDomain, x):
    """g-orthonormal frame ``(nu, tangents)`` at a boundary point.

    Euclidean-orthogonal complements of ``d rho`` are automatically
    g-orthogonal to the metric normal, so only g-normalization (and, in
    3D, one Gram-Schmidt step) is needed.
    """
    x = np.asarray(x, dtype=float)
    g = metric_at(fields, x)
    nu = inward_normal_at(fields, domain, x)
    grad = domain.drho(x)
    if domain.dim == 2:
        t = np.array([-grad[1], grad[0]])
        t = t / np.sqrt(t @ g @ t)
        return nu, [t]
    # two Euclidean complements of the gradient
    a = np.zeros(3)
    a[int(np.argmin(np.abs(grad)))] = 1.0
    t1 = np.cross(grad, a)
    t1 = t1 / np.sqrt(t1 @ g @ t1)
    t2 = np.cross(grad, t1)
    t2 = t2 - (t2 @ g @ t1) * t1
    t2 = t2 / np.sqrt(t2 @ g @ t2)
    return nu, [t1, t2]


def derivative_consistency(fields: ScenarioFields, points: Sequence[np.ndarray]) -> float:
    """Max abs deviation between analytic and finite-difference derivatives."""
    if not fields.analytic:
        raise ValueError("fields carry no analytic derivatives to compare")
    fd = fields.without_analytic()
    worst = 0.0
    for x in points:
        worst = max(worst, float(np.max(np.abs(fields.dmetric(x) - fd.dmetric(x)))))
        worst = max(worst, float(np.max(np.abs(fields.done_form(x) - fd.done_form(x)))))
        worst = max(worst, float(np.max(np.abs(fields.dpotential(x) - fd.dpotential(x)))))
    return worst
