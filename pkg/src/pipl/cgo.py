"""Complex geometrical optics solutions in carrier-factored form.

A forward probe is u = psi_minus * (theta_plus + z) with carrier
psi_minus = exp(rho w.x + rho^2 t) and oscillatory profile
theta_plus = (1 - exp(-rho^(3/4) t)) exp(-i(x,t).(xi,tau)), xi.w = 0.
Substituting u into (d_t - Lap + q)u = 0 cancels every carrier factor and
leaves the profile equation

    z_t - Lap z - 2 rho w.grad z + q z = -[phi' + (|xi|^2 - i tau + q) phi] E,

solved with zero initial and lateral data (the partial-data variant pins the
profile to zero on the designated aperture portion instead).  Backward
probes carry psi_plus = 1/psi_minus and theta_minus = 1 - exp(-rho^(3/4)(T-t)).
Carriers are never materialized; products of a matched forward/backward pair
cancel them exactly, which is the only way the pipeline ever uses them.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .forward import Propagator
from .grid import (
    DOMAIN_Q,
    BoundaryPortion,
    Field,
    GridError,
    SpaceTimeGrid,
    l2q_inner,
    norm,
    resolve_portion,
)

OVERFLOW_LIMIT = np.exp(50.0)
RESOLUTION_LIMIT = 0.5   # warn when rho^(3/4) * dt exceeds this


class CGOError(ValueError):
    pass


@dataclass(frozen=True)
class CGOParameters:
    rho: float
    omega: tuple
    xi: tuple
    tau: float
    direction: str = "forward"
    aperture: float = 0.0

    def __post_init__(self):
        if self.rho <= 0:
            raise CGOError("carrier strength rho must be positive")
        if self.direction not in ("forward", "backward"):
            raise CGOError("direction must be forward or backward")
        w = np.asarray(self.omega, dtype=float)
        if abs(np.linalg.norm(w) - 1.0) > 1e-12:
            raise CGOError("omega must be a unit vector")
        xi = np.asarray(self.xi, dtype=float)
        if len(xi) != len(w):
            raise CGOError("xi and omega must have equal length")
        if abs(float(np.dot(xi, w))) > 1e-10 * max(1.0, float(np.linalg.norm(xi))):
            raise CGOError("xi must be orthogonal to omega")
        if self.aperture < 0:
            raise CGOError("aperture must be >= 0")

    @classmethod
    def make(cls, rho, omega, xi=None, tau=0.0, direction="forward", aperture=0.0):
        omega = tuple(float(v) for v in np.atleast_1d(omega))
        xi = tuple(0.0 for _ in omega) if xi is None else tuple(float(v) for v in np.atleast_1d(xi))
        return cls(float(rho), omega, xi, float(tau), direction, float(aperture))

    def matched_backward(self) -> "CGOParameters":
        zero = tuple(0.0 for _ in self.omega)
        return CGOParameters(self.rho, self.omega, zero, 0.0, "backward", self.aperture)


def ramp(params: CGOParameters, t):
    """Boundary-layer ramp 1 - exp(-rho^(3/4) s) with s = t (forward) or
    T - t handled by the caller."""
    return 1.0 - np.exp(-params.rho**0.75 * t)


def phase(params: CGOParameters, grid: SpaceTimeGrid, t):
    """exp(-i (xi.x + tau t)) sampled over the space slice."""
    meshes = grid.meshes()
    s = params.xi[0] * meshes[0]
    if grid.dim == 2:
        s = s + params.xi[1] * meshes[1]
    return np.exp(-1j * (s + params.tau * t))


def theta_field(grid: SpaceTimeGrid, params: CGOParameters) -> Field:
    """Oscillatory profile theta: vanishes at t=0 (forward) or t=T (backward)."""
    levels = []
    for t in grid.times():
        if params.direction == "forward":
            levels.append(ramp(params, t) * phase(params, grid, t))
        else:
            levels.append(ramp(params, grid.T - t) * np.ones(grid.nx))
    vals = np.array(levels)
    if params.direction == "backward":
        vals = vals.astype(float)
    return Field(grid, vals, DOMAIN_Q)


def carrier_residual(params: CGOParameters) -> float:
    """Normalized heat residual of the bare carrier: substituting
    psi = exp(+-(rho w.x + rho^2 t)) into d_t - Lap gives
    rho^2 (1 - |w|^2) psi, identically zero for unit w."""
    w = np.asarray(params.omega)
    return abs(params.rho**2 * (1.0 - float(np.dot(w, w))))


@dataclass
class CGOSolution:
    params: CGOParameters
    grid: SpaceTimeGrid
    z: Field                           # remainder profile on Q
    remainder_norm: float
    boundary_condition: dict
    warnings: list = dc_field(default_factory=list)
    residual: float = 0.0              # discrete-system residual of the z solve

    def theta(self) -> Field:
        return theta_field(self.grid, self.params)

    def profile(self) -> Field:
        th = self.theta()
        return Field(self.grid, th.values + self.z.values, DOMAIN_Q)

    def report(self) -> dict:
        return {
            "rho": self.params.rho,
            "omega": list(self.params.omega),
            "xi": list(self.params.xi),
            "tau": self.params.tau,
            "direction": self.params.direction,
            "remainder_norm": self.remainder_norm,
            "residual": self.residual,
            "warnings": list(self.warnings),
            "boundary_condition": self.boundary_condition,
        }


def _q_level_arrays(grid: SpaceTimeGrid, q) -> np.ndarray:
    if q is None:
        return np.zeros((grid.n_levels, *grid.nx))
    if np.isscalar(q):
        return np.full((grid.n_levels, *grid.nx), float(q))
    if isinstance(q, Field) and q.domain == DOMAIN_Q:
        return q.values
    raise GridError("q must be None, a scalar, or a Q field")


class CGOFactory:
    """Builds CGO remainders against a fixed potential, caching the stepper
    per (rho, omega, direction) since the profile operator is independent of
    (xi, tau)."""

    def __init__(self, grid: SpaceTimeGrid, q=None, scheme: str = "be", partial: bool = False):
        self.grid = grid
        self.q = q
        self.q_levels = _q_level_arrays(grid, q)
        self.scheme = scheme
        self.partial = partial
        self._props: dict = {}
        self._backward_cache: dict = {}

    def _propagator(self, params: CGOParameters) -> Propagator:
        key = (params.rho, params.omega, params.direction)
        if key not in self._props:
            sign = -2.0 if params.direction == "forward" else +2.0
            advection = tuple(sign * params.rho * w for w in params.omega)
            if params.direction == "forward":
                qf = self.q
            else:
                qf = Field(self.grid, self.q_levels[::-1].copy(), DOMAIN_Q)
            self._props[key] = Propagator(self.grid, None, qf, self.scheme, advection)
        return self._props[key]

    def _portion_trace(self, params: CGOParameters, theta_vals: np.ndarray):
        """Lateral data for z: zero everywhere (full variant) or -theta on the
        designated aperture portion extended by zero (partial variant)."""
        grid = self.grid
        bd = grid.boundary_flat_indices()
        if not self.partial:
            return None, {"variant": "full", "portion": "all faces, homogeneous"}
        sign = -1 if params.direction == "forward" else +1
        portion = resolve_portion(
            grid, BoundaryPortion.directional(params.omega, params.aperture, sign)
        )
        pos = {int(flat): i for i, flat in enumerate(bd)}
        trace = np.zeros((grid.n_levels, len(bd)), dtype=theta_vals.dtype)
        flatvals = theta_vals.reshape(grid.n_levels, -1)
        for flat in set(portion.flat.tolist()):
            trace[:, pos[flat]] = -flatvals[:, flat]
        name = "Gamma_-" if params.direction == "forward" else "Gamma_+"
        return trace, {
            "variant": "partial",
            "portion": f"{name} (aperture {params.aperture}), profile pinned to -theta there",
        }

    def build(self, params: CGOParameters) -> CGOSolution:
        grid = self.grid
        warnings = []
        layer = params.rho**0.75 * grid.dt
        if layer > RESOLUTION_LIMIT:
            warnings.append(
                f"boundary layer under-resolved: rho^(3/4)*dt = {layer:.3g} > {RESOLUTION_LIMIT}"
            )
        theta = theta_field(grid, params)
        src = self._source(params)
        trace, bc = self._portion_trace(params, theta.values)
        prop = self._propagator(params)
        if params.direction == "forward":
            zvals = prop.run(f=trace, source=src)
        else:
            # time-reversed solve: s = T - t turns the backward profile
            # equation into the forward scheme with advection +2 rho w
            src_rev = src[::-1].copy()
            trace_rev = None if trace is None else trace[::-1].copy()
            zvals = prop.run(f=trace_rev, source=src_rev)[::-1]
        residual = self._discrete_residual(prop, params, zvals, src, trace)
        zf = Field(grid, zvals.reshape(grid.n_levels, *grid.nx), DOMAIN_Q)
        peak = float(np.max(np.abs(zf.values)))
        if peak > OVERFLOW_LIMIT:
            raise CGOError("materialized profile exceeded the overflow guard")
        return CGOSolution(params, grid, zf, norm(zf, "L2Q"), bc, warnings, residual)

    def _source(self, params: CGOParameters) -> np.ndarray:
        grid = self.grid
        rho34 = params.rho**0.75
        xi2 = float(np.dot(params.xi, params.xi))
        levels = []
        for k, t in enumerate(grid.times()):
            qk = self.q_levels[k]
            if params.direction == "forward":
                phi = ramp(params, t)
                dphi = rho34 * np.exp(-rho34 * t)
                E = phase(params, grid, t)
                levels.append(-(dphi + (xi2 - 1j * params.tau + qk) * phi) * E)
            else:
                phi = ramp(params, grid.T - t)
                dphi = rho34 * np.exp(-rho34 * (grid.T - t))
                levels.append(-(dphi + qk * phi) * np.ones(grid.nx))
        return np.array(levels).reshape(grid.n_levels, -1)

    def _discrete_residual(self, prop, params, zvals, src, trace) -> float:
        """Consistency of the linear algebra: max residual of the stepped
        systems, normalized by the source scale."""
        grid = self.grid
        if params.direction == "backward":
            zvals = zvals[::-1]
            src = src[::-1]
            trace = None if trace is None else trace[::-1]
        z = zvals.reshape(grid.n_levels, -1)
        worst = 0.0
        theta_w = prop.theta
        scale = max(1.0, float(np.max(np.abs(src))))
        for k in range(grid.nt):
            rhs = prop.M_list[k] @ z[k]
            add = grid.dt * (theta_w * src[k + 1] + (1 - theta_w) * src[k])
            rhs = rhs + np.where(prop.interior_mask, add, 0.0)
            rhs[prop.boundary_idx] = trace[k + 1] if trace is not None else 0.0
            worst = max(worst, float(np.max(np.abs(prop.A_list[k] @ z[k + 1] - rhs))))
        return worst / scale


def build(grid: SpaceTimeGrid, q, params: CGOParameters, scheme="be", partial=False) -> CGOSolution:
    """One-off CGO construction; sweeps should use CGOFactory for caching."""
    return CGOFactory(grid, q, scheme, partial).build(params)


def product_symbol(fwd: CGOParameters, bwd: CGOParameters, grid: SpaceTimeGrid) -> Field:
    """Leading profile product phi_rho(t) exp(-i(x,t).(xi,tau)) of a matched
    pair; the carrier product is identically one."""
    if fwd.direction != "forward" or bwd.direction != "backward":
        raise CGOError("need a (forward, backward) pair")
    if fwd.rho != bwd.rho or fwd.omega != bwd.omega:
        raise CGOError("pair must share rho and omega")
    rho34 = fwd.rho**0.75
    levels = []
    for t in grid.times():
        phi = (
            1.0
            - np.exp(-rho34 * t)
            - np.exp(-rho34 * (grid.T - t))
            + np.exp(-rho34 * grid.T)
        )
        levels.append(phi * phase(fwd, grid, t))
    return Field(grid, np.array(levels), DOMAIN_Q)


def pairing(f: Field, sol_fwd: CGOSolution, sol_bwd: CGOSolution):
    """Integral of f times the carrier-cancelled product of a matched pair.

    Returns (value, leading) where value uses the full profiles
    (theta+z)_+ (theta+z)_- and leading is the phi_rho E term alone.
    """
    if f.domain != DOMAIN_Q:
        raise GridError("pairing expects f on Q")
    if sol_fwd.params.direction != "forward" or sol_bwd.params.direction != "backward":
        raise CGOError("need a (forward, backward) pair")
    if sol_fwd.params.rho != sol_bwd.params.rho or sol_fwd.params.omega != sol_bwd.params.omega:
        raise CGOError("pair must share rho and omega")
    prod = Field(f.grid, sol_fwd.profile().values * sol_bwd.profile().values, DOMAIN_Q)
    value = l2q_inner(f, prod)
    leading = l2q_inner(f, product_symbol(sol_fwd.params, sol_bwd.params, f.grid))
    return complex(value), complex(leading)


def fourier_integral(f: Field, xi, tau) -> complex:
    """Direct trapezoidal quadrature of integral f exp(-i(x,t).(xi,tau)),
    the oracle the pairing converges to as rho grows."""
    grid = f.grid
    meshes = grid.meshes()
    s = xi[0] * meshes[0]
    if grid.dim == 2:
        s = s + xi[1] * meshes[1]
    w = grid.space_weights().reshape(-1)
    tw = grid.time_weights()
    total = 0.0 + 0.0j
    for k, t in enumerate(grid.times()):
        E = np.exp(-1j * (s + tau * t))
        total += tw[k] * np.sum((f.values[k] * E).reshape(-1) * w)
    return complex(total)
