"""Finite-difference parabolic solvers.

Space: second-order central differences in conservative (flux) form, the
diffusion tensor sampled at cell midpoints, so the interior operator is
symmetric and adjoint sweeps are exact transposes of the time stepping.
Time: implicit Euler ("be", default) or Crank-Nicolson ("cn").

The Propagator owns the per-level step matrices and their factorizations and
provides exact discrete adjoint accumulation, which the reconstruction
module uses for gradient iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .expr import BinOp, Const, Expression, Var, substitute
from .grid import (
    DOMAIN_Q,
    DOMAIN_SIGMA,
    BoundaryPortion,
    Field,
    GridError,
    ResolvedPortion,
    SpaceTimeGrid,
    norm,
    resolve_portion,
    zero_field,
)
from .model import DiffusionTensor, Nonlinearity, freeze_quotient, zero_order_source

SCHEMES = {"be": 1.0, "cn": 0.5}


class SolverError(RuntimeError):
    pass


class CompatibilityError(SolverError):
    """Initial and boundary data disagree on the boundary at t = 0."""


@dataclass
class SolveReport:
    solution: Field
    iterations: int = 1
    residual_history: list = dc_field(default_factory=list)
    converged: bool = True
    scheme: str = "be"
    warnings: list = dc_field(default_factory=list)


# ---------------------------------------------------------------------------
# Spatial operator assembly


def _midpoint_samples(grid: SpaceTimeGrid, gamma: DiffusionTensor | None, t: float):
    """Diffusion entries at cell midpoints (per axis) and nodes (cross terms)."""
    if gamma is None:
        gamma = DiffusionTensor.identity()
    out = {}
    if grid.dim == 1:
        x = grid.axis(0)
        xm = 0.5 * (x[:-1] + x[1:])
        out["g11_mid"] = np.broadcast_to(
            np.asarray(gamma.component(0, 0, xm, t=t), dtype=float), xm.shape
        )
        return out
    X, Y = grid.meshes()
    xm = 0.5 * (X[:-1, :] + X[1:, :])
    ym_x = 0.5 * (Y[:-1, :] + Y[1:, :])
    out["g11_midx"] = np.broadcast_to(
        np.asarray(gamma.component(0, 0, xm, ym_x, t), dtype=float), xm.shape
    )
    xm_y = 0.5 * (X[:, :-1] + X[:, 1:])
    ym = 0.5 * (Y[:, :-1] + Y[:, 1:])
    out["g22_midy"] = np.broadcast_to(
        np.asarray(gamma.component(1, 1, xm_y, ym, t), dtype=float), ym.shape
    )
    out["g12_node"] = np.broadcast_to(
        np.asarray(gamma.component(0, 1, X, Y, t), dtype=float), X.shape
    )
    return out


def assemble_operator(
    grid: SpaceTimeGrid,
    gamma: DiffusionTensor | None,
    q_level: np.ndarray | float | None,
    t: float,
    advection=None,
) -> sp.csr_matrix:
    """Sparse L with L u = -div(gamma grad u) + advection . grad u + q u on
    interior rows; boundary rows are left zero (Dirichlet handled by the
    stepper)."""
    n = grid.n_space
    samples = _midpoint_samples(grid, gamma, t)
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    if grid.dim == 1:
        nx = grid.nx[0]
        h = grid.h[0]
        gm = samples["g11_mid"]  # gm[i] at midpoint i+1/2
        a = float(advection[0]) if advection is not None else 0.0
        for i in range(1, nx - 1):
            gl, gr = gm[i - 1], gm[i]
            add(i, i - 1, -gl / h**2 - a / (2 * h))
            add(i, i, (gl + gr) / h**2)
            add(i, i + 1, -gr / h**2 + a / (2 * h))
    else:
        nx, ny = grid.nx
        hx, hy = grid.h
        g11 = samples["g11_midx"]   # (nx-1, ny) at (i+1/2, j)
        g22 = samples["g22_midy"]   # (nx, ny-1) at (i, j+1/2)
        g12 = samples["g12_node"]   # node values
        ax = float(advection[0]) if advection is not None else 0.0
        ay = float(advection[1]) if advection is not None else 0.0
        has_cross = bool(np.any(g12 != 0.0))

        def fi(i, j):
            return i * ny + j

        for i in range(1, nx - 1):
            for j in range(1, ny - 1):
                r = fi(i, j)
                gl, gr = g11[i - 1, j], g11[i, j]
                gb, gt = g22[i, j - 1], g22[i, j]
                add(r, fi(i - 1, j), -gl / hx**2 - ax / (2 * hx))
                add(r, fi(i + 1, j), -gr / hx**2 + ax / (2 * hx))
                add(r, fi(i, j - 1), -gb / hy**2 - ay / (2 * hy))
                add(r, fi(i, j + 1), -gt / hy**2 + ay / (2 * hy))
                add(r, r, (gl + gr) / hx**2 + (gb + gt) / hy**2)
                if has_cross:
                    # -d/dx(g12 du/dy) - d/dy(g12 du/dx), centered both ways
                    cxy = 1.0 / (4 * hx * hy)
                    for si in (-1, 1):
                        for sj in (-1, 1):
                            coeff = -si * sj * cxy * (g12[i + si, j] + g12[i, j + sj])
                            add(r, fi(i + si, j + sj), coeff)

    L = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    if q_level is not None:
        qv = np.asarray(q_level, dtype=float).reshape(-1) if not np.isscalar(q_level) else None
        diag = np.zeros(n)
        interior = np.ones(n, dtype=bool)
        interior[grid.boundary_flat_indices()] = False
        if qv is None:
            diag[interior] = float(q_level)
        else:
            diag[interior] = qv[interior]
        L = L + sp.diags(diag)
    return L.tocsr()


def _q_levels(grid: SpaceTimeGrid, q) -> tuple:
    """Returns (levels, time_dependent): levels is None (q absent), a scalar,
    or an (n_levels, n_space) array."""
    if q is None:
        return None, False
    if np.isscalar(q):
        return float(q), False
    if isinstance(q, Field):
        if q.domain != DOMAIN_Q:
            raise GridError("potential field must live on Q")
        arr = q.values.reshape(grid.n_levels, -1)
        td = any(not np.array_equal(arr[0], arr[k]) for k in range(1, grid.n_levels))
        return arr, td
    raise GridError("q must be None, a scalar, or a Q field")


class Propagator:
    """theta-scheme time stepper with cached LU factorizations and exact
    discrete adjoint sweeps."""

    def __init__(self, grid: SpaceTimeGrid, gamma=None, q=None, scheme="be", advection=None):
        if scheme not in SCHEMES:
            raise SolverError(f"unknown scheme {scheme!r}")
        self.grid = grid
        self.scheme = scheme
        self.theta = SCHEMES[scheme]
        self.gamma = gamma
        self.advection = advection
        self.q_levels, q_td = _q_levels(grid, q)
        gamma_td = gamma.time_dependent() if gamma is not None else False
        self.time_dependent = q_td or gamma_td
        self.boundary_idx = grid.boundary_flat_indices()
        self.interior_mask = np.ones(grid.n_space, dtype=bool)
        self.interior_mask[self.boundary_idx] = False
        self._build()

    def _q_at(self, level: int):
        if self.q_levels is None:
            return None
        if np.isscalar(self.q_levels):
            return self.q_levels
        return self.q_levels[level]

    def _L(self, level: int) -> sp.csr_matrix:
        return assemble_operator(
            self.grid, self.gamma, self._q_at(level), level * self.grid.dt, self.advection
        )

    def _build(self):
        g = self.grid
        n = g.n_space
        dt = g.dt
        theta = self.theta
        eye = sp.identity(n, format="csr")
        bd = self.boundary_idx

        def dirichletize_A(A):
            A = A.tolil()
            A[bd, :] = 0.0
            A[bd, bd] = 1.0
            return A.tocsc()

        def zero_rows_M(M):
            M = M.tolil()
            M[bd, :] = 0.0
            return M.tocsr()

        if not self.time_dependent:
            L = self._L(0)
            A = dirichletize_A(eye + dt * theta * L)
            M = zero_rows_M(eye - dt * (1 - theta) * L)
            lu = spla.splu(A)
            self.A_list = [A] * g.nt
            self.M_list = [M] * g.nt
            self.lu_list = [lu] * g.nt
            return
        Ls = [self._L(k) for k in range(g.n_levels)]
        self.A_list, self.M_list, self.lu_list = [], [], []
        for k in range(g.nt):
            A = dirichletize_A(eye + dt * theta * Ls[k + 1])
            M = zero_rows_M(eye - dt * (1 - theta) * Ls[k])
            self.A_list.append(A)
            self.M_list.append(M)
            self.lu_list.append(spla.splu(A))

    # -- forward sweep -------------------------------------------------------

    def _solve(self, lu, rhs):
        if np.iscomplexobj(rhs):
            both = lu.solve(np.column_stack([rhs.real, rhs.imag]))
            return both[:, 0] + 1j * both[:, 1]
        return lu.solve(rhs)

    def _solve_T(self, lu, rhs):
        if np.iscomplexobj(rhs):
            both = lu.solve(np.column_stack([rhs.real, rhs.imag]), trans="T")
            return both[:, 0] + 1j * both[:, 1]
        return lu.solve(rhs, trans="T")

    def run(self, g0=None, f=None, source=None) -> np.ndarray:
        """March the scheme; returns values shaped (n_levels, n_space).

        g0: initial values (n_space,) or space-shaped; f: boundary trace
        (n_levels, n_boundary) in boundary_flat_indices order; source: values
        (n_levels, n_space) added as +source on the right-hand side.
        """
        grid = self.grid
        n = grid.n_space
        dt = grid.dt
        theta = self.theta
        dtype = complex if (
            (source is not None and np.iscomplexobj(source))
            or (f is not None and np.iscomplexobj(f))
            or (g0 is not None and np.iscomplexobj(g0))
        ) else float
        u = np.zeros((grid.n_levels, n), dtype=dtype)
        if g0 is not None:
            u[0] = np.asarray(g0).reshape(-1)
        if f is not None:
            u[0, self.boundary_idx] = f[0]
        src = None if source is None else np.asarray(source).reshape(grid.n_levels, -1)
        for k in range(grid.nt):
            rhs = self.M_list[k] @ u[k]
            if src is not None:
                add = dt * (theta * src[k + 1] + (1 - theta) * src[k])
                rhs = rhs + np.where(self.interior_mask, add, 0.0)
            rhs[self.boundary_idx] = f[k + 1] if f is not None else 0.0
            u[k + 1] = self._solve(self.lu_list[k], rhs)
        return u

    # -- exact adjoint sweep ---------------------------------------------------

    def adjoint(self, cost_grad: np.ndarray, want_f_grad=False):
        """Exact transpose of the forward sweep.

        cost_grad: per-level dJ/du arrays, shape (n_levels, n_space).  Returns
        (grad_g, grad_f) where grad_g is dJ/d(initial values) restricted to
        interior nodes (boundary entries zeroed) and grad_f (optional) is
        dJ/d(boundary trace) shaped (n_levels, n_boundary); its level-0 row is
        zero because u(0) on the boundary belongs to the initial data.
        """
        grid = self.grid
        c = np.asarray(cost_grad).reshape(grid.n_levels, -1)
        lam = c[grid.nt].astype(c.dtype, copy=True)
        grad_f = (
            np.zeros((grid.n_levels, len(self.boundary_idx)), dtype=c.dtype)
            if want_f_grad
            else None
        )
        for k in range(grid.nt - 1, -1, -1):
            y = self._solve_T(self.lu_list[k], lam)
            if want_f_grad:
                grad_f[k + 1] = y[self.boundary_idx]
            lam = c[k] + self.M_list[k].T @ y
        grad_g = lam
        grad_g = np.where(self.interior_mask, grad_g, 0.0)
        return grad_g, grad_f


# ---------------------------------------------------------------------------
# Boundary traces and compatibility


def boundary_trace(grid: SpaceTimeGrid, fn=None, portion=None) -> Field:
    """Sigma field on the full boundary (or a portion): fn(x[, y], t)."""
    portion = portion if portion is not None else resolve_portion(grid, BoundaryPortion.full())
    if fn is None:
        return zero_field(grid, DOMAIN_SIGMA, portion)
    coords = portion.coords()
    args = [coords[:, i] for i in range(grid.dim)]
    rows = []
    for t in grid.times():
        rows.append(np.broadcast_to(np.asarray(fn(*args, t)), (portion.n_nodes,)).copy())
    return Field(grid, np.array(rows), DOMAIN_SIGMA, portion)


def _full_trace_values(grid: SpaceTimeGrid, f, full_portion: ResolvedPortion):
    """Boundary values ordered by boundary_flat_indices for every level."""
    bd = grid.boundary_flat_indices()
    if f is None:
        return None
    if isinstance(f, Field):
        if f.domain != DOMAIN_SIGMA:
            raise GridError("boundary data must be a Sigma field")
        # scatter the portion trace onto the full boundary ordering, zero off
        # the portion; corners visited by two faces are averaged
        pos = {flat: i for i, flat in enumerate(bd)}
        acc = np.zeros((grid.n_levels, len(bd)), dtype=f.values.dtype)
        cnt = np.zeros(len(bd))
        for col, flat in enumerate(f.portion.flat):
            i = pos[int(flat)]
            acc[:, i] += f.values[:, col]
            cnt[i] += 1
        nonzero = cnt > 0
        acc[:, nonzero] /= cnt[nonzero]
        return acc
    arr = np.asarray(f)
    if arr.shape != (grid.n_levels, len(bd)):
        raise GridError("trace array must be (n_levels, n_boundary_nodes)")
    return arr


def check_compatibility(grid, g, f_values, tol=1e-9) -> None:
    """Discrete compatibility g|_Gamma = f(., 0)."""
    bd = grid.boundary_flat_indices()
    gb = np.zeros(len(bd)) if g is None else np.asarray(g.values).reshape(-1)[bd]
    fb = np.zeros(len(bd)) if f_values is None else f_values[0]
    gap = float(np.max(np.abs(gb - fb))) if len(bd) else 0.0
    if gap > tol:
        raise CompatibilityError(f"g|Gamma vs f(.,0) mismatch {gap:.3g} exceeds {tol:.3g}")


# ---------------------------------------------------------------------------
# Linear / semilinear / backward solves


def solve_linear(
    grid: SpaceTimeGrid,
    gamma: DiffusionTensor | None = None,
    q=None,
    f=None,
    g: Field | None = None,
    source: Field | None = None,
    scheme: str = "be",
    compat_tol: float = 1e-9,
    propagator: Propagator | None = None,
) -> SolveReport:
    """u_t - div(gamma grad u) + q u = source, u|Sigma = f, u(0) = g."""
    full = resolve_portion(grid, BoundaryPortion.full())
    f_vals = _full_trace_values(grid, f, full)
    check_compatibility(grid, g, f_vals, compat_tol)
    prop = propagator if propagator is not None else Propagator(grid, gamma, q, scheme)
    src = source.values if isinstance(source, Field) else source
    vals = prop.run(
        g0=None if g is None else g.values.reshape(-1),
        f=f_vals,
        source=src,
    )
    if not np.all(np.isfinite(vals if not np.iscomplexobj(vals) else vals.view(float))):
        raise SolverError("linear solve produced non-finite values")
    sol = Field(grid, vals.reshape(grid.n_levels, *grid.nx), DOMAIN_Q)
    return SolveReport(sol, iterations=1, converged=True, scheme=scheme)


def solve_semilinear(
    grid: SpaceTimeGrid,
    gamma: DiffusionTensor | None,
    nl: Nonlinearity,
    f=None,
    g: Field | None = None,
    strategy: str = "picard",
    scheme: str = "be",
    tol: float = 1e-10,
    max_iter: int = 200,
    smallness_gate: float = 1.0,
    compat_tol: float = 1e-9,
) -> SolveReport:
    """u_t - div(gamma grad u) + nl(x,t,u) = 0 by frozen-potential Picard
    iteration (default) or per-step Newton."""
    from .model import CLASS_ANALYTIC

    full = resolve_portion(grid, BoundaryPortion.full())
    f_vals = _full_trace_values(grid, f, full)
    check_compatibility(grid, g, f_vals, compat_tol)

    warnings = []
    if nl.tag == CLASS_ANALYTIC:
        size = 0.0
        if g is not None:
            size += norm(g, "L2Omega")
        if isinstance(f, Field):
            size += norm(f, "L2Sigma")
        if size > smallness_gate:
            warnings.append(
                f"data size {size:.3g} exceeds the smallness gate {smallness_gate:.3g}; "
                "well-posedness not asserted"
            )

    base_src = zero_order_source(nl, grid)
    src0 = None if base_src is None else -base_src.values

    if strategy == "picard":
        return _picard(grid, gamma, nl, f_vals, g, src0, scheme, tol, max_iter, warnings)
    if strategy == "newton":
        return _newton(grid, gamma, nl, f_vals, g, src0, scheme, tol, max_iter, warnings)
    raise SolverError(f"unknown strategy {strategy!r}")


def _picard(grid, gamma, nl, f_vals, g, src0, scheme, tol, max_iter, warnings):
    z = zero_field(grid)
    if g is not None:
        z.values[:] = np.broadcast_to(g.values, (grid.n_levels, *grid.nx))
    history = []
    prev_update = np.inf
    u_field = z
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        q_z = freeze_quotient(nl, z)
        prop = Propagator(grid, gamma, q_z, scheme)
        vals = prop.run(
            g0=None if g is None else g.values.reshape(-1), f=f_vals, source=src0
        )
        if not np.all(np.isfinite(vals)):
            raise SolverError(f"picard iterate {it} produced non-finite values (possible blow-up)")
        u_field = Field(grid, vals.reshape(grid.n_levels, *grid.nx), DOMAIN_Q)
        diff = u_field - z
        update = norm(diff, "L2Q")
        scale = max(1.0, norm(u_field, "L2Q"))
        history.append(update / scale)
        if update / scale < tol:
            z = u_field
            converged = True
            break
        if update > prev_update:
            # damp when the undamped update grows
            z = Field(grid, z.values + 0.5 * diff.values, DOMAIN_Q)
        else:
            z = u_field
        prev_update = update
    if not converged:
        warnings.append("picard did not converge; returning last iterate")
    return SolveReport(z if converged else u_field, it, history, converged, scheme, warnings)


def _newton(grid, gamma, nl, f_vals, g, src0, scheme, tol, max_iter, warnings):
    theta = SCHEMES[scheme]
    n = grid.n_space
    dt = grid.dt
    bd = grid.boundary_flat_indices()
    interior = np.ones(n, dtype=bool)
    interior[bd] = False
    meshes = grid.meshes()
    xs = meshes[0].reshape(-1)
    ys = meshes[1].reshape(-1) if grid.dim == 2 else 0.0

    eye = sp.identity(n, format="csr")
    gamma_td = gamma.time_dependent() if gamma is not None else False
    L0_cache = {}

    def L0(level):
        if not gamma_td:
            level = 0
        if level not in L0_cache:
            L0_cache[level] = assemble_operator(grid, gamma, None, level * grid.dt)
        return L0_cache[level]

    def b_of(level, uvec):
        t = level * grid.dt
        out = np.broadcast_to(np.asarray(nl(xs, t, uvec, y=ys, k=0), dtype=float), (n,)).copy()
        out[~interior] = 0.0
        return out

    def bu_of(level, uvec):
        t = level * grid.dt
        out = np.broadcast_to(np.asarray(nl(xs, t, uvec, y=ys, k=1), dtype=float), (n,)).copy()
        out[~interior] = 0.0
        return out

    u = np.zeros((grid.n_levels, n))
    if g is not None:
        u[0] = g.values.reshape(-1)
    if f_vals is not None:
        u[0, bd] = f_vals[0]
    total_newton = 0
    history = []
    for k in range(grid.nt):
        rhs_expl = u[k] - dt * (1 - theta) * (L0(k) @ u[k] + b_of(k, u[k]))
        if src0 is not None:
            s = src0.reshape(grid.n_levels, -1)
            rhs_expl = rhs_expl + dt * np.where(interior, theta * s[k + 1] + (1 - theta) * s[k], 0.0)
        v = u[k].copy()
        fb = f_vals[k + 1] if f_vals is not None else 0.0
        A_lin = eye + dt * theta * L0(k + 1)
        for newton_it in range(30):
            res = v + dt * theta * ((L0(k + 1) @ v) + b_of(k + 1, v)) - rhs_expl
            res[bd] = v[bd] - fb
            J = (A_lin + sp.diags(np.where(interior, dt * theta * bu_of(k + 1, v), 0.0))).tolil()
            J[bd, :] = 0.0
            J[bd, bd] = 1.0
            delta = spla.spsolve(J.tocsc(), res)
            v = v - delta
            total_newton += 1
            if np.max(np.abs(delta)) <= tol * max(1.0, np.max(np.abs(v))):
                break
        else:
            warnings.append(f"newton stalled at time level {k + 1}")
        if not np.all(np.isfinite(v)):
            raise SolverError(f"newton produced non-finite values at time level {k + 1}")
        u[k + 1] = v
        history.append(float(np.max(np.abs(v))))
    sol = Field(grid, u.reshape(grid.n_levels, *grid.nx), DOMAIN_Q)
    return SolveReport(sol, total_newton, history, True, scheme, warnings)


def time_reversed_gamma(gamma: DiffusionTensor | None, T: float) -> DiffusionTensor | None:
    if gamma is None or not gamma.time_dependent():
        return gamma
    entries = []
    for e in gamma.entries:
        root = substitute(e.root, "t", BinOp(0, "-", Const(0, T), Var(0, "t")))
        entries.append(Expression(f"({e.source}) at T-t", root))
    return DiffusionTensor(tuple(entries), gamma.rho0)


def solve_backward(
    grid: SpaceTimeGrid,
    gamma: DiffusionTensor | None = None,
    q=None,
    terminal: Field | None = None,
    f=None,
    source: Field | None = None,
    scheme: str = "be",
) -> SolveReport:
    """-v_t - div(gamma grad v) + q v = source, v(T) = terminal, v|Sigma = f,
    solved by the substitution s = T - t through the forward scheme."""
    q_rev = q
    if isinstance(q, Field):
        q_rev = Field(grid, q.values[::-1].copy(), DOMAIN_Q)
    f_rev = f
    if isinstance(f, Field):
        f_rev = Field(grid, f.values[::-1].copy(), DOMAIN_SIGMA, f.portion)
    src_rev = source
    if isinstance(source, Field):
        src_rev = Field(grid, source.values[::-1].copy(), DOMAIN_Q)
    rep = solve_linear(
        grid,
        time_reversed_gamma(gamma, grid.T),
        q_rev,
        f_rev,
        terminal,
        src_rev,
        scheme=scheme,
    )
    rep.solution = Field(grid, rep.solution.values[::-1].copy(), DOMAIN_Q)
    return rep


def restrict_to_subinterval(grid: SpaceTimeGrid, level: int) -> SpaceTimeGrid:
    """Grid covering [t_level, T] with the same spatial layout and step."""
    nt_rest = grid.nt - level
    if nt_rest < 2:
        raise GridError("need at least 2 remaining steps")
    return SpaceTimeGrid(grid.dim, grid.lower, grid.upper, grid.nx, nt_rest, nt_rest * grid.dt)
