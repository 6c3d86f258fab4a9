"""Potential and Taylor-coefficient recovery from boundary functionals.

Twin experiments: a truth model generates boundary data, a reference model
is available to the reconstructor.  All probe algebra is done on CGO
profiles (carriers cancelled), so the boundary functional

    integral_Sigma  w_bwd  d_nu(W_truth - W_ref)  dS dt
      = - integral_Q (q_ref - q_truth) W_truth w_bwd dx dt

is evaluated without ever materializing an exponential carrier.  The
functional approximates a phi_rho-weighted Fourier sample of the
coefficient difference, which the FourierSampleSet synthesis inverts.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from ..cgo import CGOFactory, CGOParameters
from ..dnmap import normal_derivative_matrix
from ..forward import Propagator, solve_linear
from ..grid import (
    DOMAIN_Q,
    DOMAIN_SIGMA,
    BoundaryPortion,
    Field,
    GridError,
    ResolvedPortion,
    SpaceTimeGrid,
    norm,
    resolve_portion,
)
from ..model import Nonlinearity
from .fourier import FourierSample, FourierSampleSet, frequency_lattice


@dataclass
class ReconstructionResult:
    recovered: Field
    residuals: dict = dc_field(default_factory=dict)
    regularization: dict = dc_field(default_factory=dict)
    truth_error: float | None = None
    notes: list = dc_field(default_factory=list)
    samples: FourierSampleSet | None = None

    def compare_truth(self, truth: Field) -> float:
        space = "L2Q" if truth.domain == DOMAIN_Q else "L2Omega"
        denom = norm(truth, space)
        err = norm(self.recovered - truth, space) / (denom if denom > 0 else 1.0)
        self.truth_error = err
        return err


def _q_field(grid, q):
    if q is None:
        return Field(grid, np.zeros((grid.n_levels, *grid.nx)), DOMAIN_Q)
    if np.isscalar(q):
        return Field(grid, np.full((grid.n_levels, *grid.nx), float(q)), DOMAIN_Q)
    return q


def _minus_portion(grid, omega, aperture) -> ResolvedPortion:
    """Observation faces for partial data: everything whose outward normal
    does not point into the omega aperture (nu.omega <= aperture)."""
    plus = resolve_portion(grid, BoundaryPortion.directional(omega, aperture, +1))
    plus_faces = set(plus.faces)
    rest = [f for f in grid.faces() if f not in plus_faces]
    from ..grid import FACE_NAMES

    return resolve_portion(grid, BoundaryPortion.named(*[FACE_NAMES[f] for f in rest]))


@dataclass
class PotentialProbe:
    """One synthesized measurement: the profile-form DN difference for a
    matched CGO probe pair against the reference model."""

    params: CGOParameters
    dn_difference: np.ndarray          # (n_levels, n_portion_nodes), complex
    portion: ResolvedPortion
    remainder_fwd: float
    remainder_bwd: float
    warnings: tuple = ()
    volume_functional: complex | None = None   # truth-side diagnostic
    order: int = 1


def _sigma_integral(grid, portion, a_vals, b_vals) -> complex:
    per_level = ((a_vals * b_vals) @ portion.weights).astype(complex)
    return complex(np.dot(grid.time_weights(), per_level))


def synthesize_potential_probes(
    grid: SpaceTimeGrid,
    q_truth,
    q_ref,
    lattice=None,
    rho: float = 32.0,
    omegas=None,
    scheme: str = "be",
    mode: str = "full",
    aperture: float = 0.0,
    n_xi: int = 4,
    n_tau: int = 4,
    keep_diagnostics: bool = False,
):
    """Twin-experiment data generation for potential recovery.

    For each lattice point, builds the reference forward CGO profile W_ref,
    solves the truth-model difference profile d (zero data, source
    (q_ref - q_truth) W_ref), and records the profile DN trace of d on the
    observation portion.
    """
    q_truth = _q_field(grid, q_truth)
    q_ref = _q_field(grid, q_ref)
    if omegas is None:
        omegas = [(1.0,)] if grid.dim == 1 else [(1.0, 0.0), (0.0, 1.0)]
    partial = mode == "partial"
    factory = CGOFactory(grid, q_ref, scheme, partial=partial)
    probes = []
    dq_vals = q_ref.values - q_truth.values
    for omega in omegas:
        pairs = lattice if lattice is not None else frequency_lattice(grid, omega, n_xi, n_tau)
        portion = (
            _minus_portion(grid, omega, aperture)
            if partial
            else resolve_portion(grid, BoundaryPortion.full())
        )
        B = normal_derivative_matrix(grid, portion)
        adv = tuple(-2.0 * rho * w for w in omega)
        prop_truth = Propagator(grid, None, q_truth, scheme, adv)
        bwd = factory.build(CGOParameters.make(rho, omega, direction="backward", aperture=aperture))
        for xi, tau in pairs:
            fwd = factory.build(
                CGOParameters.make(rho, omega, xi=xi, tau=tau, aperture=aperture)
            )
            w_ref = fwd.profile()
            src = (dq_vals * w_ref.values).reshape(grid.n_levels, -1)
            d = prop_truth.run(source=src)
            dn_diff = (B @ d.T).T
            vol = None
            if keep_diagnostics:
                # volume side of the identity: integral (q_ref - q_truth)
                # W_truth w_bwd over Q, which must equal -boundary functional
                w_truth = Field(grid, (w_ref.values.reshape(grid.n_levels, -1) + d).reshape(
                    grid.n_levels, *grid.nx), DOMAIN_Q)
                w_bwd = bwd.profile()
                from ..grid import l2q_inner

                vol = l2q_inner(
                    Field(grid, dq_vals * w_bwd.values, DOMAIN_Q), w_truth
                )
            probes.append(
                PotentialProbe(
                    fwd.params,
                    dn_diff,
                    portion,
                    fwd.remainder_norm,
                    bwd.remainder_norm,
                    tuple(fwd.warnings),
                    vol,
                )
            )
    return probes


def _phi_rho(rho, T):
    rho34 = rho**0.75

    def w(_rho, t):
        return 1.0 - np.exp(-rho34 * t) - np.exp(-rho34 * (T - t)) + np.exp(-rho34 * T)

    return w


def assemble_samples(
    grid: SpaceTimeGrid, probes, q_ref, scheme="be", mode="full"
) -> FourierSampleSet:
    """Boundary functionals -> Fourier samples of (q_ref - q_truth)."""
    q_ref = _q_field(grid, q_ref)
    partial = mode == "partial"
    factory = CGOFactory(grid, q_ref, scheme, partial=partial)
    sset = FourierSampleSet(grid)
    for p in probes:
        bwd = factory.build(
            CGOParameters.make(
                p.params.rho, p.params.omega, direction="backward", aperture=p.params.aperture
            )
        )
        w_bwd = bwd.profile().values.reshape(grid.n_levels, -1)[:, p.portion.flat]
        boundary = _sigma_integral(grid, p.portion, w_bwd, p.dn_difference)
        # identity: integral_Q (q_ref-q_truth) W_truth w_bwd = -boundary
        value = -boundary
        sset.add(
            FourierSample(
                p.params.omega,
                p.params.xi,
                p.params.tau,
                value,
                p.params.rho,
                p.remainder_fwd,
                bwd.remainder_norm,
                p.warnings,
            )
        )
    return sset


def recover_potential(
    grid: SpaceTimeGrid,
    probes,
    q_ref,
    scheme: str = "be",
    mode: str = "full",
    alpha: float = 1e-6,
    truth_difference: Field | None = None,
) -> ReconstructionResult:
    """Recover q_ref - q_truth from profile DN differences by CGO pairing and
    regularized Fourier synthesis."""
    sset = assemble_samples(grid, probes, q_ref, scheme, mode)
    big_remainder = max((max(s.remainder_fwd, s.remainder_bwd) for s in sset.samples), default=0.0)
    notes = []
    if big_remainder > 0.5:
        notes.append(f"large CGO remainder diagnostics (max {big_remainder:.3g})")
    defect = sset.conjugate_symmetry_defect()
    recovered = sset.synthesize(alpha=alpha, ramp=_phi_rho(probes[0].params.rho, grid.T))
    result = ReconstructionResult(
        recovered,
        residuals={"conjugate_symmetry_defect": defect},
        regularization={"method": "tikhonov-fourier-synthesis", "alpha": alpha,
                        "modes": len(sset.samples)},
        notes=notes,
        samples=sset,
    )
    if truth_difference is not None:
        result.compare_truth(truth_difference)
    return result


def reciprocity_report(grid: SpaceTimeGrid, probes, q_ref, scheme="be", mode="full") -> dict:
    """Relative gap between the volume functional (truth-side diagnostic) and
    the boundary functional, per probe.  Needs probes synthesized with
    keep_diagnostics=True."""
    q_ref = _q_field(grid, q_ref)
    factory = CGOFactory(grid, q_ref, scheme, partial=(mode == "partial"))
    gaps = []
    for p in probes:
        if p.volume_functional is None:
            raise GridError("probe lacks the volume diagnostic")
        bwd = factory.build(
            CGOParameters.make(
                p.params.rho, p.params.omega, direction="backward", aperture=p.params.aperture
            )
        )
        w_bwd = bwd.profile().values.reshape(grid.n_levels, -1)[:, p.portion.flat]
        boundary = _sigma_integral(grid, p.portion, w_bwd, p.dn_difference)
        vol = p.volume_functional
        scale = max(abs(vol), abs(boundary))
        gaps.append(abs(vol - (-boundary)) / scale if scale > 0 else 0.0)
    return {"per_probe": gaps, "max": max(gaps) if gaps else 0.0}


# ---------------------------------------------------------------------------
# Positive auxiliary solutions


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s**3 * (10.0 - 15.0 * s + 6.0 * s**2)


def positive_solution(
    grid: SpaceTimeGrid,
    gamma,
    q,
    portion=None,
    shape_fn=None,
    scheme: str = "be",
    ramp_power: int = 2,
    ramp_time: float | None = None,
):
    """Bounded positive solution of the linearized equation driven by
    nonnegative ramped boundary data (zero initial data).  Returns
    (field, certificate); raises if the discrete maximum principle fails.

    ramp_time switches the (t/T)^p ramp to a smoothstep that saturates at 1
    for t >= ramp_time, keeping the solution bounded away from zero on most
    of the cylinder (useful as a division weight).
    """
    from ..linearize import probe_trace

    resolved = portion if portion is not None else resolve_portion(grid, BoundaryPortion.full())
    if shape_fn is None:
        shape_fn = lambda *args: np.ones_like(np.asarray(args[0], dtype=float))
    trace = probe_trace(grid, shape_fn, ramp_power, resolved)
    if ramp_time is not None:
        coords = resolved.coords()
        args = [coords[:, i] for i in range(grid.dim)]
        spatial = np.broadcast_to(np.asarray(shape_fn(*args), dtype=float), (resolved.n_nodes,))
        rows = [spatial * _smoothstep(t / ramp_time) for t in grid.times()]
        trace = Field(grid, np.array(rows), DOMAIN_SIGMA, resolved)
    if np.min(trace.values) < 0:
        raise GridError("boundary shape must be nonnegative")
    if np.max(trace.values) <= 0:
        raise GridError("boundary shape must be positive somewhere (f > 0 on a sub-portion)")
    rep = solve_linear(grid, gamma, q, f=trace, scheme=scheme)
    vals = rep.solution.values
    sup = float(np.max(np.abs(vals)))
    interior = np.ones(grid.n_space, dtype=bool)
    interior[grid.boundary_flat_indices()] = False
    flat = vals.reshape(grid.n_levels, -1)
    overall_min = float(np.min(flat[:, interior]))
    late_min = float(np.min(flat[1:, interior]))
    if overall_min < -1e-8 * sup or late_min <= 0.0:
        raise RuntimeError(
            f"maximum-principle violation: interior min {late_min:.3g} "
            "(discretization or data bug)"
        )
    certificate = {
        "interior_min_after_first_level": late_min,
        "interior_min": overall_min,
        "sup": sup,
    }
    return rep.solution, certificate


# ---------------------------------------------------------------------------
# Taylor-coefficient recovery (orders k >= 2; k = 1 is potential recovery)


def _check_shared_base_potential(grid, nl1, nl2):
    meshes = grid.meshes()
    x = meshes[0]
    y = meshes[1] if grid.dim == 2 else 0.0
    for t in (0.0, grid.T / 2, grid.T):
        a = np.broadcast_to(np.asarray(nl1(x, t, 0.0, y=y, k=1), dtype=float), grid.nx)
        b = np.broadcast_to(np.asarray(nl2(x, t, 0.0, y=y, k=1), dtype=float), grid.nx)
        if np.max(np.abs(a - b)) > 1e-10:
            raise GridError(
                "first-order coefficients differ at the base; recover order 1 first"
            )


def _coefficient_field(grid, nl, order) -> Field:
    meshes = grid.meshes()
    x = meshes[0]
    y = meshes[1] if grid.dim == 2 else 0.0
    levels = []
    for t in grid.times():
        v = np.broadcast_to(np.asarray(nl(x, t, 0.0, y=y, k=order), dtype=float), grid.nx)
        levels.append(v.copy())
    return Field(grid, np.array(levels), DOMAIN_Q)


def synthesize_taylor_probes(
    grid: SpaceTimeGrid,
    nl_truth: Nonlinearity,
    nl_ref: Nonlinearity,
    order: int,
    positive_fields,
    lattice=None,
    rho: float = 32.0,
    omegas=None,
    scheme: str = "be",
    n_tau: int = 4,
    n_xi: int = 4,
):
    """Order-M linearized DN differences for the twin at base solution 0.

    The M-th linearized field for model j (distinct single-probe structure,
    first probe a CGO trace) factors through the carrier; its profile solves

        P_qbar W_j = -d_u^M b_j(.,0) * (theta + z) * prod positive_fields,

    with zero data.  The measured object is d_nu(W_truth - W_ref).
    """
    if order < 2:
        raise GridError("orders below 2 reduce to potential recovery")
    if len(positive_fields) != order - 1:
        raise GridError("need order-1 positive auxiliary solutions")
    _check_shared_base_potential(grid, nl_truth, nl_ref)
    qbar = _coefficient_field(grid, nl_truth, 1)
    delta1 = _coefficient_field(grid, nl_truth, order)
    delta2 = _coefficient_field(grid, nl_ref, order)
    pos_prod = np.ones_like(qbar.values)
    for v in positive_fields:
        pos_prod = pos_prod * v.values

    if omegas is None:
        omegas = [(1.0,)] if grid.dim == 1 else [(1.0, 0.0), (0.0, 1.0)]
    factory = CGOFactory(grid, qbar, scheme)
    full = resolve_portion(grid, BoundaryPortion.full())
    B = normal_derivative_matrix(grid, full)
    probes = []
    for omega in omegas:
        pairs = lattice if lattice is not None else frequency_lattice(grid, omega, n_xi, n_tau)
        adv = tuple(-2.0 * rho * w for w in omega)
        prop = Propagator(grid, None, qbar, scheme, adv)
        bwd = factory.build(CGOParameters.make(rho, omega, direction="backward"))
        for xi, tau in pairs:
            fwd = factory.build(CGOParameters.make(rho, omega, xi=xi, tau=tau))
            carrier_profile = fwd.profile().values
            traces = []
            for dl in (delta1, delta2):
                src = (-dl.values * carrier_profile * pos_prod).reshape(grid.n_levels, -1)
                W = prop.run(source=src)
                traces.append((B @ W.T).T)
            probes.append(
                PotentialProbe(
                    fwd.params,
                    traces[0] - traces[1],
                    full,
                    fwd.remainder_norm,
                    bwd.remainder_norm,
                    tuple(fwd.warnings),
                    order=order,
                )
            )
    return probes


def recover_taylor(
    grid: SpaceTimeGrid,
    probes,
    nl_ref: Nonlinearity,
    order: int,
    positive_fields,
    scheme: str = "be",
    alpha: float = 1e-6,
    mask_fraction: float = 1e-6,
    division_floor: float = 0.05,
    truth_difference: Field | None = None,
) -> ReconstructionResult:
    """Recover delta_k = d_u^k b_truth(.,0) - d_u^k b_ref(.,0) for k >= 2.

    The boundary functional equals integral delta_k * P over Q against the
    CGO pair kernel, with P the positive-solution product; synthesis returns
    delta_k * P, and pointwise division by P yields delta_k.  Nodes with P
    below mask_fraction * max(P) are skipped outright (degenerate corner);
    the recovered field is additionally zeroed below division_floor * max(P),
    where the measurements carry no usable information and dividing only
    amplifies synthesis error.
    """
    qbar = _coefficient_field(grid, nl_ref, 1)
    sset = FourierSampleSet(grid)
    factory = CGOFactory(grid, qbar, scheme)
    for p in probes:
        bwd = factory.build(
            CGOParameters.make(p.params.rho, p.params.omega, direction="backward")
        )
        w_bwd = bwd.profile().values.reshape(grid.n_levels, -1)[:, p.portion.flat]
        boundary = _sigma_integral(grid, p.portion, w_bwd, p.dn_difference)
        # sign: source is -delta * V, so the sample flips once more
        sset.add(
            FourierSample(
                p.params.omega, p.params.xi, p.params.tau, boundary, p.params.rho,
                p.remainder_fwd, bwd.remainder_norm, p.warnings,
            )
        )
    product = sset.synthesize(alpha=alpha, ramp=_phi_rho(probes[0].params.rho, grid.T))
    pos_prod = np.ones_like(product.values)
    for v in positive_fields:
        pos_prod = pos_prod * v.values
    peak = float(np.max(pos_prod))
    threshold = mask_fraction * peak
    mask = pos_prod > threshold
    recovered_vals = np.zeros_like(product.values)
    recovered_vals[mask] = product.values[mask] / pos_prod[mask]
    floor = division_floor * peak
    recovered_vals[pos_prod <= floor] = 0.0
    masked = int(np.sum(~mask))
    result = ReconstructionResult(
        Field(grid, recovered_vals, DOMAIN_Q),
        residuals={"conjugate_symmetry_defect": sset.conjugate_symmetry_defect()},
        regularization={
            "method": "tikhonov-fourier-synthesis + positive-product division",
            "alpha": alpha,
            "masked_nodes": masked,
            "mask_threshold": threshold,
            "division_floor": floor,
        },
        notes=[f"{masked} nodes masked below the positive-product threshold"] if masked else [],
        samples=sset,
    )
    if truth_difference is not None:
        result.compare_truth(truth_difference)
    return result
