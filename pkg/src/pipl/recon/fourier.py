"""Fourier sample bookkeeping and regularized synthesis.

CGO pairings deliver approximate samples of integral f(x,t) w(t) E(xi,tau)
over Q, where E = exp(-i(x,t).(xi,tau)) and w is the known ramp product
phi_rho(t).  Synthesis fits a truncated exponential basis to those samples
by Tikhonov-regularized least squares; the ramp weight is kept inside the
design matrix so the ramp-in/ramp-out bias does not pollute the estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from ..grid import DOMAIN_Q, Field, GridError, SpaceTimeGrid


@dataclass
class FourierSample:
    omega: tuple
    xi: tuple
    tau: float
    value: complex
    rho: float
    remainder_fwd: float = 0.0
    remainder_bwd: float = 0.0
    warnings: tuple = ()


def frequency_lattice(grid: SpaceTimeGrid, omega, n_xi: int, n_tau: int):
    """(xi, tau) pairs with xi a multiple of the unit vector orthogonal to
    omega (empty direction in 1D, where only tau varies) and tau a DFT
    frequency of (0, T)."""
    omega = np.asarray(omega, dtype=float)
    taus = [2 * np.pi * l / grid.T for l in range(-n_tau, n_tau + 1)]
    pairs = []
    if grid.dim == 1:
        xis = [(0.0,)]
    else:
        perp = np.array([-omega[1], omega[0]])
        # spatial extent along the perpendicular direction sets the base frequency
        ext = abs(perp[0]) * (grid.upper[0] - grid.lower[0]) + abs(perp[1]) * (
            grid.upper[1] - grid.lower[1]
        )
        base = 2 * np.pi / ext
        xis = [tuple(j * base * perp) for j in range(-n_xi, n_xi + 1)]
    for xi in xis:
        for tau in taus:
            pairs.append((xi, float(tau)))
    return pairs


@dataclass
class FourierSampleSet:
    grid: SpaceTimeGrid
    samples: list = dc_field(default_factory=list)

    def add(self, sample: FourierSample):
        self.samples.append(sample)

    def __len__(self):
        return len(self.samples)

    def conjugate_symmetry_defect(self) -> float:
        """Relative defect between samples at (xi, tau) and conj at
        (-xi, -tau); small for real integrands."""
        index = {}
        for s in self.samples:
            key = (tuple(np.round(s.xi, 12)), round(s.tau, 12), s.rho, s.omega)
            index[key] = s.value
        worst = 0.0
        scale = max((abs(s.value) for s in self.samples), default=0.0)
        if scale == 0.0:
            return 0.0
        for s in self.samples:
            nkey = (
                tuple(np.round(tuple(-v for v in s.xi), 12)),
                round(-s.tau, 12),
                s.rho,
                s.omega,
            )
            if nkey in index:
                worst = max(worst, abs(np.conj(index[nkey]) - s.value))
        return worst / scale

    # -- synthesis ----------------------------------------------------------

    def _basis_modes(self):
        """Distinct (xi, tau) synthesis modes across all samples."""
        seen = {}
        for s in self.samples:
            key = (tuple(np.round(s.xi, 12)), round(s.tau, 12))
            seen.setdefault(key, (s.xi, s.tau))
        return list(seen.values())

    def synthesize(self, alpha: float = 1e-6, ramp=None, modes=None) -> Field:
        """Least-squares fit of sum_j c_j exp(+i(xi_j.x + tau_j t)) to the
        samples; returns the real part as a Q field.

        ramp(rho, t) -> weight w(t) multiplying the kernel for a sample taken
        at carrier strength rho (the phi_rho product ramp); identity if None.
        modes: explicit synthesis basis (defaults to the distinct sample
        frequencies); requesting more modes than samples is rejected.
        """
        grid = self.grid
        modes = self._basis_modes() if modes is None else list(modes)
        if len(self.samples) < len(modes):
            raise GridError("under-resolved lattice: fewer samples than synthesis modes")
        meshes = grid.meshes()
        w_space = grid.space_weights().reshape(-1)
        w_time = grid.time_weights()
        times = grid.times()

        def mode_phase(xi, tau, sign):
            s = xi[0] * meshes[0]
            if grid.dim == 2:
                s = s + xi[1] * meshes[1]
            return [np.exp(sign * 1j * (s + tau * t)).reshape(-1) for t in times]

        basis_levels = [mode_phase(xi, tau, +1) for xi, tau in modes]
        G = np.zeros((len(self.samples), len(modes)), dtype=complex)
        rhs = np.zeros(len(self.samples), dtype=complex)
        for m, s in enumerate(self.samples):
            kern = mode_phase(s.xi, s.tau, -1)
            wt = (
                np.ones(grid.n_levels)
                if ramp is None
                else np.array([ramp(s.rho, t) for t in times])
            )
            for j in range(len(modes)):
                acc = 0.0 + 0.0j
                for k in range(grid.n_levels):
                    acc += w_time[k] * wt[k] * np.dot(basis_levels[j][k] * kern[k], w_space)
                G[m, j] = acc
            rhs[m] = s.value
        scale = float(np.max(np.abs(G))) or 1.0
        lhs = G.conj().T @ G + alpha * scale**2 * np.eye(len(modes))
        coeff = np.linalg.solve(lhs, G.conj().T @ rhs)
        out = np.zeros((grid.n_levels, grid.n_space))
        for j, c in enumerate(coeff):
            for k in range(grid.n_levels):
                out[k] += (c * basis_levels[j][k]).real
        return Field(grid, out.reshape(grid.n_levels, *grid.nx), DOMAIN_Q)
