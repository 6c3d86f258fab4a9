"""Dirichlet-to-Neumann measurement synthesis.

The normal derivative is taken with a 3-point one-sided stencil (second
order) at each boundary node of the requested portion, so measurement
accuracy matches the interior discretization without ghost nodes.  Noise is
applied to synthesized measurements only, never inside a solver.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .grid import (
    DOMAIN_Q,
    DOMAIN_SIGMA,
    Field,
    GridError,
    ResolvedPortion,
    SpaceTimeGrid,
    resolve_portion,
)
from .forward import solve_semilinear


@dataclass
class DNMeasurement:
    """Normal-derivative trace on a boundary portion, one row per time level."""

    grid: SpaceTimeGrid
    portion: ResolvedPortion
    values: np.ndarray                      # (n_levels, n_portion_nodes)
    noise: dict = dc_field(default_factory=dict)

    def as_field(self) -> Field:
        return Field(self.grid, self.values, DOMAIN_SIGMA, self.portion)

    def l2(self) -> float:
        per_level = (np.abs(self.values) ** 2) @ self.portion.weights
        return float(np.sqrt(np.dot(self.grid.time_weights(), per_level)))

    def copy(self) -> "DNMeasurement":
        return DNMeasurement(self.grid, self.portion, self.values.copy(), dict(self.noise))


def _stencil_offsets(grid: SpaceTimeGrid, face, mi):
    """Flat indices (b, in1, in2) marching inward along the face normal."""
    axis, side = face
    step = -1 if side else +1
    mi1 = list(mi)
    mi2 = list(mi)
    mi1[axis] += step
    mi2[axis] += 2 * step
    return grid.flat_index(mi), grid.flat_index(tuple(mi1)), grid.flat_index(tuple(mi2))


def normal_derivative_matrix(grid: SpaceTimeGrid, portion: ResolvedPortion):
    """Rows map a flattened space slice to d_nu at the portion nodes:
    (3 u_b - 4 u_1 + u_2) / (2 h) along the outward normal."""
    import scipy.sparse as sp

    rows, cols, vals = [], [], []
    for r, (face, mi) in enumerate(zip(portion.face_of_node, portion.multi_indices)):
        axis, _ = face
        h = grid.h[axis]
        b, i1, i2 = _stencil_offsets(grid, face, mi)
        rows += [r, r, r]
        cols += [b, i1, i2]
        vals += [3.0 / (2 * h), -4.0 / (2 * h), 1.0 / (2 * h)]
    return sp.csr_matrix((vals, (rows, cols)), shape=(portion.n_nodes, grid.n_space))


def measure(u: Field, portion) -> DNMeasurement:
    """One-sided second-order d_nu u on the portion, every time level."""
    if u.domain != DOMAIN_Q:
        raise GridError("measure expects a field on Q")
    resolved = portion if isinstance(portion, ResolvedPortion) else resolve_portion(u.grid, portion)
    if resolved.n_nodes == 0:
        raise GridError("portion resolves to no boundary nodes")
    B = normal_derivative_matrix(u.grid, resolved)
    flat = u.values.reshape(u.grid.n_levels, -1)
    values = (B @ flat.T).T
    return DNMeasurement(u.grid, resolved, values)


def passive_map(
    grid: SpaceTimeGrid,
    gamma,
    nl,
    g: Field,
    portion,
    scheme: str = "be",
    strategy: str = "picard",
) -> DNMeasurement:
    """Passive measurement: solve with f = 0 driven by the initial data g
    and measure the DN trace on the portion."""
    report = solve_semilinear(grid, gamma, nl, f=None, g=g, strategy=strategy, scheme=scheme)
    return measure(report.solution, portion)


def add_noise(m: DNMeasurement, model: str, level: float, seed: int) -> DNMeasurement:
    """Reproducible Gaussian observation noise.

    gaussian-relative: per-node iid with standard deviation level * RMS(m),
    so the relative L2 perturbation is ~level in expectation.
    gaussian-absolute: per-node iid with standard deviation level.
    """
    if level < 0:
        raise ValueError("noise level must be >= 0")
    out = m.copy()
    out.noise = {"model": model, "level": level, "seed": int(seed)}
    if level == 0.0:
        return out
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal(m.values.shape)
    if model == "gaussian-relative":
        total_w = float(np.sum(m.portion.weights) * np.sum(m.grid.time_weights()))
        rms = m.l2() / np.sqrt(total_w) if total_w > 0 else 0.0
        out.values = m.values + level * rms * xi
    elif model == "gaussian-absolute":
        out.values = m.values + level * xi
    else:
        raise ValueError(f"unknown noise model {model!r}")
    return out


# ---------------------------------------------------------------------------
# Persistence: CSV columns t, node_id, x[, y], value with a JSON sidecar.


def save_measurement(m: DNMeasurement, csv_path, sidecar_path=None) -> None:
    coords = m.portion.coords()
    with open(csv_path, "w") as fh:
        header = "t,node_id,x" + (",y" if m.grid.dim == 2 else "") + ",value\n"
        fh.write(header)
        for k, t in enumerate(m.grid.times()):
            for j in range(m.portion.n_nodes):
                xy = ",".join(repr(float(c)) for c in coords[j])
                fh.write(
                    f"{float(t)!r},{int(m.portion.flat[j])},{xy},{float(m.values[k, j])!r}\n"
                )
    if sidecar_path is not None:
        sidecar = {
            "portion": {
                "faces": [list(f) for f in m.portion.faces],
                "n_nodes": m.portion.n_nodes,
            },
            "noise": m.noise,
            "grid_digest": m.grid.digest(),
        }
        with open(sidecar_path, "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_measurement(grid: SpaceTimeGrid, portion, csv_path) -> DNMeasurement:
    resolved = portion if isinstance(portion, ResolvedPortion) else resolve_portion(grid, portion)
    values = np.zeros((grid.n_levels, resolved.n_nodes))
    pos = {int(flat): j for j, flat in enumerate(resolved.flat)}
    times = grid.times()
    with open(csv_path) as fh:
        next(fh)
        for line in fh:
            parts = line.strip().split(",")
            t = float(parts[0])
            node = int(parts[1])
            value = float(parts[-1])
            k = int(round(t / grid.dt))
            if abs(times[k] - t) > 1e-12 * max(1.0, grid.T):
                raise GridError(f"time {t} is not a grid level")
            values[k, pos[node]] = value
    return DNMeasurement(grid, resolved, values)
