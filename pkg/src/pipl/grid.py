"""Space-time tensor grids on intervals/rectangles with tagged boundary portions.

Everything downstream (solvers, measurements, reconstructions) lives on a
uniform grid over Omega x (0, T) with Omega an interval (dim 1) or an
axis-aligned rectangle (dim 2).  Boundary portions resolve to explicit
(face, node) lists so that directional selections and partial measurements
are just index sets.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field as dc_field

import numpy as np

DOMAIN_Q = "Q"
DOMAIN_OMEGA = "Omega"
DOMAIN_SIGMA = "Sigma"

# face ids: (axis, side) with side 0 = lower coordinate, 1 = upper
FACE_NAMES = {
    (0, 0): "left",
    (0, 1): "right",
    (1, 0): "bottom",
    (1, 1): "top",
}
FACE_IDS = {v: k for k, v in FACE_NAMES.items()}


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform tensor grid on a 1D interval or 2D rectangle times (0, T).

    ``nx`` counts nodes per axis (>= 3 each); ``nt`` counts time steps, so
    there are ``nt + 1`` time levels including t = 0 and t = T.
    """

    dim: int
    lower: tuple
    upper: tuple
    nx: tuple
    nt: int
    T: float

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise GridError("dim must be 1 or 2")
        if len(self.lower) != self.dim or len(self.upper) != self.dim or len(self.nx) != self.dim:
            raise GridError("lower/upper/nx length must match dim")
        if any(n < 3 for n in self.nx):
            raise GridError("need at least 3 nodes per axis")
        if self.nt < 2:
            raise GridError("need at least 2 time steps")
        if self.T <= 0:
            raise GridError("horizon T must be positive")
        if any(u <= l for l, u in zip(self.lower, self.upper)):
            raise GridError("upper corner must exceed lower corner")

    @classmethod
    def make(cls, lower, upper, nx, nt, T) -> "SpaceTimeGrid":
        lower = tuple(float(v) for v in np.atleast_1d(lower))
        upper = tuple(float(v) for v in np.atleast_1d(upper))
        nx = tuple(int(v) for v in np.atleast_1d(nx))
        return cls(len(nx), lower, upper, nx, int(nt), float(T))

    @property
    def h(self) -> tuple:
        return tuple((u - l) / (n - 1) for l, u, n in zip(self.lower, self.upper, self.nx))

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def n_space(self) -> int:
        return int(np.prod(self.nx))

    @property
    def n_levels(self) -> int:
        return self.nt + 1

    def axis(self, i: int) -> np.ndarray:
        # lower + k*h reproduces coordinates bit-exactly from indices
        return self.lower[i] + np.arange(self.nx[i]) * self.h[i]

    def times(self) -> np.ndarray:
        return np.arange(self.n_levels) * self.dt

    def meshes(self):
        """Spatial coordinate arrays shaped like a space slice (ij indexing)."""
        axes = [self.axis(i) for i in range(self.dim)]
        if self.dim == 1:
            return (axes[0],)
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def space_weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights over Omega, shaped like a space slice."""
        w = None
        for i in range(self.dim):
            wi = np.full(self.nx[i], self.h[i])
            wi[0] *= 0.5
            wi[-1] *= 0.5
            w = wi if w is None else np.multiply.outer(w, wi)
        return w

    def time_weights(self) -> np.ndarray:
        w = np.full(self.n_levels, self.dt)
        w[0] *= 0.5
        w[-1] *= 0.5
        return w

    # -- boundary structure ------------------------------------------------

    def faces(self) -> list:
        if self.dim == 1:
            return [(0, 0), (0, 1)]
        return [(0, 0), (0, 1), (1, 0), (1, 1)]

    def face_normal(self, face) -> np.ndarray:
        axis, side = face
        nu = np.zeros(self.dim)
        nu[axis] = 1.0 if side else -1.0
        return nu

    def face_multi_indices(self, face) -> list:
        """All node multi-indices on a face (2D faces include their corners)."""
        axis, side = face
        fixed = self.nx[axis] - 1 if side else 0
        if self.dim == 1:
            return [(fixed,)]
        other = 1 - axis
        out = []
        for k in range(self.nx[other]):
            mi = [0, 0]
            mi[axis] = fixed
            mi[other] = k
            out.append(tuple(mi))
        return out

    def flat_index(self, mi) -> int:
        if self.dim == 1:
            return int(mi[0])
        return int(mi[0]) * self.nx[1] + int(mi[1])

    def node_coords(self, mi) -> tuple:
        return tuple(self.lower[i] + mi[i] * self.h[i] for i in range(self.dim))

    def boundary_flat_indices(self) -> np.ndarray:
        idx = set()
        for face in self.faces():
            for mi in self.face_multi_indices(face):
                idx.add(self.flat_index(mi))
        return np.array(sorted(idx), dtype=int)

    def digest(self) -> str:
        payload = repr((self.dim, self.lower, self.upper, self.nx, self.nt, self.T))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Boundary portions


@dataclass(frozen=True)
class BoundaryPortion:
    """Selects a subset of the lateral boundary.

    kind 'full'         -> every face
    kind 'faces'        -> the named faces (used for Gamma_0 and the V+- sets)
    kind 'directional'  -> faces with nu . omega > eps (>= 0 when eps == 0),
                           sign -1 flips omega
    """

    kind: str
    faces: tuple = ()
    omega: tuple = ()
    eps: float = 0.0
    sign: int = +1

    @classmethod
    def full(cls):
        return cls("full")

    @classmethod
    def named(cls, *names: str):
        return cls("faces", faces=tuple(names))

    @classmethod
    def directional(cls, omega, eps=0.0, sign=+1):
        omega = tuple(float(v) for v in np.atleast_1d(omega))
        return cls("directional", omega=omega, eps=float(eps), sign=int(sign))

    def describe(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "faces":
            d["faces"] = list(self.faces)
        if self.kind == "directional":
            d.update(omega=list(self.omega), eps=self.eps, sign=self.sign)
        return d


@dataclass(frozen=True)
class ResolvedPortion:
    """Explicit node list for a portion: parallel arrays over boundary nodes."""

    grid: SpaceTimeGrid
    faces: tuple                      # selected face ids
    face_of_node: tuple               # face id per entry
    multi_indices: tuple              # node multi-index per entry
    flat: np.ndarray                  # flat spatial index per entry
    weights: np.ndarray               # boundary quadrature weight per entry

    @property
    def n_nodes(self) -> int:
        return len(self.flat)

    def coords(self) -> np.ndarray:
        return np.array([self.grid.node_coords(mi) for mi in self.multi_indices])

    def normals(self) -> np.ndarray:
        return np.array([self.grid.face_normal(f) for f in self.face_of_node])


def _selected_faces(grid: SpaceTimeGrid, portion: BoundaryPortion) -> list:
    if portion.kind == "full":
        return grid.faces()
    if portion.kind == "faces":
        faces = []
        for name in portion.faces:
            if name not in FACE_IDS:
                raise GridError(f"unknown face name {name!r}")
            fid = FACE_IDS[name]
            if fid[0] >= grid.dim:
                raise GridError(f"face {name!r} does not exist in dim {grid.dim}")
            faces.append(fid)
        return faces
    if portion.kind == "directional":
        omega = np.asarray(portion.omega, dtype=float)
        if len(omega) != grid.dim:
            raise GridError("omega length must match grid dim")
        if abs(np.linalg.norm(omega) - 1.0) > 1e-12:
            raise GridError("omega must be a unit vector")
        if portion.eps < 0:
            raise GridError("aperture eps must be >= 0")
        omega = portion.sign * omega
        faces = []
        for face in grid.faces():
            dot = float(np.dot(grid.face_normal(face), omega))
            # eps == 0 keeps nu.omega >= 0 faces, eps > 0 demands nu.omega > eps
            keep = dot >= 0.0 if portion.eps == 0.0 else dot > portion.eps
            if keep:
                faces.append(face)
        return faces
    raise GridError(f"unknown portion kind {portion.kind!r}")


def resolve_portion(grid: SpaceTimeGrid, portion: BoundaryPortion) -> ResolvedPortion:
    faces = _selected_faces(grid, portion)
    face_of_node, mis, flat, weights = [], [], [], []
    for face in faces:
        axis, _side = face
        other = 1 - axis if grid.dim == 2 else None
        nodes = grid.face_multi_indices(face)
        for mi in nodes:
            face_of_node.append(face)
            mis.append(mi)
            flat.append(grid.flat_index(mi))
            if grid.dim == 1:
                w = 1.0  # 0-dimensional face: counting measure
            else:
                w = grid.h[other]
                if mi[other] in (0, grid.nx[other] - 1):
                    w *= 0.5
            weights.append(w)
    return ResolvedPortion(
        grid,
        tuple(faces),
        tuple(face_of_node),
        tuple(mis),
        np.asarray(flat, dtype=int),
        np.asarray(weights, dtype=float),
    )


def classify_boundary(grid: SpaceTimeGrid, portion: BoundaryPortion) -> set:
    """Flat spatial indices of the boundary nodes selected by the portion."""
    return set(resolve_portion(grid, portion).flat.tolist())


# ---------------------------------------------------------------------------
# Fields


@dataclass
class Field:
    """Discrete function attached to a grid.

    domain Q:      values shaped (n_levels, *nx)
    domain Omega:  values shaped nx  (an initial slice)
    domain Sigma:  values shaped (n_levels, n_portion_nodes) plus a portion
    """

    grid: SpaceTimeGrid
    values: np.ndarray
    domain: str = DOMAIN_Q
    portion: ResolvedPortion | None = dc_field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        expected = self.expected_shape()
        if self.values.shape != expected:
            raise GridError(
                f"field shape {self.values.shape} does not match {self.domain} shape {expected}"
            )

    def expected_shape(self):
        if self.domain == DOMAIN_Q:
            return (self.grid.n_levels, *self.grid.nx)
        if self.domain == DOMAIN_OMEGA:
            return self.grid.nx
        if self.domain == DOMAIN_SIGMA:
            if self.portion is None:
                raise GridError("Sigma field needs a resolved portion")
            return (self.grid.n_levels, self.portion.n_nodes)
        raise GridError(f"unknown field domain {self.domain!r}")

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy(), self.domain, self.portion)

    def __add__(self, other):
        return Field(self.grid, self.values + _vals(other), self.domain, self.portion)

    def __sub__(self, other):
        return Field(self.grid, self.values - _vals(other), self.domain, self.portion)

    def __mul__(self, scalar):
        return Field(self.grid, self.values * scalar, self.domain, self.portion)

    __rmul__ = __mul__


def _vals(f):
    return f.values if isinstance(f, Field) else f


def zero_field(grid: SpaceTimeGrid, domain=DOMAIN_Q, portion=None, dtype=float) -> Field:
    if domain == DOMAIN_Q:
        shape = (grid.n_levels, *grid.nx)
    elif domain == DOMAIN_OMEGA:
        shape = grid.nx
    else:
        shape = (grid.n_levels, portion.n_nodes)
    return Field(grid, np.zeros(shape, dtype=dtype), domain, portion)


def field_from_function(grid: SpaceTimeGrid, fn, domain=DOMAIN_Q, portion=None) -> Field:
    """Sample fn on grid nodes.  fn takes (x[, y], t) for Q/Sigma and
    (x[, y]) for Omega, vectorized over numpy arrays."""
    if domain == DOMAIN_OMEGA:
        return Field(grid, np.asarray(fn(*grid.meshes()), dtype=float), domain)
    if domain == DOMAIN_Q:
        meshes = grid.meshes()
        levels = []
        for t in grid.times():
            levels.append(np.broadcast_to(np.asarray(fn(*meshes, t)), grid.nx).copy())
        return Field(grid, np.array(levels), domain)
    if domain == DOMAIN_SIGMA:
        coords = portion.coords()
        args = [coords[:, i] for i in range(grid.dim)]
        rows = []
        for t in grid.times():
            rows.append(np.broadcast_to(np.asarray(fn(*args, t)), (portion.n_nodes,)).copy())
        return Field(grid, np.array(rows), domain, portion)
    raise GridError(f"unknown field domain {domain!r}")


def norm(f: Field, space: str) -> float:
    """Trapezoidal L2 norm over Q, Omega, or a Sigma portion."""
    g = f.grid
    if space == "L2Q":
        if f.domain != DOMAIN_Q:
            raise GridError("L2Q norm needs a Q field")
        w = g.space_weights().reshape(-1)
        per_level = (np.abs(f.values) ** 2).reshape(g.n_levels, -1) @ w
        return float(np.sqrt(np.dot(g.time_weights(), per_level)))
    if space == "L2Omega":
        if f.domain == DOMAIN_OMEGA:
            vals = f.values
        elif f.domain == DOMAIN_Q:
            raise GridError("pass an Omega slice, not the full Q field")
        else:
            raise GridError("L2Omega norm needs an Omega field")
        return float(np.sqrt(np.sum(np.abs(vals) ** 2 * g.space_weights())))
    if space == "L2Sigma":
        if f.domain != DOMAIN_SIGMA:
            raise GridError("L2Sigma norm needs a Sigma field")
        per_level = (np.abs(f.values) ** 2) @ f.portion.weights
        return float(np.sqrt(np.dot(g.time_weights(), per_level)))
    raise GridError(f"unknown norm space {space!r}")


def omega_slice(f: Field, level: int) -> Field:
    """Extract one time level of a Q field as an Omega field."""
    if f.domain != DOMAIN_Q:
        raise GridError("omega_slice needs a Q field")
    return Field(f.grid, f.values[level].copy(), DOMAIN_OMEGA)


def l2q_inner(a: Field, b: Field) -> complex:
    """Trapezoidal integral of a*b over Q (no conjugation)."""
    g = a.grid
    w = g.space_weights().reshape(-1)
    per_level = (a.values * b.values).reshape(g.n_levels, -1) @ w
    out = np.dot(g.time_weights(), per_level)
    return complex(out) if np.iscomplexobj(per_level) else float(out)


# ---------------------------------------------------------------------------
# CSV serialization: '# shape: nx[,ny],nt' header then row-major values,
# one time level per block separated by a blank line.


def save_field_csv(f: Field, path) -> None:
    if f.domain == DOMAIN_OMEGA:
        levels = [f.values]
    elif f.domain == DOMAIN_Q:
        levels = list(f.values)
    else:
        raise GridError("CSV field format covers Q and Omega fields")
    shape_bits = [str(n) for n in f.grid.nx] + [str(f.grid.nt)]
    buf = io.StringIO()
    buf.write(f"# shape: {','.join(shape_bits)}\n")
    for k, level in enumerate(levels):
        if k:
            buf.write("\n")
        arr = np.atleast_2d(level)
        for row in arr:
            buf.write(",".join(repr(float(v)) for v in row))
            buf.write("\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def load_field_csv(grid: SpaceTimeGrid, path, domain=DOMAIN_Q) -> Field:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# shape:"):
        raise GridError("missing '# shape:' header")
    blocks, current = [], []
    for line in lines[1:]:
        if not line.strip():
            if current:
                blocks.append(current)
                current = []
            continue
        current.append([float(v) for v in line.split(",")])
    if current:
        blocks.append(current)
    arrays = [np.array(b).reshape(grid.nx) for b in blocks]
    if domain == DOMAIN_OMEGA:
        return Field(grid, arrays[0], DOMAIN_OMEGA)
    return Field(grid, np.array(arrays), DOMAIN_Q)
