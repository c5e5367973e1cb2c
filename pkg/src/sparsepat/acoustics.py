"""2-D acoustic forward model and time-reversal reconstruction.

The lossless wave equation is integrated in first-order form on a staggered
grid (pressure on nodes, velocities on the faces between them) with an
explicit leapfrog in time.  Eliminating the velocities gives the classic
five-point second-order scheme for pressure, so the stability bound is
``c dt / dx <= 1/sqrt(2)``.

Pressure is split into x and y parts so that each can be damped only by the
absorbing profile of its own axis.  Every update is multiplied by
``exp(-sigma dt / 2)`` on both sides, with ``sigma * dt`` growing quadratically
over ``damping_width`` cells at the grid edge; outside the grid the pressure
is zero.

Grid node ``(i, j)`` sits at ``x = (j - (nx-1)/2) dx``, ``y = (i - (ny-1)/2) dx``.
The imaging region is the central ``image_size`` x ``image_size`` block of
nodes.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

CFL_LIMIT = 1.0 / math.sqrt(2.0)


class SimulationError(ValueError):
    pass


@dataclass
class AcousticGrid:
    nx: int
    ny: int
    dx: float
    c: float = 1500.0
    dt: float | None = None
    damping_width: int = 20
    region_extent: float = 0.010
    cfl: float = 0.6
    sponge_strength: float = 2.0

    def __post_init__(self):
        if self.dt is None:
            self.dt = self.cfl * self.dx / self.c
        courant = self.c * self.dt / self.dx
        if courant > CFL_LIMIT + 1e-12:
            raise SimulationError(
                f"CFL violated: c*dt/dx = {courant:.4f} > 1/sqrt(2) = {CFL_LIMIT:.4f}"
            )
        if self.nx < 2 * self.damping_width + 3 or self.ny < 2 * self.damping_width + 3:
            raise SimulationError(f"grid {self.nx}x{self.ny} too small for a {self.damping_width}-cell sponge")

    @property
    def courant(self):
        return self.c * self.dt / self.dx

    @property
    def image_size(self):
        return int(round(self.region_extent / self.dx))

    def region_slices(self):
        n = self.image_size
        oy, ox = (self.ny - n) // 2, (self.nx - n) // 2
        return slice(oy, oy + n), slice(ox, ox + n)

    def node_coords(self):
        ys = (np.arange(self.ny) - (self.ny - 1) / 2) * self.dx
        xs = (np.arange(self.nx) - (self.nx - 1) / 2) * self.dx
        return ys, xs

    def sponge_profile(self):
        """Per-node ``sigma * dt`` (largest of the two axes): quadratic in depth."""
        w = self.damping_width
        d = np.maximum(_depth(self.ny, w)[:, None], _depth(self.nx, w)[None, :])
        return self.sponge_strength * d ** 2

    def interior_radius(self):
        """Distance from the centre to the nearest sponge node, in metres."""
        half = min(self.nx, self.ny)
        return ((half - 1) / 2 - (self.damping_width - 1)) * self.dx

    def to_dict(self):
        return asdict(self)


@dataclass
class DetectorRing:
    num_detectors: int
    radius: float
    active_mask: list = field(default_factory=list)

    def __post_init__(self):
        if self.num_detectors < 1:
            raise SimulationError("need at least one detector")
        if not self.active_mask:
            self.active_mask = [True] * self.num_detectors
        if len(self.active_mask) != self.num_detectors:
            raise SimulationError(
                f"active_mask has {len(self.active_mask)} entries for {self.num_detectors} detectors"
            )
        self.active_mask = [bool(a) for a in self.active_mask]

    @property
    def angles(self):
        return 2 * np.pi * np.arange(self.num_detectors) / self.num_detectors

    @property
    def positions(self):
        a = self.angles
        return np.stack([self.radius * np.cos(a), self.radius * np.sin(a)], axis=1)

    @property
    def sparse(self):
        return not all(self.active_mask)

    def with_keep_every(self, keep_every):
        if keep_every < 1 or self.num_detectors % keep_every:
            raise SimulationError(f"keep_every={keep_every} does not divide {self.num_detectors}")
        return DetectorRing(
            self.num_detectors, self.radius, [i % keep_every == 0 for i in range(self.num_detectors)]
        )

    def nodes(self, grid: AcousticGrid):
        """Nearest grid node (row, col) for every detector."""
        pos = self.positions
        cols = np.rint(pos[:, 0] / grid.dx + (grid.nx - 1) / 2).astype(int)
        rows = np.rint(pos[:, 1] / grid.dx + (grid.ny - 1) / 2).astype(int)
        if rows.min() < 0 or cols.min() < 0 or rows.max() >= grid.ny or cols.max() >= grid.nx:
            raise SimulationError("detector outside grid")
        return rows, cols

    def provenance(self):
        return {"num_detectors": self.num_detectors, "radius": self.radius}


@dataclass
class SinogramRecord:
    samples: np.ndarray  # (num_active, num_timesteps)
    dt: float
    detector_indices: list
    grid: dict
    ring: dict
    keep_every: int = 1

    @property
    def num_timesteps(self):
        return self.samples.shape[1]

    def meta(self):
        return {
            "dt": self.dt,
            "detector_indices": list(self.detector_indices),
            "grid": self.grid,
            "ring": self.ring,
            "keep_every": self.keep_every,
        }

    @classmethod
    def from_meta(cls, samples, meta):
        return cls(np.asarray(samples, dtype=np.float64), meta["dt"], meta["detector_indices"],
                   meta["grid"], meta["ring"], meta.get("keep_every", 1))


def validate_geometry(grid: AcousticGrid, ring: DetectorRing):
    """Region inside the ring, ring inside the undamped interior."""
    half_diag = grid.image_size * grid.dx / math.sqrt(2)
    if ring.radius <= half_diag:
        raise SimulationError(
            f"imaging region (half-diagonal {half_diag:.5f} m) not inside ring of radius {ring.radius:.5f} m"
        )
    rows, cols = ring.nodes(grid)
    sponge = grid.sponge_profile()
    if np.any(sponge[rows, cols] > 0):
        raise SimulationError("detector ring reaches into the absorbing layer")


def default_num_timesteps(grid: AcousticGrid, ring: DetectorRing):
    return int(math.ceil(2 * (2 * ring.radius) / (grid.c * grid.dt)))


def _depth(n, w):
    i = np.arange(n, dtype=float)
    return (np.maximum(w - i, 0) + np.maximum(i - (n - 1 - w), 0)) / max(w, 1)


class WaveState:
    __slots__ = ("px", "py", "vx", "vy", "p_old")

    def __init__(self, px, py, vx, vy):
        self.px, self.py, self.vx, self.vy = px, py, vx, vy
        self.p_old = px + py

    @property
    def p(self):
        return self.px + self.py

    def set_pressure(self, rows, cols, values):
        self.px[rows, cols] = 0.5 * values
        self.py[rows, cols] = 0.5 * values


class WaveSolver:
    """Staggered leapfrog stepper with unit density."""

    def __init__(self, grid: AcousticGrid):
        self.grid = grid
        w, s = grid.damping_width, grid.sponge_strength
        # half-step damping factors on nodes and on faces, per axis
        self.ax_node = np.exp(-0.5 * s * _depth(grid.nx, w) ** 2)[None, :]
        self.ay_node = np.exp(-0.5 * s * _depth(grid.ny, w) ** 2)[:, None]
        fx = 0.5 * (_depth(grid.nx, w)[1:] + _depth(grid.nx, w)[:-1])
        fy = 0.5 * (_depth(grid.ny, w)[1:] + _depth(grid.ny, w)[:-1])
        self.ax_face = np.exp(-0.5 * s * fx ** 2)[None, :]
        self.ay_face = np.exp(-0.5 * s * fy ** 2)[:, None]
        self.k = grid.dt / grid.dx
        self.kc2 = grid.c ** 2 * grid.dt / grid.dx

    def zeros(self):
        g = self.grid
        return WaveState(np.zeros((g.ny, g.nx)), np.zeros((g.ny, g.nx)),
                         np.zeros((g.ny, g.nx - 1)), np.zeros((g.ny - 1, g.nx)))

    def start(self, p0):
        """State at t=0 with zero initial velocity (first velocity half-step)."""
        st = self.zeros()
        st.set_pressure(slice(None), slice(None), np.asarray(p0, dtype=np.float64))
        p = st.p
        st.vx = -0.5 * self.k * np.diff(p, axis=1)
        st.vy = -0.5 * self.k * np.diff(p, axis=0)
        self._advance_pressure(st)
        return st

    def _advance_pressure(self, st):
        dvx = np.zeros_like(st.px)
        dvx[:, :-1] += st.vx
        dvx[:, 1:] -= st.vx
        dvy = np.zeros_like(st.py)
        dvy[:-1, :] += st.vy
        dvy[1:, :] -= st.vy
        # dvx, dvy: x and y parts of div(v) on nodes
        st.p_old = st.px + st.py
        st.px = self.ax_node * (self.ax_node * st.px - self.kc2 * dvx)
        st.py = self.ay_node * (self.ay_node * st.py - self.kc2 * dvy)

    def step(self, st):
        """Advance by one dt: velocities to n+1/2, then pressure to n+1."""
        p = st.p
        st.vx = self.ax_face * (self.ax_face * st.vx - self.k * np.diff(p, axis=1))
        st.vy = self.ay_face * (self.ay_face * st.vy - self.k * np.diff(p, axis=0))
        self._advance_pressure(st)
        return st

    def energy(self, st):
        """Discrete acoustic energy at the last half-step, conserved without damping.

        Kinetic part from the velocities at n+1/2, potential part from the
        product of the pressures at n and n+1 that straddle it.
        """
        pot = np.sum(st.p_old * st.p) / self.grid.c ** 2
        return float(np.sum(st.vx ** 2) + np.sum(st.vy ** 2) + pot)


def embed(p0, grid: AcousticGrid):
    n = grid.image_size
    p0 = np.asarray(p0, dtype=np.float64)
    if p0.shape != (n, n):
        raise SimulationError(f"p0 shape {p0.shape} does not match imaging region {n}x{n}")
    u = np.zeros((grid.ny, grid.nx))
    u[grid.region_slices()] = p0
    return u


def forward_simulate(p0, grid: AcousticGrid, ring: DetectorRing, num_timesteps=None,
                     callback=None) -> SinogramRecord:
    """Propagate ``p0`` and record pressure at the active detectors.

    Sample ``n`` is the pressure at ``t = n dt``.  ``callback(n, solver, state)``
    runs after each sample is taken, for diagnostics.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    if p0.size and (p0.min() < -1e-6 or p0.max() > 1 + 1e-6):
        raise SimulationError("p0 values must lie in [0, 1]")
    validate_geometry(grid, ring)
    nt = num_timesteps or default_num_timesteps(grid, ring)
    rows, cols = ring.nodes(grid)
    active = np.flatnonzero(ring.active_mask)
    rows, cols = rows[active], cols[active]

    solver = WaveSolver(grid)
    u0 = embed(p0, grid)
    samples = np.empty((len(active), nt))
    samples[:, 0] = u0[rows, cols]
    st = solver.start(u0)
    for n in range(1, nt):
        samples[:, n] = st.p[rows, cols]
        if callback is not None:
            callback(n, solver, st)
        if n < nt - 1:
            solver.step(st)
    return SinogramRecord(samples, grid.dt, [int(i) for i in active], grid.to_dict(), ring.provenance())


def sparse_subsample(sino: SinogramRecord, keep_every: int) -> SinogramRecord:
    """Keep the rows whose detector index is a multiple of ``keep_every``."""
    n_det = sino.ring["num_detectors"]
    if keep_every < 1 or n_det % keep_every:
        raise SimulationError(f"keep_every={keep_every} does not divide {n_det} detectors")
    keep = [r for r, d in enumerate(sino.detector_indices) if d % keep_every == 0]
    return SinogramRecord(
        sino.samples[keep].copy(),
        sino.dt,
        [sino.detector_indices[r] for r in keep],
        dict(sino.grid),
        dict(sino.ring),
        sino.keep_every * keep_every,
    )


def _check_provenance(sino: SinogramRecord, grid: AcousticGrid, ring: DetectorRing):
    g = grid.to_dict()
    for key in ("nx", "ny", "dx", "c", "dt", "damping_width", "region_extent"):
        if not math.isclose(float(sino.grid[key]), float(g[key]), rel_tol=1e-12):
            raise SimulationError(f"sinogram grid {key}={sino.grid[key]} does not match {g[key]}")
    if sino.ring != ring.provenance():
        raise SimulationError(f"sinogram ring {sino.ring} does not match {ring.provenance()}")


def time_reversal(sino: SinogramRecord, grid: AcousticGrid, ring: DetectorRing, normalize=True):
    """Re-inject the reversed recordings as Dirichlet values and return the t=0 field.

    Only detectors that are both present in ``sino`` and active in ``ring``
    are used.  The result is cropped to the imaging region, clamped at zero
    and (by default) scaled to [0, 1].
    """
    _check_provenance(sino, grid, ring)
    rows_all, cols_all = ring.nodes(grid)
    use = [r for r, d in enumerate(sino.detector_indices) if ring.active_mask[d]]
    det = np.array([sino.detector_indices[r] for r in use], dtype=int)
    data = sino.samples[use]
    rows, cols = rows_all[det], cols_all[det]
    nt = sino.num_timesteps

    solver = WaveSolver(grid)
    st = solver.zeros()
    st.set_pressure(rows, cols, data[:, nt - 1])
    for n in range(nt - 2, -1, -1):
        solver.step(st)
        st.set_pressure(rows, cols, data[:, n])

    cur = st.p
    img = np.maximum(cur[grid.region_slices()], 0.0)
    if normalize:
        peak = img.max()
        if peak > 0:
            img = img / peak
    return img


PRESETS = {
    "vessels-desk": {"image_size": 128, "grid_points": 256, "damping_width": 20, "num_detectors": 128},
    "toy64": {"image_size": 64, "grid_points": 128, "damping_width": 8, "num_detectors": 128},
    "ring45": {"image_size": 128, "ring_radius": 0.045, "damping_width": 20, "num_detectors": 512},
}


def make_geometry(preset="vessels-desk", **overrides):
    """Build ``(grid, ring)`` for a named preset.

    Desk presets put the 10 mm region on the central ``image_size`` nodes of a
    grid twice as wide and set the ring radius to grid width / 2.4.
    ``ring45`` uses a 45 mm ring, growing the grid to fit.
    """
    if preset not in PRESETS:
        raise SimulationError(f"unknown simulation preset {preset!r}; expected one of {sorted(PRESETS)}")
    p = dict(PRESETS[preset], **overrides)
    extent = p.get("region_extent", 0.010)
    size = p["image_size"]
    dx = extent / size
    damping = p["damping_width"]
    if "ring_radius" in p:
        radius = p["ring_radius"]
        n = 2 * (int(math.ceil(radius / dx)) + damping + 4)
    else:
        n = p["grid_points"]
        radius = p.get("ring_radius_factor", 1 / 2.4) * n * dx
    grid = AcousticGrid(
        nx=n, ny=n, dx=dx, c=p.get("c", 1500.0), damping_width=damping, region_extent=extent,
        cfl=p.get("cfl", 0.6), sponge_strength=p.get("sponge_strength", 2.0),
    )
    ring = DetectorRing(p["num_detectors"], radius)
    validate_geometry(grid, ring)
    return grid, ring
