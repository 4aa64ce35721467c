"""Toy mass-spring cloth simulator and restricted random data generation.

Semi-implicit Euler over a stretch/shear/bend spring grid (same pattern the
refinement prior uses), with floor contact by projection, viscous surface
friction, and a light vertex-vertex penalty keeping folded layers apart.
Tuned for stability and speed, not material fidelity.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import grasp as graspmod
from . import manip as manipmod
from . import mesh
from .manip import Manipulation
from .mesh import WorkspaceConfig
from .refine import SpringSet, build_springs

log = logging.getLogger(__name__)

SPRING_STIFF_BY_KIND = ("stretch", "shear", "bend")


@dataclass(frozen=True)
class SimParams:
    """Stable preset for the desk-scale world (R=16, dt=0.008).

    The timestep keeps dt * sqrt(k_total / mass) inside the symplectic-Euler
    stability region for the default stiffnesses; damping acts on relative
    velocity along each spring so free fall is not throttled.
    """

    stretch: float = 300.0
    shear: float = 60.0
    bend: float = 12.0
    damping: float = 3.0        # per-spring relative-velocity damping
    air_drag: float = 0.4
    gravity: float = 0.5
    friction: float = 30.0
    contact_penalty: float = 400.0
    timestep: float = 0.008
    settle_speed: float = 0.02
    settle_max_steps: int = 2500
    mass: float = 1.0
    layer_stiffness: float = 120.0   # vertex-vertex penalty between layers
    layer_distance: float = 0.012
    contact_band: float = 0.004
    substeps_per_waypoint: int = 16


@dataclass
class SequenceRecord:
    """One generated manipulation sequence; states are raw workspace meshes."""

    states: np.ndarray                 # (n_steps+1, R, R, 3)
    manipulations: list[Manipulation]  # length n_steps
    centres: np.ndarray                # (n_steps+1, 2) silhouette centroids
    seed: int
    flags: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.manipulations)


class SimulationError(RuntimeError):
    pass


def _spring_stiffness(params: SimParams, springs: SpringSet) -> np.ndarray:
    table = np.array([params.stretch, params.shear, params.bend])
    return table[springs.kind]


def _nonneighbour_pairs(r: int) -> tuple[np.ndarray, np.ndarray]:
    """Upper-triangle vertex pairs beyond Chebyshev grid distance 2 (pairs
    already held apart by springs are excluded from layer contact)."""
    ii, jj = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")
    gi = ii.ravel()
    gj = jj.ravel()
    ai, bi = np.triu_indices(r * r, k=1)
    far = np.maximum(np.abs(gi[ai] - gi[bi]), np.abs(gj[ai] - gj[bi])) > 2
    return ai[far], bi[far]


def _scatter_pairs(n: int, ai, bi, fv) -> np.ndarray:
    out = np.empty((n, 3))
    for c in range(3):
        out[:, c] = (np.bincount(ai, fv[:, c], minlength=n)
                     - np.bincount(bi, fv[:, c], minlength=n))
    return out


class ClothSim:
    """Mass-spring cloth over a flat work surface at z = 0."""

    def __init__(self, cfg: WorkspaceConfig, params: SimParams | None = None):
        self.cfg = cfg
        self.params = params or SimParams()
        self.springs = build_springs(cfg)
        self.stiff = _spring_stiffness(self.params, self.springs)
        self._pair_a, self._pair_b = _nonneighbour_pairs(cfg.mesh_res)

    # -- forces -------------------------------------------------------------

    def _forces(self, pos: np.ndarray, vel: np.ndarray) -> np.ndarray:
        p = self.params
        s = self.springs
        n = pos.shape[0]
        d = pos[s.a] - pos[s.b]
        l = np.sqrt((d * d).sum(axis=1))
        safe = np.maximum(l, 1e-12)
        unit = d / safe[:, None]
        coef = -self.stiff * (l - s.rest)
        rel_v = ((vel[s.a] - vel[s.b]) * unit).sum(axis=1)
        fs = (coef - p.damping * rel_v)[:, None] * unit
        f = _scatter_pairs(n, s.a, s.b, fs)

        f[:, 2] -= p.mass * p.gravity
        f -= p.air_drag * vel
        below = pos[:, 2] < 0.0
        f[below, 2] -= p.contact_penalty * pos[below, 2]

        if p.layer_stiffness > 0.0:
            f += self._layer_forces(pos)
        return f

    def _layer_forces(self, pos: np.ndarray) -> np.ndarray:
        p = self.params
        ai, bi = self._pair_a, self._pair_b
        d = pos[ai] - pos[bi]
        d2 = (d * d).sum(axis=1)
        hit = d2 < p.layer_distance ** 2
        f = np.zeros_like(pos)
        if not hit.any():
            return f
        ai, bi, d = ai[hit], bi[hit], d[hit]
        dist = np.sqrt(d2[hit])
        unit = np.where(dist[:, None] > 1e-9, d / np.maximum(dist, 1e-9)[:, None],
                        np.array([0.0, 0.0, 1.0]))
        push = p.layer_stiffness * (p.layer_distance - dist)
        return f + _scatter_pairs(pos.shape[0], ai, bi, push[:, None] * unit)

    # -- integration --------------------------------------------------------

    def step(self, pos, vel, pinned_idx=None, pinned_pos=None, pinned_vel=None):
        p = self.params
        f = self._forces(pos, vel)
        vel = vel + (p.timestep / p.mass) * f
        pos = pos + p.timestep * vel
        # floor projection: inelastic, with viscous friction in the band
        below = pos[:, 2] < 0.0
        pos[below, 2] = 0.0
        vel[below, 2] = np.maximum(vel[below, 2], 0.0)
        contact = pos[:, 2] < p.contact_band
        fric = max(0.0, 1.0 - p.friction * p.timestep)
        vel[contact, 0] *= fric
        vel[contact, 1] *= fric
        if pinned_idx is not None:
            pos[pinned_idx] = pinned_pos
            vel[pinned_idx] = pinned_vel
        return pos, vel

    def energy(self, pos: np.ndarray, vel: np.ndarray) -> float:
        p = self.params
        s = self.springs
        kin = 0.5 * p.mass * (vel * vel).sum()
        pot = p.mass * p.gravity * pos[:, 2].sum()
        l = np.sqrt(((pos[s.a] - pos[s.b]) ** 2).sum(axis=1))
        el = 0.5 * (self.stiff * (l - s.rest) ** 2).sum()
        return float(kin + pot + el)


def settle(state: np.ndarray, params: SimParams | None = None,
           cfg: WorkspaceConfig | None = None, sim: ClothSim | None = None,
           vel: np.ndarray | None = None, return_info: bool = False):
    """Integrate until the fastest vertex drops below the speed threshold.

    Non-convergence at the step cap returns the current state flagged
    unstable.
    """
    if sim is None:
        sim = ClothSim(cfg, params)
    p = sim.params
    pos = np.asarray(state, dtype=float).reshape(-1, 3).copy()
    v = np.zeros_like(pos) if vel is None else vel.reshape(-1, 3).copy()
    converged = False
    steps = 0
    for steps in range(1, p.settle_max_steps + 1):
        pos, v = sim.step(pos, v)
        speed = np.sqrt((v * v).sum(axis=1)).max()
        if not np.isfinite(speed):
            break
        if speed < p.settle_speed:
            converged = True
            break
    out = pos.reshape(np.asarray(state).shape)
    if not converged:
        log.warning("settle: no convergence in %d steps", steps)
    if return_info:
        return out, {"converged": bool(converged), "steps": steps,
                     "stable": bool(converged and np.isfinite(out).all())}
    return out


def _grasp_vertex_index(state: np.ndarray, uv) -> int:
    r = state.shape[0]
    j = int(round((uv[0] + 1.0) / 2.0 * (r - 1)))
    i = int(round((uv[1] + 1.0) / 2.0 * (r - 1)))
    return int(np.clip(i, 0, r - 1) * r + np.clip(j, 0, r - 1))


def execute_manipulation(state: np.ndarray, m: Manipulation,
                         params: SimParams | None = None,
                         cfg: WorkspaceConfig | None = None,
                         sim: ClothSim | None = None,
                         return_info: bool = False):
    """Grasp, drag along the arc trajectories, release, settle.

    Null manipulations settle the input unchanged.  Grasped vertices are
    kinematically constrained to their waypoints.
    """
    if sim is None:
        sim = ClothSim(cfg, params)
    cfg = sim.cfg
    p = sim.params
    if manipmod.is_null(m, cfg):
        return settle(state, sim=sim, return_info=return_info)

    r1, r2, _ = manipmod.release_points(state, m)
    idx = [_grasp_vertex_index(state, m.g1)]
    targets = [manipmod.build_trajectory(
        mesh.geodesic_to_cartesian(state, m.g1), r1)]
    if m.g2 is not None:
        i2 = _grasp_vertex_index(state, m.g2)
        if i2 != idx[0]:
            idx.append(i2)
            targets.append(manipmod.build_trajectory(
                mesh.geodesic_to_cartesian(state, m.g2), r2))

    pos = np.asarray(state, dtype=float).reshape(-1, 3).copy()
    vel = np.zeros_like(pos)
    pinned = np.array(idx)
    n_way = targets[0].points.shape[0]
    sub = p.substeps_per_waypoint
    prev = np.stack([t.points[0] for t in targets])
    for w in range(1, n_way):
        nxt = np.stack([t.points[w] for t in targets])
        for s_i in range(1, sub + 1):
            frac = s_i / sub
            target = prev + frac * (nxt - prev)
            tvel = (nxt - prev) / (sub * p.timestep)
            pos, vel = sim.step(pos, vel, pinned, target, tvel)
        prev = nxt
    out, info = settle(pos.reshape(np.asarray(state).shape), sim=sim,
                       vel=vel, return_info=True)
    if return_info:
        return out, info
    return out


# ---------------------------------------------------------------------------
# Restricted random data generation
# ---------------------------------------------------------------------------

SINGLE_FRACTION = 1.0 / 3.0   # single : dual = 1 : 2
REJECTION_BUDGET = 200
MAX_SEQUENCE_RESTARTS = 8


def sample_displacement(rng: np.random.Generator, cfg: WorkspaceConfig,
                        lo: float = manipmod.NULL_FACTOR, hi: float = 1.0):
    """Uniform direction; magnitude uniform on [lo, hi] * cloth_side."""
    theta = rng.uniform(0.0, 2.0 * np.pi)
    mag = rng.uniform(lo, hi) * cfg.cloth_side
    return (float(mag * np.cos(theta)), float(mag * np.sin(theta)))


def _sample_manipulation(rng, state, cands, silhouette, cfg):
    """One rejection-sampling attempt; returns a Manipulation or None."""
    single = rng.random() < SINGLE_FRACTION or len(cands.points) < 2
    if single:
        g1 = cands.points[rng.integers(len(cands.points))]
        m = Manipulation(tuple(g1), None, sample_displacement(rng, cfg))
    else:
        k1, k2 = rng.choice(len(cands.points), size=2, replace=False)
        m = Manipulation(tuple(cands.points[k1]), tuple(cands.points[k2]),
                         sample_displacement(rng, cfg))
    if not manipmod.fold_restriction_ok(state, m, cfg, silhouette=silhouette):
        return None
    if m.g2 is not None:
        _, _, acute = manipmod.release_points(state, m)
        if acute:
            return None
    return m


def gen_sequence(rng: np.random.Generator, cfg: WorkspaceConfig,
                 params: SimParams, n_steps: int = 3,
                 seed: int | None = None,
                 sim: ClothSim | None = None) -> SequenceRecord:
    """Generate one manipulation sequence from the flat start state.

    Every emitted manipulation satisfies the graspability, fold, and
    displacement restrictions; dual-handed draws additionally reject
    grasp points on different sides of the mirror line.
    """
    if sim is None:
        sim = ClothSim(cfg, params)
    for restart in range(MAX_SEQUENCE_RESTARTS):
        states = [mesh.flat_cloth(cfg)]
        manips: list[Manipulation] = []
        failed = False
        for _ in range(n_steps):
            state = states[-1]
            cands = graspmod.candidates(state, cfg)
            silhouette = mesh.silhouette_mask(state, cfg)
            m = None
            for _ in range(REJECTION_BUDGET):
                m = _sample_manipulation(rng, state, cands, silhouette, cfg)
                if m is not None:
                    break
            if m is None:
                log.info("gen_sequence: rejection budget exceeded, restarting")
                failed = True
                break
            nxt, info = execute_manipulation(state, m, sim=sim, return_info=True)
            if not info["stable"]:
                log.info("gen_sequence: unstable execution, restarting")
                failed = True
                break
            states.append(nxt)
            manips.append(m)
        if not failed:
            centres = np.stack([mesh.silhouette_centroid(s, cfg) for s in states])
            return SequenceRecord(np.stack(states), manips, centres,
                                  seed if seed is not None else -1,
                                  {"restarts": restart})
    raise SimulationError("sequence generation kept failing; check sim preset")


def gen_dataset(n_sequences: int, master_seed: int, cfg: WorkspaceConfig,
                params: SimParams | None = None, n_steps: int = 3,
                threads: int = 1) -> list[SequenceRecord]:
    """Independent sequences with per-sequence RNG streams derived from the
    master seed; results do not depend on the thread count."""
    params = params or SimParams()
    children = np.random.SeedSequence(master_seed).spawn(n_sequences)
    records: list = [None] * n_sequences

    def work(i: int):
        rng = np.random.default_rng(children[i])
        sim = ClothSim(cfg, params)
        records[i] = gen_sequence(rng, cfg, params, n_steps,
                                  seed=int(children[i].entropy), sim=sim)
        records[i].seed = i

    if threads <= 1:
        for i in range(n_sequences):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(work, range(n_sequences)))
    return records


# ---------------------------------------------------------------------------
# Closed-loop environment
# ---------------------------------------------------------------------------

class SimEnv:
    """Wraps a live simulator state behind the observe/execute interface the
    planner uses; observation emulates a top-down depth camera."""

    def __init__(self, initial_state: np.ndarray, cfg: WorkspaceConfig,
                 params: SimParams | None = None):
        self.cfg = cfg
        self.sim = ClothSim(cfg, params)
        self.state = np.asarray(initial_state, dtype=float).copy()
        self.stable = True

    def observe(self) -> np.ndarray:
        """Centred, occluded occupancy grid of the current state."""
        pts = mesh.upsample_mesh(self.state)
        shift = mesh.integer_center_shift(pts, self.cfg)
        shifted = pts.copy()
        shifted[..., 0] -= shift[0]
        shifted[..., 1] -= shift[1]
        return mesh.voxelize(shifted, upsample=False, occlude=True, cfg=self.cfg)

    def execute(self, m: Manipulation) -> np.ndarray:
        out, info = execute_manipulation(self.state, m, sim=self.sim,
                                         return_info=True)
        self.state = out
        if not info["stable"]:
            self.stable = False
        return out.copy()
