"""Manipulation representation and grasp-trajectory geometry.

A manipulation is two geodesic grasp points (the second optional) plus a 2D
Cartesian displacement vector, six scalars in total.  Release points follow
the mirror construction: for dual grasps the grasp points are reflected over
the line through p = (g1 + g2 + d) / 2 perpendicular to d.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import mesh
from .mesh import WorkspaceConfig

N_ARC = 32          # waypoints per trajectory arc
NULL_FACTOR = 0.35  # displacements below NULL_FACTOR * cloth_side are null actions
LIFT_CAP = 0.2      # release-point z never rises more than this above the grasp


@dataclass
class Manipulation:
    g1: tuple[float, float]
    g2: tuple[float, float] | None  # None = single-handed
    d: tuple[float, float]

    @property
    def dual(self) -> bool:
        return self.g2 is not None

    def as_vector(self) -> np.ndarray:
        """Six floats; a single-handed grasp is duplicated onto both slots."""
        g2 = self.g2 if self.g2 is not None else self.g1
        return np.array([self.g1[0], self.g1[1], g2[0], g2[1],
                         self.d[0], self.d[1]], dtype=float)

    @staticmethod
    def from_vector(vec, dual: bool = True) -> "Manipulation":
        v = np.asarray(vec, dtype=float)
        g2 = (float(v[2]), float(v[3])) if dual else None
        return Manipulation((float(v[0]), float(v[1])), g2, (float(v[4]), float(v[5])))

    def to_bytes(self) -> bytes:
        vec = self.as_vector().astype("<f4")
        return vec.tobytes() + struct.pack("B", 1 if self.dual else 0)

    @staticmethod
    def from_bytes(buf: bytes) -> "Manipulation":
        vec = np.frombuffer(buf[:24], dtype="<f4").astype(float)
        dual = struct.unpack("B", buf[24:25])[0] == 1
        return Manipulation.from_vector(vec, dual=dual)


BYTES_PER_MANIP = 25


def is_null(m: Manipulation, cfg: WorkspaceConfig) -> bool:
    """Sub-threshold displacements represent the do-nothing action."""
    return float(np.hypot(*m.d)) < NULL_FACTOR * cfg.cloth_side


def map_manip_to_equivalent(m: Manipulation, j: int) -> Manipulation:
    """Re-address grasp points for Cartesian equivalent j; displacement is
    a workspace vector and stays put."""
    g1 = tuple(mesh.symmetry_map_uv(m.g1, j))
    g2 = tuple(mesh.symmetry_map_uv(m.g2, j)) if m.g2 is not None else None
    return Manipulation(g1, g2, m.d)


def _lift(k: float) -> float:
    return min(LIFT_CAP, k / 2.0)


def release_points(dmr: np.ndarray, m: Manipulation):
    """Cartesian release points for each grasped hand.

    Returns (r1, r2, acute) where r2 is None for single-handed manipulations
    and acute marks dual configurations whose grasp points fall on different
    sides of the mirror line (allowed in planning, rejected in data
    generation).
    """
    d = np.asarray(m.d, dtype=float)
    dn = float(np.linalg.norm(d))
    g1c = mesh.geodesic_to_cartesian(dmr, m.g1)

    if m.g2 is None:
        if dn == 0.0:
            return g1c.copy(), None, False
        r1 = g1c.copy()
        r1[:2] += d
        r1[2] = g1c[2] + _lift(dn)
        return r1, None, False

    g2c = mesh.geodesic_to_cartesian(dmr, m.g2)
    if dn == 0.0:
        return g1c.copy(), g2c.copy(), False
    dhat = d / dn
    p = (g1c[:2] + g2c[:2] + d) / 2.0

    def reflect(g):
        off = float(np.dot(g[:2] - p, dhat))
        r = g.copy()
        r[:2] = g[:2] - 2.0 * off * dhat
        k = float(np.linalg.norm(r[:2] - g[:2]))
        r[2] = g[2] + _lift(k)
        return r, off

    r1, off1 = reflect(g1c)
    r2, off2 = reflect(g2c)
    acute = off1 * off2 < 0.0
    return r1, r2, acute


@dataclass
class Trajectory:
    grasp: np.ndarray     # (3,)
    release: np.ndarray   # (3,)
    points: np.ndarray    # (N_ARC, 3) waypoints from grasp to release


def build_trajectory(g: np.ndarray, r: np.ndarray, n_points: int = N_ARC) -> Trajectory:
    """Shorter arc of the circle centred at the grasp height, in the vertical
    plane through grasp and release, passing through both points."""
    g = np.asarray(g, dtype=float)
    r = np.asarray(r, dtype=float)
    k = float(np.linalg.norm(r[:2] - g[:2]))
    h = float(r[2] - g[2])
    t = np.linspace(0.0, 1.0, n_points)

    if k < 1e-12:
        # defensive vertical fallback; release_points never produces this
        pts = g[None, :] + t[:, None] * (r - g)[None, :]
        return Trajectory(g, r, pts)

    e = (r[:2] - g[:2]) / k
    a = (k * k + h * h) / (2.0 * k)   # centre offset along the chord = radius
    theta_r = float(np.arctan2(h, k - a))
    theta = np.pi + t * (theta_r - np.pi)
    s = a + a * np.cos(theta)
    z = g[2] + a * np.sin(theta)
    pts = np.empty((n_points, 3))
    pts[:, 0] = g[0] + s * e[0]
    pts[:, 1] = g[1] + s * e[1]
    pts[:, 2] = z
    pts[0] = g
    pts[-1] = r
    return Trajectory(g, r, pts)


def fold_reference_point(dmr: np.ndarray, m: Manipulation) -> np.ndarray:
    """Point q that must land on the cloth for a manipulation to count as a fold."""
    d = np.asarray(m.d, dtype=float)
    g1c = mesh.geodesic_to_cartesian(dmr, m.g1)
    if m.g2 is None:
        base = g1c[:2]
    else:
        g2c = mesh.geodesic_to_cartesian(dmr, m.g2)
        base = (g1c[:2] + g2c[:2]) / 2.0
    return base + 0.8 * d


def point_in_silhouette(q_xy, silhouette: np.ndarray, cfg: WorkspaceConfig) -> bool:
    lo = np.asarray(cfg.viewport_min[:2])
    hi = np.asarray(cfg.viewport_max[:2])
    q = np.asarray(q_xy, dtype=float)
    if (q < lo).any() or (q >= hi).any():
        return False
    dx, dy, _ = cfg.cell_sizes
    ix = int((q[0] - lo[0]) / dx)
    iy = int((q[1] - lo[1]) / dy)
    return bool(silhouette[ix, iy])


def fold_restriction_ok(dmr: np.ndarray, m: Manipulation, cfg: WorkspaceConfig,
                        silhouette: np.ndarray | None = None) -> bool:
    """True iff the fold reference point lands inside the cloth silhouette."""
    if silhouette is None:
        silhouette = mesh.silhouette_mask(dmr, cfg)
    return point_in_silhouette(fold_reference_point(dmr, m), silhouette, cfg)
