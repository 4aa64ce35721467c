"""Candidate grasp point detection on the cloth's top-down silhouette.

Convex silhouette corners (minimum-eigenvalue corner response, non-maximum
suppression, concavity filter) are mapped to the geodesic coordinates of the
nearest top-layer vertex.  A gripper can reliably pinch exposed corners;
smooth edges and interior surface are excluded.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import mesh
from .mesh import WorkspaceConfig

log = logging.getLogger(__name__)

NMS_RADIUS = 2
RESPONSE_REL_THRESHOLD = 0.2
CONCAVITY_DISC_RADIUS = 2.5
CONCAVITY_MAX_FILL = 0.5


@dataclass
class GraspCandidates:
    points: list[tuple[float, float]]            # geodesic (u, v)
    corner_pixels: list[tuple[int, int]] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    fallback_used: bool = False


def silhouette(dmr: np.ndarray, cfg: WorkspaceConfig) -> np.ndarray:
    """Binary top-down silhouette at voxel XY resolution."""
    return mesh.silhouette_mask(dmr, cfg)


def _blur3(img: np.ndarray) -> np.ndarray:
    """Separable [1,2,1]/4 smoothing with edge replication."""
    p = np.pad(img, 1, mode="edge")
    h = (p[:, :-2] + 2.0 * p[:, 1:-1] + p[:, 2:]) / 4.0
    return (h[:-2] + 2.0 * h[1:-1] + h[2:]) / 4.0


def _window_sum3(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, mode="constant")
    return (p[:-2, :-2] + p[:-2, 1:-1] + p[:-2, 2:]
            + p[1:-1, :-2] + p[1:-1, 1:-1] + p[1:-1, 2:]
            + p[2:, :-2] + p[2:, 1:-1] + p[2:, 2:])


_DISC_CACHE: dict[float, np.ndarray] = {}


def _disc_offsets(radius: float) -> np.ndarray:
    if radius not in _DISC_CACHE:
        r = int(np.floor(radius))
        ax = np.arange(-r, r + 1)
        ox, oy = np.meshgrid(ax, ax, indexing="ij")
        keep = ox * ox + oy * oy <= radius * radius
        _DISC_CACHE[radius] = np.stack([ox[keep], oy[keep]], axis=1)
    return _DISC_CACHE[radius]


def corner_response(image: np.ndarray) -> np.ndarray:
    """Minimum eigenvalue of the 3x3-windowed structure tensor."""
    img = _blur3(image.astype(float))
    ix = np.zeros_like(img)
    iy = np.zeros_like(img)
    ix[1:-1, :] = (img[2:, :] - img[:-2, :]) / 2.0
    iy[:, 1:-1] = (img[:, 2:] - img[:, :-2]) / 2.0
    sxx = _window_sum3(ix * ix)
    syy = _window_sum3(iy * iy)
    sxy = _window_sum3(ix * iy)
    mean = (sxx + syy) / 2.0
    sq = np.sqrt(((sxx - syy) / 2.0) ** 2 + sxy * sxy)
    return mean - sq


def _occupied_fraction(image: np.ndarray, px: int, py: int) -> float:
    offs = _disc_offsets(CONCAVITY_DISC_RADIUS)
    xs = px + offs[:, 0]
    ys = py + offs[:, 1]
    ok = (xs >= 0) & (xs < image.shape[0]) & (ys >= 0) & (ys < image.shape[1])
    vals = image[xs[ok], ys[ok]]
    return float(vals.mean()) if len(vals) else 1.0


def detect_corners(image: np.ndarray) -> list[tuple[int, int]]:
    """Convex corner pixels of a binary silhouette, deterministically ordered.

    Non-maximum suppression runs greedily from the strongest response;
    concave corners are discarded when the surrounding disc is mostly
    occupied.
    """
    if not image.any():
        return []
    resp = corner_response(image)
    resp[~image.astype(bool)] = 0.0  # anchor corners on occupied pixels
    peak = resp.max()
    if peak <= 0.0:
        return []
    cand = np.argwhere(resp >= RESPONSE_REL_THRESHOLD * peak)
    if len(cand) == 0:
        return []
    scores = resp[cand[:, 0], cand[:, 1]]
    order = np.lexsort((cand[:, 1], cand[:, 0], -scores))
    kept: list[tuple[int, int]] = []
    for k in order:
        px, py = int(cand[k, 0]), int(cand[k, 1])
        if any((px - qx) ** 2 + (py - qy) ** 2 <= NMS_RADIUS ** 2
               for qx, qy in kept):
            continue
        if _occupied_fraction(image, px, py) >= CONCAVITY_MAX_FILL:
            continue
        kept.append((px, py))
    kept.sort()
    return kept


def _pixel_to_workspace(px: int, py: int, cfg: WorkspaceConfig) -> np.ndarray:
    dx, dy, _ = cfg.cell_sizes
    lo = np.asarray(cfg.viewport_min[:2])
    return lo + (np.array([px, py]) + 0.5) * np.array([dx, dy])


def _extreme_pixels(image: np.ndarray) -> list[tuple[int, int]]:
    occ = np.argwhere(image)
    out = []
    for axis, pick in ((0, np.argmin), (0, np.argmax), (1, np.argmin), (1, np.argmax)):
        vals = occ[:, axis]
        target = vals[pick(vals)]
        sel = occ[vals == target]
        sel = sel[np.lexsort((sel[:, 1], sel[:, 0]))]
        out.append((int(sel[0, 0]), int(sel[0, 1])))
    return sorted(set(out))


TOP_LAYER_Z_TOL = 5e-3


def _nearest_top_vertex(dmr: np.ndarray, xy: np.ndarray, cfg: WorkspaceConfig) -> tuple[int, int]:
    """Vertex index whose XY is within one cell of the corner, preferring the
    highest z (a gripper grasps the visible layer); near-ties on z resolve to
    the XY-nearest vertex."""
    dx, dy, _ = cfg.cell_sizes
    v = dmr.reshape(-1, 3)
    near = (np.abs(v[:, 0] - xy[0]) <= dx) & (np.abs(v[:, 1] - xy[1]) <= dy)
    if near.any():
        pool = np.nonzero(near)[0]
        top = pool[v[pool, 2] >= v[pool, 2].max() - TOP_LAYER_Z_TOL]
        d2 = (v[top, 0] - xy[0]) ** 2 + (v[top, 1] - xy[1]) ** 2
        flat = int(top[np.argmin(d2)])
    else:
        flat = int(np.argmin((v[:, 0] - xy[0]) ** 2 + (v[:, 1] - xy[1]) ** 2))
    r = dmr.shape[0]
    return int(flat // r), int(flat % r)


def candidates(dmr: np.ndarray, cfg: WorkspaceConfig) -> GraspCandidates:
    """Graspable point set for a cloth shape, as geodesic coordinates.

    Falls back to the silhouette's four extreme boundary pixels when corner
    detection returns nothing, so the set is never empty; the fallback is
    flagged for failure analysis.
    """
    img = silhouette(dmr, cfg)
    pix = detect_corners(img)
    fallback = False
    if not pix:
        if not img.any():
            raise ValueError("empty silhouette; cannot detect grasp points")
        pix = _extreme_pixels(img)
        fallback = True
        log.warning("grasp candidates: corner detection empty, using extremes")
    resp = corner_response(img)
    g = mesh.geodesic_grid(cfg.mesh_res)
    seen = set()
    pts, scores = [], []
    for px, py in pix:
        i, j = _nearest_top_vertex(dmr, _pixel_to_workspace(px, py, cfg), cfg)
        if (i, j) in seen:
            continue
        seen.add((i, j))
        pts.append((float(g[j]), float(g[i])))
        scores.append(float(resp[px, py]))
    return GraspCandidates(pts, pix, scores, fallback)
