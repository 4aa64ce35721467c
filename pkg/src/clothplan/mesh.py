"""Cloth shape representations and the geometry that ties them together.

A deterministic mesh (DMR) is an (R, R, 3) float array of vertex positions;
axis 0 runs along geodesic v, axis 1 along geodesic u, both in [-1, 1].
A probabilistic mesh (PMR) stores a per-vertex diagonal Gaussian.  Voxel
grids are binary (X, Y, Z) occupancy arrays over a fixed viewport.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

WHITEN_EPS = 1e-6  # std floor for degenerate dimensions (flat cloth has zero z-std)


@dataclass(frozen=True)
class WorkspaceConfig:
    """Fixed workspace geometry shared by simulator, nets, and metrics."""

    mesh_res: int = 32
    voxel_dims: tuple[int, int, int] = (32, 32, 16)
    viewport_min: tuple[float, float, float] = (-1.0, -1.0, 0.0)
    viewport_max: tuple[float, float, float] = (1.0, 1.0, 0.125)
    cloth_half_span: float = 0.7

    @property
    def cloth_side(self) -> float:
        return 2.0 * self.cloth_half_span

    @property
    def spacing(self) -> float:
        """Distance between orthogonally neighbouring vertices on the flat cloth."""
        return self.cloth_side / (self.mesh_res - 1)

    @property
    def cell_sizes(self) -> tuple[float, float, float]:
        lo, hi, dims = self.viewport_min, self.viewport_max, self.voxel_dims
        return tuple((hi[k] - lo[k]) / dims[k] for k in range(3))

    def scaled(self, mesh_res: int) -> "WorkspaceConfig":
        """Same viewport, voxel resolution scaled with the mesh resolution."""
        f = mesh_res / self.mesh_res
        vd = tuple(max(2, int(round(d * f))) for d in self.voxel_dims)
        return WorkspaceConfig(mesh_res, vd, self.viewport_min, self.viewport_max,
                               self.cloth_half_span)


def paper_config() -> WorkspaceConfig:
    return WorkspaceConfig()


def desk_config() -> WorkspaceConfig:
    return WorkspaceConfig(mesh_res=16, voxel_dims=(16, 16, 8))


@dataclass
class PMR:
    """Probabilistic mesh: per-vertex independent Gaussians, diagonal covariance."""

    mu: np.ndarray      # (R, R, 3)
    sigma: np.ndarray   # (R, R, 3), strictly positive

    @property
    def res(self) -> int:
        return self.mu.shape[0]

    def copy(self) -> "PMR":
        return PMR(self.mu.copy(), self.sigma.copy())


@dataclass
class CentredShape:
    """Shape with its XY position split off; shape itself is centred at (0, 0)."""

    shape: np.ndarray | PMR
    centre: np.ndarray  # (2,)


def flat_cloth(cfg: WorkspaceConfig) -> np.ndarray:
    """Fully spread, axis-aligned cloth resting on the work surface."""
    r = cfg.mesh_res
    g = np.linspace(-cfg.cloth_half_span, cfg.cloth_half_span, r)
    verts = np.zeros((r, r, 3))
    verts[:, :, 0] = g[None, :]   # x follows u (axis 1)
    verts[:, :, 1] = g[:, None]   # y follows v (axis 0)
    return verts


def geodesic_grid(res: int) -> np.ndarray:
    """Geodesic coordinate values for grid indices 0..res-1."""
    return np.linspace(-1.0, 1.0, res)


# ---------------------------------------------------------------------------
# Geodesic <-> Cartesian mapping
# ---------------------------------------------------------------------------

def geodesic_to_cartesian(dmr: np.ndarray, uv) -> np.ndarray:
    """Bilinear interpolation of a geodesic point over the four surrounding vertices."""
    r = dmr.shape[0]
    u = min(max(float(uv[0]), -1.0), 1.0)
    v = min(max(float(uv[1]), -1.0), 1.0)
    gx = (u + 1.0) / 2.0 * (r - 1)   # column coordinate
    gy = (v + 1.0) / 2.0 * (r - 1)   # row coordinate
    j0 = min(int(np.floor(gx)), r - 2)
    i0 = min(int(np.floor(gy)), r - 2)
    fx = gx - j0
    fy = gy - i0
    p = ((1 - fy) * (1 - fx) * dmr[i0, j0]
         + (1 - fy) * fx * dmr[i0, j0 + 1]
         + fy * (1 - fx) * dmr[i0 + 1, j0]
         + fy * fx * dmr[i0 + 1, j0 + 1])
    return np.asarray(p, dtype=float)


def cartesian_to_geodesic(dmr: np.ndarray, p) -> tuple[float, float]:
    """Geodesic coordinates of the Euclidean-nearest vertex.

    Ties break toward the lowest (row, col) index.
    """
    d2 = np.sum((dmr - np.asarray(p, dtype=float)) ** 2, axis=2)
    i, j = np.unravel_index(int(np.argmin(d2)), d2.shape)
    g = geodesic_grid(dmr.shape[0])
    return float(g[j]), float(g[i])


# ---------------------------------------------------------------------------
# Silhouette rasterisation and centring
# ---------------------------------------------------------------------------

def upsample_mesh(verts: np.ndarray) -> np.ndarray:
    """Double mesh resolution by bilinear subdivision: R -> 2R-1."""
    a = np.asarray(verts, dtype=float)
    # interpolate along axis 0, then axis 1
    mid0 = 0.5 * (a[:-1] + a[1:])
    r0 = np.empty((2 * a.shape[0] - 1,) + a.shape[1:], dtype=float)
    r0[0::2] = a
    r0[1::2] = mid0
    mid1 = 0.5 * (r0[:, :-1] + r0[:, 1:])
    out = np.empty((r0.shape[0], 2 * r0.shape[1] - 1) + a.shape[2:], dtype=float)
    out[:, 0::2] = r0
    out[:, 1::2] = mid1
    return out


def points_to_cells_xy(pts_xy: np.ndarray, cfg: WorkspaceConfig) -> np.ndarray:
    """Map workspace XY points to voxel-grid XY cell indices (clipped)."""
    lo = np.asarray(cfg.viewport_min[:2])
    dx, dy, _ = cfg.cell_sizes
    ij = np.floor((pts_xy - lo) / np.array([dx, dy])).astype(int)
    ij[:, 0] = np.clip(ij[:, 0], 0, cfg.voxel_dims[0] - 1)
    ij[:, 1] = np.clip(ij[:, 1], 0, cfg.voxel_dims[1] - 1)
    return ij


_TRI_OFFSETS_CACHE: dict[int, np.ndarray] = {}


def _tri_offsets(span: int) -> np.ndarray:
    if span not in _TRI_OFFSETS_CACHE:
        ax = np.arange(span)
        _TRI_OFFSETS_CACHE[span] = np.stack(
            np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
    return _TRI_OFFSETS_CACHE[span]


def _fill_triangles(mask: np.ndarray, tris: np.ndarray, cfg: WorkspaceConfig) -> None:
    """Mark every cell whose centre falls inside (or on) one of the XY triangles."""
    nx, ny = cfg.voxel_dims[:2]
    lo = np.asarray(cfg.viewport_min[:2])
    dx, dy, _ = cfg.cell_sizes
    cell = np.array([dx, dy])

    cmin = np.floor((tris.min(axis=1) - lo) / cell).astype(int)
    cmax = np.floor((tris.max(axis=1) - lo) / cell).astype(int)
    span = int(max(2, (cmax - cmin).max() + 1))
    if span > 16:
        # extremely stretched faces: scan their bounding boxes one by one
        wide = (cmax - cmin).max(axis=1) + 1 > 16
        for t, w_lo, w_hi in zip(tris[wide], cmin[wide], cmax[wide]):
            _scan_triangle(mask, t, w_lo, w_hi, lo, cell, nx, ny)
        tris, cmin, cmax = tris[~wide], cmin[~wide], cmax[~wide]
        if len(tris) == 0:
            return
        span = int(max(2, (cmax - cmin).max() + 1))

    offs = _tri_offsets(span)                       # (S, 2)
    cells = cmin[:, None, :] + offs[None, :, :]     # (T, S, 2)
    valid = ((cells[..., 0] >= 0) & (cells[..., 0] < nx)
             & (cells[..., 1] >= 0) & (cells[..., 1] < ny)
             & (cells[..., 0] <= cmax[:, None, 0])
             & (cells[..., 1] <= cmax[:, None, 1]))
    centres = lo + (cells + 0.5) * cell             # (T, S, 2)

    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    def cross(p, q, x):
        return ((q[..., 0] - p[..., 0]) * (x[..., 1] - p[..., 1])
                - (q[..., 1] - p[..., 1]) * (x[..., 0] - p[..., 0]))
    d0 = cross(a[:, None], b[:, None], centres)
    d1 = cross(b[:, None], c[:, None], centres)
    d2 = cross(c[:, None], a[:, None], centres)
    inside = ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))
    hit = valid & inside
    if hit.any():
        flat = cells[hit]
        mask[flat[:, 0], flat[:, 1]] = True


def _scan_triangle(mask, tri, c_lo, c_hi, lo, cell, nx, ny):
    xs = np.arange(max(c_lo[0], 0), min(c_hi[0], nx - 1) + 1)
    ys = np.arange(max(c_lo[1], 0), min(c_hi[1], ny - 1) + 1)
    if len(xs) == 0 or len(ys) == 0:
        return
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    centres = lo + (np.stack([gx, gy], axis=-1) + 0.5) * cell
    a, b, c = tri
    def cross(p, q, x):
        return ((q[0] - p[0]) * (x[..., 1] - p[1])
                - (q[1] - p[1]) * (x[..., 0] - p[0]))
    d0, d1, d2 = cross(a, b, centres), cross(b, c, centres), cross(c, a, centres)
    inside = ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))
    mask[gx[inside], gy[inside]] = True


def silhouette_mask(dmr: np.ndarray, cfg: WorkspaceConfig, upsample: bool = True) -> np.ndarray:
    """Top-down silhouette raster at voxel XY resolution, (X, Y) boolean.

    The footprint of the (optionally upsampled) mesh is filled via its quad
    faces; vertex cells are marked too so folds that project to line segments
    remain visible.
    """
    verts = upsample_mesh(dmr) if upsample else np.asarray(dmr, dtype=float)
    mask = np.zeros(cfg.voxel_dims[:2], dtype=bool)
    ij = points_to_cells_xy(verts[:, :, :2].reshape(-1, 2), cfg)
    mask[ij[:, 0], ij[:, 1]] = True

    xy = verts[:, :, :2]
    q00 = xy[:-1, :-1].reshape(-1, 2)
    q01 = xy[:-1, 1:].reshape(-1, 2)
    q11 = xy[1:, 1:].reshape(-1, 2)
    q10 = xy[1:, :-1].reshape(-1, 2)
    tris = np.concatenate([
        np.stack([q00, q01, q11], axis=1),
        np.stack([q00, q11, q10], axis=1),
    ])
    _fill_triangles(mask, tris, cfg)
    return mask


def silhouette_centroid(dmr: np.ndarray, cfg: WorkspaceConfig) -> np.ndarray:
    """Mean XY position of the occupied silhouette pixels (cell centres)."""
    mask = silhouette_mask(dmr, cfg)
    idx = np.argwhere(mask)
    if len(idx) == 0:
        return np.zeros(2)
    lo = np.asarray(cfg.viewport_min[:2])
    dx, dy, _ = cfg.cell_sizes
    return lo + (idx.mean(axis=0) + 0.5) * np.array([dx, dy])


def center_shape(dmr: np.ndarray, cfg: WorkspaceConfig) -> CentredShape:
    """Split a mesh into a centred shape and its silhouette-pixel centre point."""
    centre = silhouette_centroid(dmr, cfg)
    shifted = dmr.copy()
    shifted[:, :, 0] -= centre[0]
    shifted[:, :, 1] -= centre[1]
    return CentredShape(shifted, centre)


# ---------------------------------------------------------------------------
# Voxelisation
# ---------------------------------------------------------------------------

def integer_center_shift(points: np.ndarray, cfg: WorkspaceConfig) -> np.ndarray:
    """Workspace XY shift, in whole voxel cells, that centres the occupied
    XY footprint of a point set in the voxel grid.

    Voxel-space centring can only move the grid by whole cells; the matching
    mesh-side operation subtracts this shift before voxelisation.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    cells = points_to_cells_xy(pts[:, :2], cfg)
    occupied = np.unique(cells, axis=0)
    mid = (np.asarray(cfg.voxel_dims[:2]) - 1) / 2.0
    k = np.round(occupied.mean(axis=0) - mid)
    dx, dy, _ = cfg.cell_sizes
    return k * np.array([dx, dy])


def voxelize(dmr: np.ndarray, upsample: bool = False, occlude: bool = False,
             cfg: WorkspaceConfig | None = None) -> np.ndarray:
    """Binary occupancy grid: every voxel containing at least one vertex is 1.

    Vertices outside the viewport are clamped into the boundary cells and a
    warning is recorded.
    """
    if cfg is None:
        raise ValueError("voxelize requires a WorkspaceConfig")
    verts = upsample_mesh(dmr) if upsample else np.asarray(dmr, dtype=float)
    pts = verts.reshape(-1, 3)
    lo = np.asarray(cfg.viewport_min)
    hi = np.asarray(cfg.viewport_max)
    if (pts < lo).any() or (pts >= hi).any():
        n_out = int(((pts < lo) | (pts >= hi)).any(axis=1).sum())
        log.warning("voxelize: %d vertices outside viewport, clamping", n_out)
    cell = np.asarray(cfg.cell_sizes)
    idx = np.floor((pts - lo) / cell).astype(int)
    dims = np.asarray(cfg.voxel_dims)
    idx = np.clip(idx, 0, dims - 1)
    grid = np.zeros(cfg.voxel_dims, dtype=np.uint8)
    grid[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
    if occlude:
        grid = apply_occlusion(grid)
    return grid


def apply_occlusion(grid: np.ndarray) -> np.ndarray:
    """Fill each column below its topmost occupied voxel (top-down camera shadow)."""
    occ = grid.astype(bool)
    # reversed cumulative max along z marks everything at or below the top voxel
    filled = np.flip(np.maximum.accumulate(np.flip(occ, axis=2), axis=2), axis=2)
    return filled.astype(np.uint8)


# ---------------------------------------------------------------------------
# Cartesian-equivalence symmetry group (D4 on the geodesic index grid)
# ---------------------------------------------------------------------------

# uv maps as signed 2x2 matrices: uv' = M @ uv for the matching grid op below.
SYMMETRY_UV_MATS = np.array([
    [[1, 0], [0, 1]],     # 0: identity
    [[0, 1], [-1, 0]],    # 1: rot90 CCW        (u,v) -> (v, -u)
    [[-1, 0], [0, -1]],   # 2: rot180
    [[0, -1], [1, 0]],    # 3: rot270
    [[1, 0], [0, -1]],    # 4: flip v           (u,v) -> (u, -v)
    [[-1, 0], [0, 1]],    # 5: flip u
    [[0, 1], [1, 0]],     # 6: transpose        (u,v) -> (v, u)
    [[0, -1], [-1, 0]],   # 7: anti-transpose
], dtype=float)

SYMMETRY_INVERSE = (0, 3, 2, 1, 4, 5, 6, 7)


def apply_grid_symmetry(arr: np.ndarray, j: int) -> np.ndarray:
    """Apply D4 element j to the first two (grid) axes, values untouched."""
    if j == 0:
        out = arr
    elif j in (1, 2, 3):
        out = np.rot90(arr, k=j, axes=(0, 1))
    elif j == 4:
        out = np.flip(arr, axis=0)
    elif j == 5:
        out = np.flip(arr, axis=1)
    elif j == 6:
        out = np.swapaxes(arr, 0, 1)
    elif j == 7:
        out = np.flip(np.swapaxes(arr, 0, 1), axis=(0, 1))
    else:
        raise ValueError(f"symmetry id out of range: {j}")
    return np.ascontiguousarray(out)


def symmetry_map_uv(uv, j: int) -> np.ndarray:
    """Geodesic coordinates addressing the same material point in equivalent j."""
    return SYMMETRY_UV_MATS[j] @ np.asarray(uv, dtype=float)


def cartesian_equivalents(dmr: np.ndarray) -> list[np.ndarray]:
    """All 8 index-permuted meshes describing the identical physical shape."""
    return [apply_grid_symmetry(dmr, j) for j in range(8)]


def compose_symmetries(j: int, k: int) -> int:
    """Index of the element acting like 'apply k, then j'."""
    m = SYMMETRY_UV_MATS[j] @ SYMMETRY_UV_MATS[k]
    for idx in range(8):
        if np.array_equal(SYMMETRY_UV_MATS[idx], m):
            return idx
    raise AssertionError("D4 not closed; symmetry tables corrupted")


# ---------------------------------------------------------------------------
# Whitening
# ---------------------------------------------------------------------------

def whiten(shape, return_flags: bool = False):
    """Normalise each Cartesian dimension to zero mean, unit std.

    For a PMR the statistics come from the mu component and sigma is divided
    by the same per-dimension std.  Dimensions with std below the floor are
    clamped (flat cloth has zero z-spread) and flagged.
    """
    if isinstance(shape, PMR):
        mu = shape.mu.reshape(-1, 3)
        mean = mu.mean(axis=0)
        std = mu.std(axis=0)
        flags = std < WHITEN_EPS
        std = np.maximum(std, WHITEN_EPS)
        out = PMR(((shape.mu.reshape(-1, 3) - mean) / std).reshape(shape.mu.shape),
                  (shape.sigma.reshape(-1, 3) / std).reshape(shape.sigma.shape))
    else:
        v = np.asarray(shape, dtype=float).reshape(-1, 3)
        mean = v.mean(axis=0)
        std = v.std(axis=0)
        flags = std < WHITEN_EPS
        std = np.maximum(std, WHITEN_EPS)
        out = ((v - mean) / std).reshape(np.asarray(shape).shape)
    if return_flags:
        return out, flags
    return out
