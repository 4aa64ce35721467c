"""Refinement: pull a deterministic mesh toward plausibility under a
probabilistic estimate plus a spring-based topological prior.

The spring pattern (stretch, shear, bend) matches common cloth simulation
practice and is shared with the toy simulator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import PMR, WorkspaceConfig
from .net import gaussian_nll, gaussian_nll_grads

SPRING_WEIGHT = 5000.0
UPWARD_WEIGHT = 1000.0
REFINE_STEP = 1e-3
REFINE_MAX_ITERS = 300
STABLE_WINDOW = 10
STABLE_REL_CHANGE = 1e-4


@dataclass
class SpringSet:
    """Vertex index pairs (into the flattened grid) with rest lengths."""

    a: np.ndarray            # (S,) int
    b: np.ndarray            # (S,) int
    rest: np.ndarray         # (S,) float
    kind: np.ndarray         # (S,) int: 0 stretch, 1 shear, 2 bend

    def __len__(self) -> int:
        return len(self.a)


_OFFSETS = (
    ((0, 1), 0), ((1, 0), 0),            # stretch
    ((1, 1), 1), ((1, -1), 1),           # shear
    ((0, 2), 2), ((2, 0), 2),            # bend
)


def build_springs(cfg: WorkspaceConfig) -> SpringSet:
    """Full stretch/shear/bend set over the R x R grid, boundary clipped.

    Rest lengths are the spring lengths on the flat default mesh: k for
    stretch, k*sqrt(2) for shear, 2k for bend, with k the vertex spacing.
    """
    r = cfg.mesh_res
    k = cfg.spacing
    idx = np.arange(r * r).reshape(r, r)
    a_list, b_list, rest_list, kind_list = [], [], [], []
    for (di, dj), kind in _OFFSETS:
        i0 = max(0, -di)
        i1 = r - max(0, di)
        j0 = max(0, -dj)
        j1 = r - max(0, dj)
        src = idx[i0:i1, j0:j1].ravel()
        dst = idx[i0 + di:i1 + di, j0 + dj:j1 + dj].ravel()
        a_list.append(src)
        b_list.append(dst)
        rest_list.append(np.full(len(src), k * np.hypot(di, dj)))
        kind_list.append(np.full(len(src), kind, dtype=int))
    return SpringSet(np.concatenate(a_list), np.concatenate(b_list),
                     np.concatenate(rest_list), np.concatenate(kind_list))


def spring_lengths(verts_flat: np.ndarray, springs: SpringSet) -> np.ndarray:
    d = verts_flat[springs.a] - verts_flat[springs.b]
    return np.sqrt((d * d).sum(axis=1))


def spring_energy(dmr: np.ndarray, springs: SpringSet) -> float:
    """Sum of squared deviations of spring lengths from their rest lengths."""
    v = np.asarray(dmr, dtype=float).reshape(-1, 3)
    l = spring_lengths(v, springs)
    return float(((l - springs.rest) ** 2).sum())


def spring_energy_grad(dmr: np.ndarray, springs: SpringSet) -> np.ndarray:
    """Gradient of spring_energy w.r.t. vertex positions, same shape as dmr."""
    v = np.asarray(dmr, dtype=float).reshape(-1, 3)
    d = v[springs.a] - v[springs.b]
    l = np.sqrt((d * d).sum(axis=1))
    safe = np.maximum(l, 1e-12)
    coef = 2.0 * (l - springs.rest) / safe
    f = coef[:, None] * d
    g = np.zeros_like(v)
    np.add.at(g, springs.a, f)
    np.add.at(g, springs.b, -f)
    return g.reshape(np.asarray(dmr).shape)


def upward_bias(dmr: np.ndarray, pmr: PMR) -> float:
    """Mean shortfall of mesh z below the estimate's mu_z; penalises sinking."""
    z = np.asarray(dmr, dtype=float)[..., 2]
    return float(np.maximum(0.0, pmr.mu[..., 2] - z).mean())


def upward_bias_grad(dmr: np.ndarray, pmr: PMR) -> np.ndarray:
    z = np.asarray(dmr, dtype=float)[..., 2]
    active = pmr.mu[..., 2] > z
    g = np.zeros_like(np.asarray(dmr, dtype=float))
    g[..., 2] = np.where(active, -1.0 / z.size, 0.0)
    return g


def compound_loss(verts: np.ndarray, pmr: PMR, springs: SpringSet) -> float:
    nll = float(gaussian_nll(verts.reshape(-1), pmr.mu.reshape(-1),
                             pmr.sigma.reshape(-1)))
    return (nll + SPRING_WEIGHT * spring_energy(verts, springs)
            + UPWARD_WEIGHT * upward_bias(verts, pmr))


def compound_loss_grad(verts: np.ndarray, pmr: PMR, springs: SpringSet) -> np.ndarray:
    _, _, gt = gaussian_nll_grads(verts.reshape(-1), pmr.mu.reshape(-1),
                                  pmr.sigma.reshape(-1))
    g = gt.reshape(verts.shape)
    g = g + SPRING_WEIGHT * spring_energy_grad(verts, springs)
    g = g + UPWARD_WEIGHT * upward_bias_grad(verts, pmr)
    return g


def refine(pmr: PMR, init: np.ndarray | None = None,
           springs: SpringSet | None = None,
           cfg: WorkspaceConfig | None = None,
           max_iters: int = REFINE_MAX_ITERS,
           step: float = REFINE_STEP) -> np.ndarray:
    """Search for a deterministic mesh plausible under the estimate.

    SignSGD on likelihood + weighted spring energy + upward bias, starting
    from the better of the supplied initial mesh and the estimate's mu
    component; runs until the loss stabilises or the iteration cap, and
    returns the best iterate seen.
    """
    if springs is None:
        if cfg is None:
            raise ValueError("refine needs either a SpringSet or a WorkspaceConfig")
        springs = build_springs(cfg)
    candidates = [pmr.mu.copy()]
    if init is not None:
        candidates.insert(0, np.asarray(init, dtype=float).copy())
    scored = [(compound_loss(c, pmr, springs), c) for c in candidates]
    best_loss, best = min(scored, key=lambda t: t[0])
    cur = best.copy()
    cur_loss = best_loss
    history = [cur_loss]
    for _ in range(max_iters):
        g = compound_loss_grad(cur, pmr, springs)
        cur = cur - step * np.sign(g)
        cur_loss = compound_loss(cur, pmr, springs)
        history.append(cur_loss)
        if cur_loss < best_loss:
            best_loss = cur_loss
            best = cur.copy()
        if len(history) > STABLE_WINDOW:
            prev = history[-1 - STABLE_WINDOW]
            denom = max(abs(prev), 1e-12)
            if abs(history[-1] - prev) / denom < STABLE_REL_CHANGE:
                break
    return best
