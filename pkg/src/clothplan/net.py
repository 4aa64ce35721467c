"""Dense feed-forward nets with hand-written forward and backward passes.

Backward produces exact reverse-mode gradients for both parameters and
inputs; the latter is what drives plan search.  Connectivity covers plain
stacks plus the three extras the forward model needs: a residual channel
copying the first ``residual_width`` units layer to layer, parameter-free
skip edges adding the first ``width`` units of an earlier layer into a later
one, and an auxiliary input slice re-appended to every hidden layer.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

SIGMA_FLOOR = 0.01
SIGMA_CLAMP = 30.0  # pre-activation clamp guarding exp overflow
LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# Architecture description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NetSpec:
    """Layer sizes include the auxiliary slice for input and hidden layers."""

    sizes: tuple[int, ...]
    activations: tuple[str, ...]             # one per non-input layer
    residual_width: int = 0
    skips: tuple[tuple[int, int, int], ...] = ()  # (source layer, target layer, width)
    aux_width: int = 0

    def __post_init__(self):
        n = len(self.sizes) - 1
        if len(self.activations) != n:
            raise ValueError("need one activation per non-input layer")
        for act in self.activations:
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation: {act}")
        for l in range(1, n + 1):
            if self.computed_width(l) <= 0:
                raise ValueError("layer narrower than its auxiliary slice")
        if self.residual_width:
            for l in range(1, n + 1):
                if self.residual_width > min(self.sizes[l - 1], self.computed_width(l)):
                    raise ValueError("residual channel wider than a layer")
        for s, d, w in self.skips:
            if not (0 <= s < d <= n):
                raise ValueError(f"bad skip edge ({s}, {d})")
            if w > min(self.sizes[s], self.computed_width(d)):
                raise ValueError("skip edge wider than its endpoints")

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def computed_width(self, l: int) -> int:
        """Units produced by layer l's affine map (aux slice excluded)."""
        if self.aux_width and l < self.n_layers:
            return self.sizes[l] - self.aux_width
        return self.sizes[l]

    def to_json(self) -> str:
        return json.dumps({
            "sizes": list(self.sizes),
            "activations": list(self.activations),
            "residual_width": self.residual_width,
            "skips": [list(s) for s in self.skips],
            "aux_width": self.aux_width,
        })

    @staticmethod
    def from_json(s: str) -> "NetSpec":
        d = json.loads(s)
        return NetSpec(tuple(d["sizes"]), tuple(d["activations"]),
                       d["residual_width"],
                       tuple(tuple(x) for x in d["skips"]), d["aux_width"])


@dataclass
class Params:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "Params":
        return Params([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "Params":
        return Params([w.astype(dtype) for w in self.weights],
                      [b.astype(dtype) for b in self.biases])

    def arrays(self):
        yield from self.weights
        yield from self.biases

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def init_params(spec: NetSpec, rng: np.random.Generator, dtype=np.float32) -> Params:
    """Uniform fan-in scaled weights, zero biases."""
    ws, bs = [], []
    for l in range(1, spec.n_layers + 1):
        fan_in = spec.sizes[l - 1]
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(spec.computed_width(l), fan_in))
        ws.append(w.astype(dtype))
        bs.append(np.zeros(spec.computed_width(l), dtype=dtype))
    return Params(ws, bs)


def zero_grads(params: Params) -> Params:
    return Params([np.zeros_like(w) for w in params.weights],
                  [np.zeros_like(b) for b in params.biases])


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def sigma_floor(a):
    """exp(a) + 0.01, clamped against overflow; output strictly above 0.01."""
    return np.exp(np.minimum(a, SIGMA_CLAMP)) + SIGMA_FLOOR


def _sigma_floor_deriv(a, y):
    return np.exp(np.minimum(a, SIGMA_CLAMP))


def _gauss6_mask(width: int) -> np.ndarray:
    # interleaved per-vertex blocks (mu_x mu_y mu_z sigma_x sigma_y sigma_z)
    m = np.zeros(width, dtype=bool)
    m.reshape(-1, 6)[:, 3:] = True
    return m


_GAUSS6_MASKS: dict[int, np.ndarray] = {}


def _get_gauss6_mask(width: int) -> np.ndarray:
    if width not in _GAUSS6_MASKS:
        _GAUSS6_MASKS[width] = _gauss6_mask(width)
    return _GAUSS6_MASKS[width]


def _gauss6(a):
    m = _get_gauss6_mask(a.shape[-1])
    out = a.copy()
    out[..., m] = sigma_floor(a[..., m])
    return out


def _gauss6_deriv(a, y):
    m = _get_gauss6_mask(a.shape[-1])
    d = np.ones_like(a)
    d[..., m] = np.exp(np.minimum(a[..., m], SIGMA_CLAMP))
    return d


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a, y: 1.0 - y * y),
    "identity": (lambda a: a, lambda a, y: np.ones_like(a)),
    "sigma_floor": (sigma_floor, _sigma_floor_deriv),
    "gauss6": (_gauss6, _gauss6_deriv),
}


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    spec: NetSpec
    params: Params
    hs: list        # layer vectors h_0 .. h_L (after residual/skip/aux)
    pres: list      # pre-activations a_1 .. a_L
    ys: list        # activation outputs before residual/skip adds


def forward(spec: NetSpec, params: Params, inputs: np.ndarray):
    """Run the net on a (batch, sizes[0]) matrix; returns (outputs, tape)."""
    x = np.atleast_2d(np.asarray(inputs))
    if x.shape[1] != spec.sizes[0]:
        raise ValueError(f"input width {x.shape[1]} != spec input {spec.sizes[0]}")
    aux = x[:, x.shape[1] - spec.aux_width:] if spec.aux_width else None
    hs = [x]
    pres = []
    ys = []
    for l in range(1, spec.n_layers + 1):
        w, b = params.weights[l - 1], params.biases[l - 1]
        a = hs[l - 1] @ w.T + b
        act, _ = _ACTIVATIONS[spec.activations[l - 1]]
        y = act(a)
        z = y.copy()
        r = spec.residual_width
        if r:
            z[:, :r] += hs[l - 1][:, :r]
        for s, d, wd in spec.skips:
            if d == l:
                z[:, :wd] += hs[s][:, :wd]
        if spec.aux_width and l < spec.n_layers:
            h = np.concatenate([z, aux], axis=1)
        else:
            h = z
        hs.append(h)
        pres.append(a)
        ys.append(y)
    return hs[-1], Tape(spec, params, hs, pres, ys)


def backward(tape: Tape, output_cotangent: np.ndarray):
    """Exact reverse-mode gradients; returns (param_grads, input_grads)."""
    spec, params = tape.spec, tape.params
    gy = np.atleast_2d(np.asarray(output_cotangent))
    batch = tape.hs[0].shape[0]
    ghs = [np.zeros_like(h) for h in tape.hs]
    ghs[-1] = gy.astype(tape.hs[-1].dtype, copy=True)
    gaux = np.zeros((batch, spec.aux_width), dtype=tape.hs[0].dtype) \
        if spec.aux_width else None
    gw = [None] * spec.n_layers
    gb = [None] * spec.n_layers
    for l in range(spec.n_layers, 0, -1):
        gh = ghs[l]
        if spec.aux_width and l < spec.n_layers:
            gz = gh[:, :spec.computed_width(l)]
            gaux += gh[:, spec.computed_width(l):]
        else:
            gz = gh
        r = spec.residual_width
        if r:
            ghs[l - 1][:, :r] += gz[:, :r]
        for s, d, wd in spec.skips:
            if d == l:
                ghs[s][:, :wd] += gz[:, :wd]
        _, dact = _ACTIVATIONS[spec.activations[l - 1]]
        ga = gz * dact(tape.pres[l - 1], tape.ys[l - 1])
        gw[l - 1] = ga.T @ tape.hs[l - 1]
        gb[l - 1] = ga.sum(axis=0)
        ghs[l - 1] += ga @ params.weights[l - 1]
    gx = ghs[0]
    if spec.aux_width:
        gx = gx.copy()
        gx[:, gx.shape[1] - spec.aux_width:] += gaux
    return Params(gw, gb), gx


# ---------------------------------------------------------------------------
# Gaussian negative log-likelihood
# ---------------------------------------------------------------------------

def gaussian_nll(target, mu, sigma):
    """Sum over coordinates of -log N(target | mu, sigma), diagonal Gaussians.

    Accepts (..., K) arrays; reduces the last axis.
    """
    t = np.asarray(target, dtype=float)
    m = np.asarray(mu, dtype=float)
    s = np.asarray(sigma, dtype=float)
    if (s <= 0).any():
        raise ValueError("gaussian_nll requires strictly positive sigma")
    z = (t - m) / s
    return (np.log(s) + 0.5 * LOG_2PI + 0.5 * z * z).sum(axis=-1)


def gaussian_nll_grads(target, mu, sigma, cot=1.0):
    """Gradients of gaussian_nll w.r.t. (mu, sigma, target)."""
    t = np.asarray(target, dtype=float)
    m = np.asarray(mu, dtype=float)
    s = np.asarray(sigma, dtype=float)
    diff = m - t
    c = np.asarray(cot, dtype=float)
    if c.ndim:
        c = c[..., None]
    gmu = c * diff / (s * s)
    gsigma = c * (1.0 / s - diff * diff / (s ** 3))
    gtarget = -gmu
    return gmu, gsigma, gtarget


# ---------------------------------------------------------------------------
# Gradient-sign optimisation
# ---------------------------------------------------------------------------

def sign_combine(grads_a: Params, grads_b: Params) -> Params:
    """Combine two gradient sets at the connection level: sign(a) + sign(b)."""
    return Params([np.sign(wa) + np.sign(wb)
                   for wa, wb in zip(grads_a.weights, grads_b.weights)],
                  [np.sign(ba) + np.sign(bb)
                   for ba, bb in zip(grads_a.biases, grads_b.biases)])


def signsgd_step(params: Params, grads: Params, lr: float) -> Params:
    return Params([(w - lr * np.sign(g)).astype(w.dtype)
                   for w, g in zip(params.weights, grads.weights)],
                  [(b - lr * np.sign(g)).astype(b.dtype)
                   for b, g in zip(params.biases, grads.biases)])


@dataclass
class IRpropState:
    delta: np.ndarray
    prev_sign: np.ndarray

    @staticmethod
    def fresh(shape, delta_init=0.05, dtype=float) -> "IRpropState":
        return IRpropState(np.full(shape, delta_init, dtype=dtype),
                           np.zeros(shape, dtype=dtype))

    def reset(self, where=None, delta_init=0.05):
        if where is None:
            self.delta[...] = delta_init
            self.prev_sign[...] = 0.0
        else:
            self.delta[where] = delta_init
            self.prev_sign[where] = 0.0


IRPROP_ETA_PLUS = 1.2
IRPROP_ETA_MINUS = 0.5
IRPROP_DELTA_MIN = 1e-3
IRPROP_DELTA_MAX = 0.05


def irprop_minus_step(state: IRpropState, grads, values,
                      eta_plus=IRPROP_ETA_PLUS, eta_minus=IRPROP_ETA_MINUS,
                      delta_min=IRPROP_DELTA_MIN, delta_max=IRPROP_DELTA_MAX):
    """One iRprop- update; mutates state, returns updated values.

    On a gradient sign change the step size halves and the gradient is
    treated as zero for this step (no value change, sign memory cleared).
    """
    g = np.asarray(grads, dtype=float)
    s = np.sign(g)
    prod = s * state.prev_sign
    grow = prod > 0
    shrink = prod < 0
    state.delta[grow] = np.minimum(state.delta[grow] * eta_plus, delta_max)
    state.delta[shrink] = np.maximum(state.delta[shrink] * eta_minus, delta_min)
    s_eff = np.where(shrink, 0.0, s)
    out = values - s_eff * state.delta
    state.prev_sign = s_eff
    return out


class LrScheduler:
    """Step-halving schedule driven by periodic validation scores.

    The rate starts at ``lr0`` and halves whenever the best validation score
    is older than ``patience`` iterations; each halving re-anchors the
    window.  Lower scores are better.
    """

    def __init__(self, lr0=5e-5, eval_interval=10_000, patience=50_000,
                 lr_floor=0.0):
        self.lr = lr0
        self.eval_interval = eval_interval
        self.patience = patience
        self.lr_floor = lr_floor
        self.best_score = np.inf
        self.best_iteration = 0
        self._anchor = 0

    def record(self, iteration: int, score: float) -> bool:
        """Register a validation score; returns True if this is a new best."""
        improved = score < self.best_score
        if improved:
            self.best_score = score
            self.best_iteration = iteration
            self._anchor = iteration
        elif iteration - self._anchor >= self.patience:
            self.lr *= 0.5
            self._anchor = iteration
        return improved

    @property
    def finished(self) -> bool:
        return self.lr < self.lr_floor


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"NNCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tag: str, blocks: list[tuple[str, NetSpec, Params]],
                    meta: dict | None = None) -> None:
    """Write named (spec, params) blocks; float32 payload, bit-exact reload."""
    if len(tag) != 4:
        raise ValueError("checkpoint tag must be 4 characters")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(tag.encode("ascii"))
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta_b)))
    buf.write(meta_b)
    buf.write(struct.pack("<H", len(blocks)))
    for name, spec, params in blocks:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        sb = spec.to_json().encode()
        buf.write(struct.pack("<I", len(sb)))
        buf.write(sb)
        for w, b in zip(params.weights, params.biases):
            buf.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            buf.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path, expect_tag: str | None = None):
    """Returns (tag, meta, blocks) with blocks as (name, spec, Params)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version}, this build reads "
            f"{CHECKPOINT_VERSION}")
    tag = data[6:10].decode("ascii")
    if expect_tag is not None and tag != expect_tag:
        raise CheckpointError(f"{path}: tag {tag!r}, expected {expect_tag!r}")
    off = 10
    (meta_len,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off:off + meta_len].decode())
    off += meta_len
    (n_blocks,) = struct.unpack_from("<H", data, off)
    off += 2
    blocks = []
    for _ in range(n_blocks):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + name_len].decode()
        off += name_len
        (spec_len,) = struct.unpack_from("<I", data, off)
        off += 4
        spec = NetSpec.from_json(data[off:off + spec_len].decode())
        off += spec_len
        ws, bs = [], []
        for l in range(1, spec.n_layers + 1):
            rows, cols = spec.computed_width(l), spec.sizes[l - 1]
            w = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=off)
            off += 4 * rows * cols
            ws.append(w.reshape(rows, cols).copy())
            b = np.frombuffer(data, dtype="<f4", count=rows, offset=off)
            off += 4 * rows
            bs.append(b.copy())
        blocks.append((name, spec, Params(ws, bs)))
    return tag, meta, blocks
