"""Leaky LSTM cells, (bi)directional stacks and exact backpropagation through time.

The cell update is the usual LSTM one with the forget path scaled by a
constant leak ``a`` in [0, 1]::

    c_t = a * f_t * c_{t-1} + i_t * j_t
    h_t = tanh(c_t) * o_t

Three wirings are supported.  ``basic`` keeps every recurrent matrix,
``red_cut`` drops the recurrent input of ``i`` and ``j``, and ``blue_cut``
additionally drops it for ``f`` and ``o`` so that ``h_{t-1}`` is never read.
With ``a == 0`` the forget gate has no effect and its parameters are removed.

Parameters live in a flat ``dict[str, ndarray]`` keyed like ``l0.fw.W_f``,
``l1.bw.R_o`` or ``proj.W`` so the same structure serves the optimizer,
gradient checks and checkpoints.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

CHECKPOINT_VERSION = 1


class DivergenceError(FloatingPointError):
    """Raised when activations or losses become non-finite."""


class Variant(str, Enum):
    BASIC = "basic"
    RED_CUT = "red_cut"
    BLUE_CUT = "blue_cut"


# Gate order is chosen so the gates that keep a recurrent matrix always form a
# prefix of the stacked pre-activation vector.
_GATE_ORDER = ("f", "o", "i", "j")
_RECURRENT = {
    Variant.BASIC: ("f", "o", "i", "j"),
    Variant.RED_CUT: ("f", "o"),
    Variant.BLUE_CUT: (),
}


def active_gates(a: float) -> tuple[str, ...]:
    return _GATE_ORDER if a > 0 else _GATE_ORDER[1:]


def recurrent_gates(variant: Variant, a: float) -> tuple[str, ...]:
    rec = _RECURRENT[Variant(variant)]
    return tuple(g for g in active_gates(a) if g in rec)


@dataclass
class LeakConfig:
    a: float = 1.0
    hop_seconds: float = 0.008

    def __post_init__(self):
        if not 0.0 <= self.a <= 1.0:
            raise ValueError(f"leak a={self.a} outside [0, 1]")

    @property
    def tau(self) -> float:
        return leak_to_lifetime(self.a, self.hop_seconds)


@dataclass
class ModelConfig:
    input_dim: int = 129
    layers: int = 2
    units_per_direction: int = 64
    bidirectional: bool = True
    variant: Variant = Variant.BASIC
    leak: LeakConfig = field(default_factory=LeakConfig)
    output_dim: int = 20 * 129

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if isinstance(self.leak, Mapping):
            self.leak = LeakConfig(**self.leak)
        for name in ("input_dim", "layers", "units_per_direction", "output_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def directions(self) -> tuple[str, ...]:
        return ("fw", "bw") if self.bidirectional else ("fw",)

    @property
    def output_width(self) -> int:
        return self.units_per_direction * len(self.directions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


def paper_preset(variant: Variant = Variant.BASIC, a: float = 1.0) -> ModelConfig:
    """Two 600-unit BLSTM layers on 129 log-magnitude bins, D=20 embedding head."""
    return ModelConfig(input_dim=129, layers=2, units_per_direction=600,
                       bidirectional=True, variant=variant,
                       leak=LeakConfig(a=a), output_dim=20 * 129)


def lifetime_to_leak(tau: float, hop: float) -> float:
    if tau < 0:
        raise ValueError("lifetime must be non-negative")
    if tau == 0:
        return 0.0
    if math.isinf(tau):
        return 1.0
    return math.exp(-hop / tau)


def leak_to_lifetime(a: float, hop: float) -> float:
    if not 0.0 <= a <= 1.0:
        raise ValueError("leak must lie in [0, 1]")
    if a == 0:
        return 0.0
    if a == 1:
        return math.inf
    return -hop / math.log(a)


def _direction_shapes(variant, a, in_dim, h):
    rec = recurrent_gates(variant, a)
    shapes = {}
    for g in active_gates(a):
        shapes[f"W_{g}"] = (h, in_dim)
        if g in rec:
            shapes[f"R_{g}"] = (h, h)
        shapes[f"b_{g}"] = (h,)
    return shapes


def param_shapes(config: ModelConfig, projection: bool = True) -> dict[str, tuple]:
    a = config.leak.a
    h = config.units_per_direction
    shapes = {}
    in_dim = config.input_dim
    for layer in range(config.layers):
        for d in config.directions:
            for name, shp in _direction_shapes(config.variant, a, in_dim, h).items():
                shapes[f"l{layer}.{d}.{name}"] = shp
        in_dim = config.output_width
    if projection:
        shapes["proj.W"] = (config.output_dim, config.output_width)
        shapes["proj.b"] = (config.output_dim,)
    return shapes


def count_params(config: ModelConfig, projection: bool = True) -> int:
    return int(sum(math.prod(s) for s in param_shapes(config, projection).values()))


def init_params(config: ModelConfig, rng: np.random.Generator, projection: bool = True,
                dtype=np.float64) -> dict[str, np.ndarray]:
    params = {}
    for name, shp in param_shapes(config, projection).items():
        kind = name.rsplit(".", 1)[-1]
        if kind.startswith("b_") or kind == "b":
            p = np.zeros(shp)
            if kind == "b_f":
                p[:] = 1.0
        else:
            bound = 1.0 / math.sqrt(shp[1])
            p = rng.uniform(-bound, bound, size=shp)
        params[name] = p.astype(dtype)
    return params


def direction_params(params: Mapping[str, np.ndarray], layer: int, d: str) -> dict:
    prefix = f"l{layer}.{d}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


@dataclass
class LayerState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, h: int, batch: tuple = (), dtype=np.float64) -> "LayerState":
        return cls(np.zeros(batch + (h,), dtype), np.zeros(batch + (h,), dtype))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _activate(gates, z, h, override):
    acts = {}
    for k, g in enumerate(gates):
        zg = z[..., k * h:(k + 1) * h]
        acts[g] = np.tanh(zg) if g == "j" else _sigmoid(zg)
        if override and g in override:
            acts[g] = np.broadcast_to(np.asarray(override[g], dtype=z.dtype), zg.shape).copy()
    return acts


def cell_forward(params: Mapping[str, np.ndarray], variant: Variant, a: float,
                 x_t: np.ndarray, state_prev: LayerState,
                 override: Mapping[str, float] | None = None):
    """One time step of a leaky LSTM direction.

    ``params`` holds the per-direction arrays (``W_f``, ``R_f``, ``b_f``...).
    ``override`` forces gate activations to fixed values; it exists for tests
    that need exact control over the cell-state path.
    """
    gates = active_gates(a)
    rec = recurrent_gates(variant, a)
    h = state_prev.h.shape[-1]
    z = np.concatenate([x_t @ params[f"W_{g}"].T + params[f"b_{g}"] for g in gates], axis=-1)
    if rec:
        R = np.concatenate([params[f"R_{g}"] for g in rec], axis=0)
        z[..., :len(rec) * h] += state_prev.h @ R.T
    acts = _activate(gates, z, h, override)
    c = acts["i"] * acts["j"]
    if a > 0:
        c = c + a * acts["f"] * state_prev.c
    tc = np.tanh(c)
    h_t = tc * acts["o"]
    if not (np.all(np.isfinite(h_t)) and np.all(np.isfinite(c))):
        raise DivergenceError("non-finite LSTM activation")
    cache = {"x": x_t, "h_prev": state_prev.h, "c_prev": state_prev.c, "c": c, "tc": tc, **acts}
    return LayerState(h_t, c), cache


@dataclass
class DirectionCache:
    X: np.ndarray        # [T, B, in]
    H: np.ndarray        # [T, B, H]
    C: np.ndarray        # [T, B, H]
    acts: dict           # gate -> [T, B, H]
    gates: tuple
    rec: tuple
    a: float
    override: Mapping | None


def direction_forward(p: Mapping[str, np.ndarray], variant: Variant, a: float,
                      X: np.ndarray, override: Mapping[str, float] | None = None):
    """Run one direction over a batch ``X`` of shape [T, B, in] (time-major)."""
    gates = active_gates(a)
    rec = recurrent_gates(variant, a)
    T, B, _ = X.shape
    h = p[f"b_{gates[0]}"].shape[0]
    W = np.concatenate([p[f"W_{g}"] for g in gates], axis=0)
    b = np.concatenate([p[f"b_{g}"] for g in gates])
    Z = X @ W.T + b
    nrec = len(rec) * h
    R = np.concatenate([p[f"R_{g}"] for g in rec], axis=0) if rec else None
    H = np.empty((T, B, h), X.dtype)
    C = np.empty((T, B, h), X.dtype)
    acts = {g: np.empty((T, B, h), X.dtype) for g in gates}
    h_prev = np.zeros((B, h), X.dtype)
    c_prev = np.zeros((B, h), X.dtype)
    for t in range(T):
        z = Z[t]
        if nrec:
            z[:, :nrec] += h_prev @ R.T
        step = _activate(gates, z, h, override)
        c = step["i"] * step["j"]
        if a > 0:
            c += a * step["f"] * c_prev
        h_prev = np.tanh(c) * step["o"]
        c_prev = c
        H[t] = h_prev
        C[t] = c
        for g in gates:
            acts[g][t] = step[g]
    if not np.all(np.isfinite(H)):
        raise DivergenceError("non-finite LSTM activation")
    return H, DirectionCache(X, H, C, acts, gates, rec, a, override)


def direction_backward(p: Mapping[str, np.ndarray], cache: DirectionCache, dH: np.ndarray):
    """Exact BPTT for :func:`direction_forward`. Returns (param grads, dX)."""
    gates, rec, a = cache.gates, cache.rec, cache.a
    T, B, h = cache.H.shape
    nrec = len(rec) * h
    R = np.concatenate([p[f"R_{g}"] for g in rec], axis=0) if rec else None
    frozen = set(cache.override or ())
    dZ = np.empty((T, B, len(gates) * h), cache.H.dtype)
    dh_next = np.zeros((B, h), cache.H.dtype)
    dc_next = np.zeros((B, h), cache.H.dtype)
    ac = cache.acts
    for t in range(T - 1, -1, -1):
        dh = dH[t] + dh_next
        tc = np.tanh(cache.C[t])
        o, i, j = ac["o"][t], ac["i"][t], ac["j"][t]
        dc = dh * o * (1.0 - tc * tc) + dc_next
        grads = {
            "o": dh * tc * o * (1.0 - o),
            "i": dc * j * i * (1.0 - i),
            "j": dc * i * (1.0 - j * j),
        }
        if a > 0:
            f = ac["f"][t]
            c_prev = cache.C[t - 1] if t > 0 else np.zeros_like(dc)
            grads["f"] = dc * a * c_prev * f * (1.0 - f)
            dc_next = dc * a * f
        else:
            dc_next = np.zeros_like(dc)
        for k, g in enumerate(gates):
            dZ[t, :, k * h:(k + 1) * h] = 0.0 if g in frozen else grads[g]
        dh_next = dZ[t, :, :nrec] @ R if nrec else np.zeros_like(dh)
    flatZ = dZ.reshape(T * B, -1)
    dW = flatZ.T @ cache.X.reshape(T * B, -1)
    db = flatZ.sum(axis=0)
    W = np.concatenate([p[f"W_{g}"] for g in gates], axis=0)
    dX = dZ @ W
    out = {}
    for k, g in enumerate(gates):
        out[f"W_{g}"] = dW[k * h:(k + 1) * h]
        out[f"b_{g}"] = db[k * h:(k + 1) * h]
    if nrec:
        H_prev = np.concatenate([np.zeros((1, B, h), cache.H.dtype), cache.H[:-1]], axis=0)
        dR = flatZ[:, :nrec].T @ H_prev.reshape(T * B, h)
        for k, g in enumerate(rec):
            out[f"R_{g}"] = dR[k * h:(k + 1) * h]
    return out, dX


def reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    """Time index [T, B] that reverses each sequence inside its valid length.

    Padding frames stay where they are, so padding is always trailing in both
    directions. The map is its own inverse.
    """
    t = np.arange(T)[:, None]
    L = np.asarray(lengths)[None, :]
    return np.where(t < L, L - 1 - t, t)


def _gather_time(X, idx):
    return np.take_along_axis(X, idx[:, :, None], axis=0)


def _scatter_time(dX, idx):
    # idx is an involution, so scattering equals gathering
    return _gather_time(dX, idx)


@dataclass
class StackCache:
    layers: list          # per layer: {direction: DirectionCache}
    rev_idx: np.ndarray | None
    a: float


def stack_forward(config: ModelConfig, params: Mapping[str, np.ndarray], X: np.ndarray,
                  lengths: np.ndarray | None = None, a: float | None = None,
                  override: Mapping[str, float] | None = None):
    """Forward pass of the recurrent stack on time-major ``X`` [T, B, in].

    Both directions of every layer use the same leak ``a`` (defaults to the
    configured one; the mismatch experiment overrides it at test time).
    """
    a = config.leak.a if a is None else a
    if X.ndim != 3 or X.shape[0] == 0:
        raise ValueError("expected a non-empty [T, B, F] input")
    if X.shape[2] != config.input_dim:
        raise ValueError(f"input dim {X.shape[2]} != configured {config.input_dim}")
    T, B, _ = X.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    rev = reverse_index(lengths, T) if config.bidirectional else None
    inp = X
    caches = []
    for layer in range(config.layers):
        outs, lc = [], {}
        for d in config.directions:
            p = direction_params(params, layer, d)
            x_d = _gather_time(inp, rev) if d == "bw" else inp
            H, cache = direction_forward(p, config.variant, a, x_d, override)
            outs.append(_gather_time(H, rev) if d == "bw" else H)
            lc[d] = cache
        caches.append(lc)
        inp = np.concatenate(outs, axis=-1)
    return inp, StackCache(caches, rev, a)


def stack_backward(config: ModelConfig, params: Mapping[str, np.ndarray],
                   cache: StackCache, dOut: np.ndarray):
    """Gradients of a scalar loss w.r.t. every recurrent parameter and the input."""
    grads = {}
    h = config.units_per_direction
    dinp = dOut
    for layer in range(config.layers - 1, -1, -1):
        dX = None
        for k, d in enumerate(config.directions):
            p = direction_params(params, layer, d)
            dH = dinp[..., k * h:(k + 1) * h]
            if d == "bw":
                dH = _gather_time(dH, cache.rev_idx)
            g, dx = direction_backward(p, cache.layers[layer][d], dH)
            if d == "bw":
                dx = _scatter_time(dx, cache.rev_idx)
            for name, v in g.items():
                grads[f"l{layer}.{d}.{name}"] = v
            dX = dx if dX is None else dX + dx
        dinp = dX
    return grads, dinp


def blstm_forward(config: ModelConfig, params: Mapping[str, np.ndarray], features,
                  a: float | None = None):
    """Single-sequence convenience wrapper: [T, F] features -> [T, 2H] outputs."""
    values = getattr(features, "values", features)
    if len(values) == 0:
        raise ValueError("empty sequence")
    out, cache = stack_forward(config, params, np.asarray(values)[:, None, :], a=a)
    return out[:, 0, :], cache


def bptt_backward(config: ModelConfig, params: Mapping[str, np.ndarray],
                  cache: StackCache, grad_outputs: np.ndarray):
    """Single-sequence counterpart of :func:`blstm_forward`."""
    g = np.asarray(grad_outputs)
    if g.ndim == 2:
        g = g[:, None, :]
    expected = cache.layers[-1]["fw"].H.shape[:2]
    if g.shape[:2] != expected:
        raise ValueError(f"gradient shape {g.shape[:2]} does not match cache {expected}")
    grads, dX = stack_backward(config, params, cache, g)
    return grads, dX[:, 0, :] if dX.shape[1] == 1 else dX


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path: str | Path, meta: Mapping, params: Mapping[str, np.ndarray]) -> None:
    """Write an uncompressed ``.npz``: one array per parameter plus ``__meta__``.

    ``__meta__`` is a 0-d unicode array holding JSON with ``format_version``,
    ``kind`` and whatever config the caller provides.
    """
    body = {"format_version": CHECKPOINT_VERSION, **meta}
    arrays = {k: np.asarray(v) for k, v in params.items()}
    if "__meta__" in arrays:
        raise ValueError("'__meta__' is a reserved key")
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(body, sort_keys=True)), **arrays)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        params = {k: z[k].copy() for k in z.files if k != "__meta__"}
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    return meta, params


def model_config_from_dict(d: Mapping) -> ModelConfig:
    d = dict(d)
    d["leak"] = LeakConfig(**d.get("leak", {}))
    return ModelConfig(**d)
