"""Network architectures: dense and mask-pruned layers, counting, parity.

Two architectures over the same regression contract p in R^k -> x in R^d:

  cupnet  dense k->d "frame" layer, split into three equal segments (the x,
          y and z blocks of the mesh); h blocks of per-segment m->m masked
          layers that share one distance-threshold mask but own their
          weights; three dense m->m linear output maps, concatenated.
  regnet  plain fully-connected reference: k->s, h times s->s, s->d.

A masked layer computes A(M^T i + b) where M is the weight matrix zeroed
outside the mask; storage and traversal are sparse, the dense M is never
materialized.  The reference width s is chosen so the two parameter counts
match as closely as possible (ceiling rule).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import PruneMask

__all__ = [
    "ArchConfig",
    "DenseLayer",
    "MaskedSegmentLayer",
    "Network",
    "masked_forward",
    "forward",
    "forward_batch",
    "param_count_cup",
    "param_count_ref",
    "solve_s",
    "build_cupnet",
    "build_regnet",
    "save_checkpoint",
    "load_checkpoint",
]

RELU = "relu"
LINEAR = "linear"
DROPOUT_RATE_DEFAULT = 0.2


@dataclass
class ArchConfig:
    """Architecture description shared by both network kinds.

    alpha is the pruning threshold (cupnet); s the hidden width (regnet,
    usually derived with solve_s for parameter parity).  d is always 3m.
    """

    k: int
    m: int
    h: int
    alpha: float = None
    s: int = None
    dropout_rate: float = DROPOUT_RATE_DEFAULT

    def __post_init__(self):
        if self.k < 1 or self.m < 1 or self.h < 1:
            raise ValueError("k, m and h must all be >= 1")
        if not (0 <= self.dropout_rate < 1):
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def d(self) -> int:
        return 3 * self.m

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "m": self.m,
            "h": self.h,
            "alpha": self.alpha,
            "s": self.s,
            "dropout_rate": self.dropout_rate,
        }


@dataclass
class DenseLayer:
    """Fully-connected layer; weights has shape (n_in, n_out)."""

    weights: np.ndarray
    biases: np.ndarray
    activation: str

    kind = "dense"

    @property
    def n_params(self) -> int:
        return self.weights.size + self.biases.size

    def parameter_arrays(self) -> list:
        return [self.weights, self.biases]


@dataclass
class MaskedSegmentLayer:
    """m->m layer with weights stored only at mask nonzeros.

    values is aligned with the mask's row-compressed entry order: entry t of
    values is the weight at (row, column) = (entry_rows()[t], indices[t]).
    """

    values: np.ndarray
    biases: np.ndarray
    activation: str

    kind = "masked-segment"

    @property
    def n_params(self) -> int:
        return self.values.size + self.biases.size

    def parameter_arrays(self) -> list:
        return [self.values, self.biases]


@dataclass
class Network:
    """An architecture plus its parameter storage.

    cupnet layer order (also the checkpoint order): frame, then for each of
    the h blocks the x/y/z masked layers, then the x/y/z dense output maps.
    regnet: input layer, h hidden layers, output layer.
    """

    kind: str
    config: ArchConfig
    layers: list
    mask: PruneMask = None

    @property
    def n_parameters(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def parameter_arrays(self) -> list:
        """Flat list [w0, b0, w1, b1, ...] of mutable parameter arrays."""
        out = []
        for layer in self.layers:
            out.extend(layer.parameter_arrays())
        return out


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == RELU:
        return np.maximum(z, 0.0)
    if name == LINEAR:
        return z
    raise ValueError(f"unknown activation {name!r}")


def _masked_pre_batch(values: np.ndarray, mask: PruneMask, x: np.ndarray) -> np.ndarray:
    """M^T x for a batch, via padded row-compressed traversal.

    x: (batch, m).  Output column j gathers x over j's mask neighbors and
    the matching transposed values; the pad column of x is zero so padded
    slots contribute nothing.
    """
    t = mask.matvec_tables()
    vt = np.append(values[t["transpose"]], 0.0)
    wt = vt[t["entry_pad"]]
    xp = np.concatenate([x, np.zeros((x.shape[0], 1))], axis=1)
    return np.einsum("bjt,jt->bj", xp[:, t["neighbors"]], wt)


def _masked_pre_transposed_batch(values: np.ndarray, mask: PruneMask, y: np.ndarray) -> np.ndarray:
    """M y for a batch (the reverse direction, used by backpropagation)."""
    t = mask.matvec_tables()
    vr = np.append(values, 0.0)
    wr = vr[t["entry_pad"]]
    yp = np.concatenate([y, np.zeros((y.shape[0], 1))], axis=1)
    return np.einsum("bit,it->bi", yp[:, t["neighbors"]], wr)


def masked_forward(layer: MaskedSegmentLayer, mask: PruneMask, x: np.ndarray) -> np.ndarray:
    """One masked layer on one m-vector: A(M^T x + b).

    Dropout, when wanted, is applied by the caller; this op is the bare
    masked affine map plus activation.
    """
    if layer.values.shape != (mask.nnz,):
        raise ValueError(
            f"layer stores {layer.values.shape[0]} values, mask has {mask.nnz} nonzeros"
        )
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (mask.m,):
        raise ValueError(f"input must have shape ({mask.m},), got {x.shape}")
    pre = _masked_pre_batch(layer.values, mask, x[None, :])[0] + layer.biases
    return _activate(layer.activation, pre)


@dataclass
class ForwardCache:
    """Per-layer intermediates of one batched forward pass.

    inputs[i] is what layer i consumed (after any upstream dropout), pres[i]
    its pre-activation, drops[i] the inverted-dropout multiplier applied
    after layer i's activation (None in eval mode and on output layers).
    """

    inputs: list
    pres: list
    drops: list
    output: np.ndarray


def _check_finite(arr: np.ndarray, layer_name: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by layer {layer_name!r}")


def _dropout_multiplier(shape, rate: float, rng) -> np.ndarray:
    # inverted dropout: zero with probability `rate`, scale survivors by 1/keep
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


def forward_batch(net: Network, p: np.ndarray, train_mode: bool = False, rng=None,
                  keep_cache: bool = False):
    """Full architecture pass on a (batch, k) input.

    In train mode an inverted-dropout multiplier (drawn from ``rng`` in layer
    order) follows every inner layer: the frame/input layer and every hidden
    or masked layer, never the output layer.  Eval mode is deterministic.
    Returns (output, ForwardCache or None).
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != net.config.k:
        raise ValueError(f"input must have shape (batch, {net.config.k}), got {p.shape}")
    if not np.isfinite(p).all():
        raise ValueError("non-finite network input")
    if train_mode and net.config.dropout_rate > 0 and rng is None:
        raise ValueError("train-mode forward needs an rng for dropout")

    rate = net.config.dropout_rate
    use_drop = train_mode and rate > 0
    inputs, pres, drops = [], [], []

    def run_layer(layer, x, name, dropout_site):
        if layer.kind == "dense":
            pre = x @ layer.weights + layer.biases
        else:
            pre = _masked_pre_batch(layer.values, net.mask, x) + layer.biases
        act = _activate(layer.activation, pre)
        _check_finite(act, name)
        drop = None
        if dropout_site and use_drop:
            drop = _dropout_multiplier(act.shape, rate, rng)
            act = act * drop
        if keep_cache:
            inputs.append(x)
            pres.append(pre)
            drops.append(drop)
        return act

    if net.kind == "regnet":
        act = p
        last = len(net.layers) - 1
        for i, layer in enumerate(net.layers):
            act = run_layer(layer, act, f"layer{i}", dropout_site=(i != last))
        out = act
    elif net.kind == "cupnet":
        m, h = net.config.m, net.config.h
        act = run_layer(net.layers[0], p, "frame", dropout_site=True)
        segs = [act[:, 0:m], act[:, m:2 * m], act[:, 2 * m:3 * m]]
        for b in range(h):
            segs = [
                run_layer(net.layers[1 + 3 * b + si], segs[si], f"block{b}.{'xyz'[si]}",
                          dropout_site=True)
                for si in range(3)
            ]
        out_start = 1 + 3 * h
        segs = [
            run_layer(net.layers[out_start + si], segs[si], f"out.{'xyz'[si]}",
                      dropout_site=False)
            for si in range(3)
        ]
        out = np.concatenate(segs, axis=1)
    else:
        raise ValueError(f"unknown network kind {net.kind!r}")

    cache = ForwardCache(inputs, pres, drops, out) if keep_cache else None
    return out, cache


def forward(net: Network, p: np.ndarray, train_mode: bool = False, rng=None) -> np.ndarray:
    """Single-vector convenience wrapper around forward_batch."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (net.config.k,):
        raise ValueError(f"input must have shape ({net.config.k},), got {p.shape}")
    out, _ = forward_batch(net, p[None, :], train_mode=train_mode, rng=rng)
    return out[0]


def param_count_cup(k: int, d: int, m: int, h: int, c_alpha: int) -> int:
    """Exact trainable-scalar count of the pruned architecture.

    (k*d + d) for the frame, 3h(c + m) for the masked blocks, 3(m^2 + m)
    for the per-segment dense output maps.
    """
    for name, v in (("k", k), ("d", d), ("m", m), ("h", h), ("c_alpha", c_alpha)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1")
    if d != 3 * m:
        raise ValueError(f"d must equal 3m, got d={d}, m={m}")
    if not (m <= c_alpha <= m * m):
        raise ValueError(f"c_alpha must lie in [m, m^2] = [{m}, {m * m}], got {c_alpha}")
    return (k * d + d) + 3 * h * (c_alpha + m) + 3 * (m * m + m)


def param_count_ref(k: int, d: int, h: int, s: int) -> int:
    """Exact trainable-scalar count of the dense reference architecture."""
    for name, v in (("k", k), ("d", d), ("h", h), ("s", s)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1")
    return (k * s + s) + h * (s * s + s) + (s * d + d)


def solve_s(k: int, d: int, h: int, n_cup: int) -> int:
    """Smallest hidden width whose reference count reaches n_cup.

    n_ref(s) = h s^2 + u s + d with u = k + h + d + 1, so the matching width
    is the positive root of the quadratic; we take its ceiling (at least 1).
    The closed form seeds the answer and an exact integer fix-up absorbs any
    floating-point slack, so the bracketing guarantee
    n_ref(s) >= n_cup and (s == 1 or n_ref(s - 1) < n_cup) always holds.
    """
    if n_cup <= d:
        raise ValueError(f"n_cup must exceed d, got n_cup={n_cup}, d={d}")
    u = k + h + d + 1
    disc = u * u - 4 * h * (d - n_cup)
    if disc < 0:
        raise ArithmeticError("negative discriminant; inputs violate the preconditions")
    s = max(1, math.ceil((-u + math.sqrt(disc)) / (2 * h)))
    while param_count_ref(k, d, h, s) < n_cup:
        s += 1
    while s > 1 and param_count_ref(k, d, h, s - 1) >= n_cup:
        s -= 1
    return s


def _he_uniform(rng, n_in: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / n_in)
    return rng.uniform(-bound, bound, shape)


def build_cupnet(cfg: ArchConfig, mask: PruneMask, init_seed: int) -> Network:
    """Assemble the pruned architecture with He-style fan-in init.

    A masked entry's init bound uses the receiving unit's true in-degree
    (its mask-row nonzero count), not m: pruned layers have heterogeneous
    fan-in and variance-preserving init needs the actual one.  Weights are
    drawn from one seeded stream in layer order; biases start at zero.
    """
    if mask.m != cfg.m:
        raise ValueError(f"mask is {mask.m}x{mask.m}, config expects m={cfg.m}")
    rng = np.random.default_rng(init_seed)
    k, m, d, h = cfg.k, cfg.m, cfg.d, cfg.h
    layers = [DenseLayer(_he_uniform(rng, k, (k, d)), np.zeros(d), RELU)]
    deg = mask.row_degrees()
    entry_bound = np.sqrt(6.0 / deg[mask.indices])
    for _ in range(3 * h):
        values = rng.uniform(-1.0, 1.0, mask.nnz) * entry_bound
        layers.append(MaskedSegmentLayer(values, np.zeros(m), RELU))
    for _ in range(3):
        layers.append(DenseLayer(_he_uniform(rng, m, (m, m)), np.zeros(m), LINEAR))
    return Network(kind="cupnet", config=cfg, layers=layers, mask=mask)


def build_regnet(cfg: ArchConfig, init_seed: int) -> Network:
    """Assemble the dense reference architecture (requires cfg.s)."""
    if cfg.s is None or cfg.s < 1:
        raise ValueError("regnet needs a hidden width s >= 1")
    rng = np.random.default_rng(init_seed)
    k, d, h, s = cfg.k, cfg.d, cfg.h, cfg.s
    layers = [DenseLayer(_he_uniform(rng, k, (k, s)), np.zeros(s), RELU)]
    for _ in range(h):
        layers.append(DenseLayer(_he_uniform(rng, s, (s, s)), np.zeros(s), RELU))
    layers.append(DenseLayer(_he_uniform(rng, s, (s, d)), np.zeros(d), LINEAR))
    return Network(kind="regnet", config=cfg, layers=layers, mask=None)


def save_checkpoint(net: Network, out_dir, init_seed=None) -> None:
    """meta.json plus one little-endian float64 blob per layer, layer order.

    A masked layer's blob is its value array in mask row-compressed order
    followed by its biases; a dense layer's is the row-major weight matrix
    followed by its biases.  Round-trips are bit-exact.
    """
    os.makedirs(out_dir, exist_ok=True)
    layer_meta = []
    for i, layer in enumerate(net.layers):
        fname = f"layer_{i:03d}.bin"
        w, b = layer.parameter_arrays()
        blob = np.concatenate([w.reshape(-1), b]).astype("<f8")
        blob.tofile(os.path.join(out_dir, fname))
        layer_meta.append({
            "file": fname,
            "kind": layer.kind,
            "activation": layer.activation,
            "weight_shape": list(w.shape),
            "bias_size": int(b.size),
        })
    meta = {
        "kind": net.kind,
        "config": net.config.to_dict(),
        "init_seed": init_seed,
        "n_parameters": net.n_parameters,
        "layers": layer_meta,
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(ckpt_dir, mask: PruneMask = None) -> Network:
    """Rebuild a network from save_checkpoint output.

    cupnet checkpoints need the pruning mask (rebuilt from the mesh and the
    stored alpha) because masked values are stored aligned to its entry
    order; the element count is validated against it.
    """
    with open(os.path.join(ckpt_dir, "meta.json")) as fh:
        meta = json.load(fh)
    cfg = ArchConfig(**meta["config"])
    if meta["kind"] == "cupnet":
        if mask is None:
            raise ValueError("loading a cupnet checkpoint requires the pruning mask")
        if mask.m != cfg.m:
            raise ValueError(f"mask is {mask.m}x{mask.m}, checkpoint expects m={cfg.m}")
    layers = []
    for lm in meta["layers"]:
        blob = np.fromfile(os.path.join(ckpt_dir, lm["file"]), dtype="<f8")
        w_size = int(np.prod(lm["weight_shape"]))
        if blob.size != w_size + lm["bias_size"]:
            raise ValueError(f"{lm['file']}: blob has {blob.size} values, expected {w_size + lm['bias_size']}")
        w = blob[:w_size].reshape(lm["weight_shape"])
        b = blob[w_size:]
        if lm["kind"] == "dense":
            layers.append(DenseLayer(w, b, lm["activation"]))
        else:
            if mask is not None and w.shape != (mask.nnz,):
                raise ValueError(f"{lm['file']}: {w.shape[0]} masked values, mask has {mask.nnz} nonzeros")
            layers.append(MaskedSegmentLayer(w, b, lm["activation"]))
    return Network(kind=meta["kind"], config=cfg, layers=layers, mask=mask)
