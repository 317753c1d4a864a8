"""Permutation-equivariant vector-field network.

A shared per-point MLP with mean pooling: every block sees its per-point
features, the pooled global feature broadcast back to each point, a
sinusoidal embedding of t, and (optionally) a condition latent.  The
output head is zero-initialized, so a freshly initialized network is the
zero field and the induced flow is the identity.

Gradients are exact reverse-mode derivatives computed by hand; there is
no autodiff framework underneath.  Parameters live in one flat float64
vector with a shape table, which keeps the optimizer and EMA trivial.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, NumericError
from .rng import RngState

_CKPT_MAGIC = b"PCNW"
_CKPT_VERSION = 1


@dataclass
class NetConfig:
    hidden_width: int = 128
    depth: int = 4
    time_embed_dim: int = 64
    pooling: str = "mean"
    cond_dim: int = 0
    activation: str = "silu"  # smooth nonlinearity; Jacobian diagnostics need C^1

    def __post_init__(self):
        if min(self.hidden_width, self.depth, self.time_embed_dim) < 1:
            raise ValueError("hidden_width, depth and time_embed_dim must be >= 1")
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")
        if self.cond_dim < 0:
            raise ValueError("cond_dim must be >= 0")
        if self.pooling != "mean":
            raise ValueError(f"unsupported pooling {self.pooling!r}")
        if self.activation not in ("silu", "tanh"):
            raise ValueError(f"unsupported activation {self.activation!r}")

    def layer_dims(self):
        """(in_dim, out_dim) per block plus the output head."""
        extra = self.time_embed_dim + self.cond_dim
        dims = [(3 + 3 + extra, self.hidden_width)]
        for _ in range(self.depth - 1):
            dims.append((2 * self.hidden_width + extra, self.hidden_width))
        dims.append((self.hidden_width, 3))
        return dims

    def to_dict(self):
        return {
            "hidden_width": self.hidden_width,
            "depth": self.depth,
            "time_embed_dim": self.time_embed_dim,
            "pooling": self.pooling,
            "cond_dim": self.cond_dim,
            "activation": self.activation,
        }


def param_count(cfg: NetConfig) -> int:
    return sum(i * o + o for i, o in cfg.layer_dims())


@dataclass
class VectorFieldParams:
    """Flat parameter vector, its shape table, and the EMA shadow."""

    cfg: NetConfig
    flat: np.ndarray
    ema: np.ndarray
    step_count: int = 0
    shapes: list = field(default_factory=list)  # (name, shape, offset)

    def tensor(self, name, source=None):
        src = self.flat if source is None else source
        for nm, shape, off in self.shapes:
            if nm == name:
                return src[off : off + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def tensors(self, source=None):
        src = self.flat if source is None else source
        return {nm: src[off : off + int(np.prod(shape))].reshape(shape) for nm, shape, off in self.shapes}


def _build_shapes(cfg):
    shapes = []
    off = 0
    for k, (i, o) in enumerate(cfg.layer_dims()):
        name = f"block{k}" if k < cfg.depth else "head"
        shapes.append((f"{name}.W", (i, o), off))
        off += i * o
        shapes.append((f"{name}.b", (o,), off))
        off += o
    return shapes, off


def init_network(cfg: NetConfig, rng: RngState) -> VectorFieldParams:
    """Fan-in-scaled uniform init; the output head starts at exactly zero."""
    shapes, total = _build_shapes(cfg)
    flat = np.zeros(total)
    params = VectorFieldParams(cfg, flat, flat.copy(), 0, shapes)
    for k, (i, o) in enumerate(cfg.layer_dims()):
        name = f"block{k}" if k < cfg.depth else "head"
        if name == "head":
            continue  # stays zero
        s = 1.0 / np.sqrt(i)
        params.tensor(f"{name}.W")[:] = rng.uniform(-s, s, (i, o))
        params.tensor(f"{name}.b")[:] = rng.uniform(-s, s, (o,))
    params.ema = params.flat.copy()
    return params


def time_embedding(t, dim):
    """Sinusoidal features of t in [0, 1]; frequencies span 1..1000."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(np.log(1.0), np.log(1000.0), half))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _act(name, z):
    with np.errstate(over="ignore", invalid="ignore"):
        if name == "silu":
            s = 1.0 / (1.0 + np.exp(-z))
            return z * s, s * (1.0 + z * (1.0 - s))
        out = np.tanh(z)
        return out, 1.0 - out * out


def _prep_inputs(x, t, cond, cfg):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    b, n, _ = x.shape
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if t.shape == (1,) and b > 1:
        t = np.full(b, t[0])
    if t.shape != (b,):
        raise ValueError(f"t must be scalar or shape ({b},), got {t.shape}")
    if cfg.cond_dim:
        if cond is None:
            raise ValueError("network was built with cond_dim > 0; cond is required")
        cond = np.asarray(cond, dtype=np.float64)
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (b, cfg.cond_dim))
        if cond.shape != (b, cfg.cond_dim):
            raise ValueError(f"cond must have shape ({b}, {cfg.cond_dim})")
    else:
        cond = None
    return x, t, cond, single


def _forward_impl(params, x, t, cond, want_cache):
    cfg = params.cfg
    b, n, _ = x.shape
    temb = time_embedding(t, cfg.time_embed_dim)  # (B, TE)
    temb_b = np.broadcast_to(temb[:, None, :], (b, n, cfg.time_embed_dim))
    cond_b = None
    if cond is not None:
        cond_b = np.broadcast_to(cond[:, None, :], (b, n, cfg.cond_dim))

    h = x
    cache = []
    for k in range(cfg.depth):
        pooled = h.mean(axis=1)
        parts = [h, np.broadcast_to(pooled[:, None, :], h.shape), temb_b]
        if cond_b is not None:
            parts.append(cond_b)
        z = np.concatenate(parts, axis=2)
        W = params.tensor(f"block{k}.W")
        bias = params.tensor(f"block{k}.b")
        pre = z.reshape(b * n, -1) @ W + bias
        h_new, dact = _act(cfg.activation, pre)
        if not np.isfinite(h_new).all():
            raise NumericError(f"non-finite activation in block {k}")
        if want_cache:
            cache.append((z, dact, h.shape[2]))
        h = h_new.reshape(b, n, cfg.hidden_width)
    W = params.tensor("head.W")
    bias = params.tensor("head.b")
    v = (h.reshape(b * n, -1) @ W + bias).reshape(b, n, 3)
    if want_cache:
        cache.append(h)
    return v, cache


def forward(params: VectorFieldParams, x, t, cond=None, use_ema=False):
    """Evaluate the vector field; permutation-equivariant in the rows of x.

    x is (N, 3) or (B, N, 3); t a scalar or (B,).  With use_ema the EMA
    shadow weights are evaluated instead of the training weights.
    """
    cfg = params.cfg
    x, t, cond, single = _prep_inputs(x, t, cond, cfg)
    src = params.ema if use_ema else None
    p = params if src is None else VectorFieldParams(cfg, params.ema, params.ema, params.step_count, params.shapes)
    v, _ = _forward_impl(p, x, t, cond, want_cache=False)
    return v[0] if single else v


def loss_and_grads(params: VectorFieldParams, x_t, t, target, cond=None):
    """Mean-squared-error flow-matching loss with exact parameter gradients.

    Returns (loss, grad_flat, grad_cond); grad_cond is None unless the
    network consumes a condition latent, in which case it holds dloss/dcond
    per batch element (for joint encoder training).
    """
    cfg = params.cfg
    x, t, cond, single = _prep_inputs(x_t, t, cond, cfg)
    target = np.asarray(target, dtype=np.float64)
    if single:
        target = target[None]
    if target.shape != x.shape:
        raise ValueError(f"target shape {target.shape} does not match x_t {x.shape}")
    b, n, _ = x.shape

    v, cache = _forward_impl(params, x, t, cond, want_cache=True)
    diff = v - target
    loss = float((diff**2).mean())

    grad = np.zeros_like(params.flat)
    gview = VectorFieldParams(cfg, grad, grad, 0, params.shapes)
    denom = diff.size
    dv = (2.0 / denom) * diff  # (B, N, 3)

    h_last = cache[-1]
    dv2 = dv.reshape(b * n, 3)
    gview.tensor("head.W")[:] = h_last.reshape(b * n, -1).T @ dv2
    gview.tensor("head.b")[:] = dv2.sum(axis=0)
    dh = (dv2 @ params.tensor("head.W").T).reshape(b, n, cfg.hidden_width)

    grad_cond = np.zeros((b, cfg.cond_dim)) if cond is not None else None
    te = cfg.time_embed_dim
    for k in range(cfg.depth - 1, -1, -1):
        z, dact, prev_dim = cache[k]
        da = (dh.reshape(b * n, -1) * dact)
        gview.tensor(f"block{k}.W")[:] = z.reshape(b * n, -1).T @ da
        gview.tensor(f"block{k}.b")[:] = da.sum(axis=0)
        dz = (da @ params.tensor(f"block{k}.W").T).reshape(b, n, -1)
        dh_direct = dz[:, :, :prev_dim]
        dpool = dz[:, :, prev_dim : 2 * prev_dim].sum(axis=1)  # (B, F_prev)
        if cond is not None:
            grad_cond += dz[:, :, 2 * prev_dim + te :].sum(axis=1)
        if k == 0:
            break  # gradients w.r.t. the input cloud are not needed
        dh = dh_direct + dpool[:, None, :] / n
    return loss, grad, grad_cond


def ema_update(params: VectorFieldParams, decay):
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must lie in [0, 1)")
    params.ema *= decay
    params.ema += (1.0 - decay) * params.flat
    return params.ema


def field_fn(params: VectorFieldParams, cond=None, use_ema=True):
    """Bind params into a (x, t) -> v callable for samplers and diagnostics."""

    def fn(x, t):
        return forward(params, x, t, cond=cond, use_ema=use_ema)

    return fn


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, JSON header, named float32 blocks
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: VectorFieldParams, seed=0, normalization=None, extra_blocks=None):
    """Inference checkpoint: JSON header + float32 LE blocks in table order."""
    header = {
        "net": params.cfg.to_dict(),
        "step_count": int(params.step_count),
        "seed": int(seed),
        "normalization": normalization,
        "blocks": ["params", "ema"] + sorted(extra_blocks or {}),
        "block_sizes": {"params": params.flat.size, "ema": params.ema.size},
    }
    extra_blocks = extra_blocks or {}
    for name, arr in extra_blocks.items():
        header["block_sizes"][name] = int(np.asarray(arr).size)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(params.flat.astype("<f4").tobytes())
        fh.write(params.ema.astype("<f4").tobytes())
        for name in sorted(extra_blocks):
            fh.write(np.asarray(extra_blocks[name]).astype("<f4").tobytes())


def load_checkpoint(path):
    """Returns (VectorFieldParams, header dict, extra float arrays)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise DataFormatError(f"bad checkpoint magic in {path}")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != _CKPT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    off = 12
    header = json.loads(blob[off : off + hlen].decode("utf-8"))
    off += hlen
    cfg = NetConfig(**header["net"])
    shapes, total = _build_shapes(cfg)
    sizes = header["block_sizes"]
    if sizes["params"] != total:
        raise DataFormatError("checkpoint parameter count does not match its NetConfig")

    def take(count):
        nonlocal off
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).astype(np.float64)
        off += count * 4
        return arr

    arrays = {}
    for name in header["blocks"]:
        arrays[name] = take(int(sizes[name]))
    params = VectorFieldParams(cfg, arrays.pop("params"), arrays.pop("ema"), header["step_count"], shapes)
    return params, header, arrays
