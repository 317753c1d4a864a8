"""Conditional-flow-matching training loop.

Pairs come from one of the four coupling modes, get the hybrid noise
perturbation when configured, are linearly interpolated at a uniform
random t, and the network regresses the constant conditional velocity
x1 - x0.  Optimization is Adam with a stepwise exponential learning-rate
decay and an EMA shadow of the weights.

Everything is deterministic given the seed: each step consumes one rng
stream in a fixed order (sources, subsampling, hybrid noise, times), so
re-running a config reproduces the loss sequence bit for bit, and the
resume file carries the rng state to continue a run identically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .coupling import (
    SupersetCoupling,
    equivariant_ot_pairs,
    hybrid_perturb,
    independent_pair,
    minibatch_ot_pairs,
    sample_coupled_pair,
)
from .errors import ConfigError, NumericError
from .geometry import Superset, _as_points, subsample
from .network import NetConfig, VectorFieldParams, ema_update, init_network, loss_and_grads
from .rng import RngState

COUPLING_MODES = ("independent", "minibatch_ot", "equivariant_ot", "superset")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    lr_decay: float = 0.998
    lr_decay_every: int = 1000
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    ema_decay: float = 0.9999
    batch_size: int = 8
    total_steps: int = 20_000
    beta: float = 0.2  # hybrid blending coefficient (superset mode)
    coupling_mode: str = "superset"
    n_points: int = 512
    seed: int = 0
    ot_group_size: int = 0  # 0 -> whole batch as one assignment group
    log_every: int = 100

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.coupling_mode not in COUPLING_MODES:
            raise ConfigError(f"unknown coupling_mode {self.coupling_mode!r}")

    def lr_at(self, step):
        return self.lr * self.lr_decay ** (step // self.lr_decay_every)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_params(cls, flat):
        return cls(np.zeros_like(flat), np.zeros_like(flat), 0)

    def update(self, flat, grad, lr, betas=(0.9, 0.999), eps=1e-8):
        b1, b2 = betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mhat = self.m / (1 - b1**self.t)
        vhat = self.v / (1 - b2**self.t)
        flat -= lr * mhat / (np.sqrt(vhat) + eps)


def interpolate(x0, x1, t):
    """Linear path point x_t = (1 - t) x0 + t x1; t scalar or one per batch row."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError("x0 and x1 must share a shape")
    t_arr = np.asarray(t, dtype=np.float64)
    if (t_arr < 0).any() or (t_arr > 1).any():
        raise ValueError("t must lie in [0, 1]")
    if t_arr.ndim == 0:
        return (1.0 - t_arr) * x0 + t_arr * x1
    shape = (-1,) + (1,) * (x0.ndim - 1)
    tt = t_arr.reshape(shape)
    return (1.0 - tt) * x0 + tt * x1


# ---------------------------------------------------------------------------
# partial observations and the permutation-invariant condition encoder
# ---------------------------------------------------------------------------


@dataclass
class PartialObservation:
    """Points kept on one side of a crop plane (normal . p >= offset)."""

    points: np.ndarray
    normal: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    offset: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise ValueError("observation needs at least one 3d point")
        side = self.points @ self.normal - self.offset
        if (side < -1e-9).any():
            raise ValueError("observation points must lie on the kept side of the crop plane")

    @property
    def k(self):
        return self.points.shape[0]


def make_partial(cloud, normal, offset, max_k=600, rng: RngState | None = None) -> PartialObservation:
    """Half-space crop of a cloud, subsampled to at most max_k points."""
    pts = _as_points(cloud)
    normal = np.asarray(normal, dtype=np.float64).reshape(3)
    keep = pts @ normal - float(offset) >= 0
    kept = pts[keep]
    if kept.shape[0] == 0:
        raise ValueError("crop plane removes every point")
    if kept.shape[0] > max_k:
        if rng is None:
            raise ValueError("rng required to subsample a large crop")
        _, cloud_small = subsample(Superset(kept, kind="data"), max_k, rng)
        kept = cloud_small.points
    return PartialObservation(kept, normal, float(offset))


@dataclass
class EncoderConfig:
    hidden: int = 64
    out_dim: int = 256

    def to_dict(self):
        return {"hidden": self.hidden, "out_dim": self.out_dim}


@dataclass
class EncoderParams:
    cfg: EncoderConfig
    flat: np.ndarray
    shapes: list

    def tensor(self, name, source=None):
        src = self.flat if source is None else source
        for nm, shape, off in self.shapes:
            if nm == name:
                return src[off : off + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)


def init_encoder(cfg: EncoderConfig, rng: RngState) -> EncoderParams:
    dims = [(3, cfg.hidden), (cfg.hidden, cfg.hidden), (cfg.hidden, cfg.out_dim)]
    shapes, off = [], 0
    for k, (i, o) in enumerate(dims):
        shapes.append((f"enc{k}.W", (i, o), off))
        off += i * o
        shapes.append((f"enc{k}.b", (o,), off))
        off += o
    flat = np.zeros(off)
    enc = EncoderParams(cfg, flat, shapes)
    for k, (i, o) in enumerate(dims):
        s = 1.0 / np.sqrt(i)
        enc.tensor(f"enc{k}.W")[:] = rng.uniform(-s, s, (i, o))
        enc.tensor(f"enc{k}.b")[:] = rng.uniform(-s, s, (o,))
    return enc


def _tanh(z):
    out = np.tanh(z)
    return out, 1.0 - out * out


def _encode_cache(obs_points, enc: EncoderParams):
    h0, d0 = _tanh(obs_points @ enc.tensor("enc0.W") + enc.tensor("enc0.b"))
    h1, d1 = _tanh(h0 @ enc.tensor("enc1.W") + enc.tensor("enc1.b"))
    g = h1.mean(axis=0)
    lat = g @ enc.tensor("enc2.W") + enc.tensor("enc2.b")
    return lat, (obs_points, h0, d0, h1, d1, g)


def encode_partial(obs: PartialObservation, enc: EncoderParams) -> np.ndarray:
    """Permutation-invariant latent: shared point MLP, mean pool, linear head."""
    lat, _ = _encode_cache(obs.points, enc)
    return lat


def _encoder_backward(cache, dlat, enc: EncoderParams, grad_flat):
    pts, h0, d0, h1, d1, g = cache
    k = pts.shape[0]
    gview = EncoderParams(enc.cfg, grad_flat, enc.shapes)
    gview.tensor("enc2.W")[:] += np.outer(g, dlat)
    gview.tensor("enc2.b")[:] += dlat
    dg = enc.tensor("enc2.W") @ dlat
    dh1 = np.broadcast_to(dg / k, h1.shape) * d1
    gview.tensor("enc1.W")[:] += h0.T @ dh1
    gview.tensor("enc1.b")[:] += dh1.sum(axis=0)
    dh0 = (dh1 @ enc.tensor("enc1.W").T) * d0
    gview.tensor("enc0.W")[:] += pts.T @ dh0
    gview.tensor("enc0.b")[:] += dh0.sum(axis=0)


# ---------------------------------------------------------------------------
# pair sampling per coupling mode
# ---------------------------------------------------------------------------


def _draw_pairs(cfg: TrainConfig, sources, rng: RngState):
    """One batch of training pairs plus the source index of each element."""
    b = cfg.batch_size
    n = cfg.n_points
    picks = [int(rng.integers(0, len(sources))) for _ in range(b)]

    if cfg.coupling_mode == "superset":
        pairs = []
        for src_idx in picks:
            src = sources[src_idx]
            if not isinstance(src, SupersetCoupling):
                raise ConfigError("superset mode needs SupersetCoupling sources")
            pairs.append(sample_coupled_pair(src, n, rng))
        return pairs, picks

    def draw_data(src_idx):
        src = sources[src_idx]
        pts = src.x1_rows if isinstance(src, SupersetCoupling) else _as_points(src)
        _, cloud = subsample(Superset(pts, kind="data"), n, rng)
        return cloud

    if cfg.coupling_mode == "independent":
        return [independent_pair(draw_data(i), rng) for i in picks], picks

    group = cfg.ot_group_size or b
    if b % group != 0:
        raise ConfigError(f"batch_size {b} must be a multiple of ot_group_size {group}")
    pairs = []
    for g0 in range(0, b, group):
        gpicks = picks[g0 : g0 + group]
        datas = [draw_data(i).points for i in gpicks]
        noises = [rng.normal((n, 3)) for _ in gpicks]
        if cfg.coupling_mode == "minibatch_ot":
            pairs.extend(minibatch_ot_pairs(noises, datas))
        else:
            pairs.extend(equivariant_ot_pairs(noises, datas))
    return pairs, picks


# ---------------------------------------------------------------------------
# the training step and loop
# ---------------------------------------------------------------------------


def train_step(
    params: VectorFieldParams,
    opt: AdamState,
    cfg: TrainConfig,
    pairs,
    rng: RngState,
    encoder: EncoderParams | None = None,
    encoder_opt: AdamState | None = None,
    observations=None,
):
    """One optimization step over a batch of pairs; returns (loss, grad_norm).

    Superset mode applies the hybrid perturbation to x0 first.  When an
    encoder and per-element observations are given, the condition latent is
    computed inside the step and the encoder is trained jointly through the
    latent gradient.
    """
    if not pairs:
        raise ValueError("empty batch")
    x0 = np.stack([p.x0 for p in pairs])
    x1 = np.stack([p.x1 for p in pairs])
    b, n, _ = x0.shape

    if cfg.coupling_mode == "superset" and cfg.beta > 0.0:
        x0 = hybrid_perturb(x0.reshape(b * n, 3), cfg.beta, rng).reshape(b, n, 3)

    cond = None
    caches = None
    if encoder is not None:
        if observations is None or len(observations) != b:
            raise ValueError("joint encoder training needs one observation per batch element")
        lat_caches = [_encode_cache(o.points, encoder) for o in observations]
        cond = np.stack([lc[0] for lc in lat_caches])
        caches = [lc[1] for lc in lat_caches]

    t = rng.uniform(0.0, 1.0, b)
    x_t = interpolate(x0, x1, t)
    u = x1 - x0
    loss, grad, grad_cond = loss_and_grads(params, x_t, t, u, cond)
    if not np.isfinite(loss):
        raise NumericError(
            f"non-finite loss at step {params.step_count} (t={t}, grad_norm so far unknown)"
        )
    grad_norm = float(np.linalg.norm(grad))
    if not np.isfinite(grad_norm):
        raise NumericError(f"non-finite gradient at step {params.step_count}")

    lr = cfg.lr_at(params.step_count)
    opt.update(params.flat, grad, lr, cfg.betas, cfg.adam_eps)
    if encoder is not None:
        enc_grad = np.zeros_like(encoder.flat)
        for cache, dlat in zip(caches, grad_cond):
            _encoder_backward(cache, dlat, encoder, enc_grad)
        encoder_opt.update(encoder.flat, enc_grad, lr, cfg.betas, cfg.adam_eps)
    ema_update(params, cfg.ema_decay)
    params.step_count += 1
    return loss, grad_norm


@dataclass
class TrainState:
    """Everything the loop mutates; resuming from a saved state continues
    the loss sequence bit for bit."""

    params: VectorFieldParams
    opt: AdamState
    stream: RngState
    encoder: EncoderParams | None = None
    encoder_opt: AdamState | None = None

    @classmethod
    def fresh(cls, net_cfg, cfg, encoder_cfg=None):
        rng = RngState(cfg.seed)
        params = init_network(net_cfg, rng.fork(1))
        opt = AdamState.for_params(params.flat)
        encoder = encoder_opt = None
        if encoder_cfg is not None:
            if net_cfg.cond_dim <= 0:
                raise ConfigError("conditional training needs cond_dim > 0 in NetConfig")
            encoder = init_encoder(encoder_cfg, rng.fork(2))
            encoder_opt = AdamState.for_params(encoder.flat)
        return cls(params, opt, rng.fork(3), encoder, encoder_opt)


def fit(
    net_cfg: NetConfig,
    cfg: TrainConfig,
    sources,
    encoder_cfg: EncoderConfig | None = None,
    observations_by_source=None,
    state: TrainState | None = None,
):
    """Train a vector field from scratch or continue a TrainState.

    sources: one entry per shape; SupersetCoupling for superset mode, a
    data Superset for the online modes.  observations_by_source supplies a
    PartialObservation per source for conditional training.

    Returns (state, log); log rows are dicts with step, loss, lr,
    grad_norm, one per log_every steps plus the final step.  Training runs
    from state.params.step_count up to cfg.total_steps.
    """
    if state is None:
        state = TrainState.fresh(net_cfg, cfg, encoder_cfg)
    conditional = state.encoder is not None
    if conditional:
        if observations_by_source is None or len(observations_by_source) != len(sources):
            raise ConfigError("conditional training needs one observation per source")

    log = []
    for step in range(state.params.step_count, cfg.total_steps):
        pairs, picks = _draw_pairs(cfg, sources, state.stream)
        obs = [observations_by_source[i] for i in picks] if conditional else None
        loss, grad_norm = train_step(
            state.params, state.opt, cfg, pairs, state.stream, state.encoder, state.encoder_opt, obs
        )
        if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
            log.append(
                {"step": step, "loss": loss, "lr": cfg.lr_at(step), "grad_norm": grad_norm}
            )
    return state, log


# ---------------------------------------------------------------------------
# resume state (full float64 fidelity, unlike the inference checkpoint)
# ---------------------------------------------------------------------------


def save_resume(path, state: TrainState):
    meta = {
        "net": state.params.cfg.to_dict(),
        "step_count": int(state.params.step_count),
        "rng": state.stream.state_dict(),
        "encoder": state.encoder.cfg.to_dict() if state.encoder is not None else None,
    }
    arrays = {
        "flat": state.params.flat,
        "ema": state.params.ema,
        "adam_m": state.opt.m,
        "adam_v": state.opt.v,
        "adam_t": np.array([state.opt.t], dtype=np.int64),
        "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
    }
    if state.encoder is not None:
        arrays["enc_flat"] = state.encoder.flat
        arrays["enc_m"] = state.encoder_opt.m
        arrays["enc_v"] = state.encoder_opt.v
        arrays["enc_t"] = np.array([state.encoder_opt.t], dtype=np.int64)
    np.savez(path, **arrays)


def load_resume(path) -> TrainState:
    data = np.load(path)
    meta = json.loads(bytes(data["meta"]).decode())
    net_cfg = NetConfig(**meta["net"])
    from .network import _build_shapes

    shapes, _ = _build_shapes(net_cfg)
    params = VectorFieldParams(net_cfg, data["flat"].copy(), data["ema"].copy(), meta["step_count"], shapes)
    opt = AdamState(data["adam_m"].copy(), data["adam_v"].copy(), int(data["adam_t"][0]))
    stream = RngState.from_state_dict(meta["rng"])
    encoder = encoder_opt = None
    if meta.get("encoder"):
        enc_cfg = EncoderConfig(**meta["encoder"])
        encoder = init_encoder(enc_cfg, RngState(0))
        encoder.flat[:] = data["enc_flat"]
        encoder_opt = AdamState(data["enc_m"].copy(), data["enc_v"].copy(), int(data["enc_t"][0]))
    return TrainState(params, opt, stream, encoder, encoder_opt)
