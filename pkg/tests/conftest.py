import numpy as np
import pytest

from pcflow import RngState, hungarian
from pcflow.coupling import TrainingPair
from pcflow.network import NetConfig, init_network
from pcflow.ot import squared_distances
from pcflow.training import AdamState, TrainConfig, train_step


def _overfit(pair, net_cfg, cfg, seed):
    params = init_network(net_cfg, RngState(seed).fork(1))
    opt = AdamState.for_params(params.flat)
    stream = RngState(seed).fork(2)
    batch = [pair] * cfg.batch_size
    losses = []
    for _ in range(cfg.total_steps):
        loss, _ = train_step(params, opt, cfg, batch, stream)
        losses.append(loss)
    return params, losses


@pytest.fixture(scope="session")
def overfit_model():
    """A net memorizing one assignment-aligned pair.

    Alignment keeps the interpolation lines from crossing, so the pointwise
    velocity target is well posed and the loss can collapse; the trained
    field transports x0 onto x1 almost exactly.
    """
    rng = RngState(777)
    n = 16
    x0 = rng.normal((n, 3))
    x1_raw = rng.normal((n, 3)) * 0.5 + np.array([1.0, 0.0, -0.5])
    perm = hungarian(squared_distances(x0, x1_raw)).perm
    pair = TrainingPair(x0, x1_raw[perm])
    net_cfg = NetConfig(hidden_width=64, depth=3, time_embed_dim=16)
    cfg = TrainConfig(
        lr=3e-3, lr_decay=0.85, lr_decay_every=500, batch_size=8,
        total_steps=12_000, beta=0.0, coupling_mode="independent",
        n_points=n, seed=5,
    )
    params, losses = _overfit(pair, net_cfg, cfg, 777)
    return {"params": params, "pair": pair, "losses": losses, "cfg": cfg}


@pytest.fixture(scope="session")
def constant_field_model():
    """A net memorizing a pure-translation pair; the exact solution is a
    constant field (head bias only), so the fit gets extremely deep."""
    rng = RngState(888)
    n = 16
    x0 = rng.normal((n, 3))
    pair = TrainingPair(x0, x0 + np.array([1.0, 0.0, -0.5]))
    net_cfg = NetConfig(hidden_width=32, depth=2, time_embed_dim=8)
    cfg = TrainConfig(
        lr=3e-3, lr_decay=0.8, lr_decay_every=300, batch_size=8,
        total_steps=4000, beta=0.0, coupling_mode="independent",
        n_points=n, seed=5,
    )
    params, losses = _overfit(pair, net_cfg, cfg, 888)
    return {"params": params, "pair": pair, "losses": losses}
