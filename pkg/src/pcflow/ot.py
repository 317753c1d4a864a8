"""Exact and entropic optimal transport.

Three layers live here:

* squared-Euclidean cost matrices and the minimum-cost assignment
  (``hungarian``), with a deterministic lexicographic tie-break;
* a log-domain stabilized Sinkhorn solver with geometric epsilon annealing,
  exposed as the debiased ``sinkhorn_divergence`` together with its exact
  position gradient;
* ``wasserstein_gradient_flow``, which deforms a noise superset onto a
  target superset by descending the Sinkhorn divergence while preserving
  row correspondence.

All solves run in float64.  Epsilon values inside a SinkhornConfig are
absolute (model units squared); they are derived from cloud geometry once,
at config construction, so that divergence values and gradients are pure
functions of the input coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, NumericError
from .geometry import Superset, _as_points
from .rng import RngState

# lexicographic tie repair is exact but O(n^3)-ish; above this size the
# solver's deterministic optimum is returned as-is
LEX_REPAIR_MAX = 512


def squared_distances(a, b) -> np.ndarray:
    """Pairwise squared Euclidean distances, (len(a), len(b))."""
    pa, pb = _as_points(a), _as_points(b)
    c = (pa * pa).sum(1)[:, None] + (pb * pb).sum(1)[None, :] - 2.0 * (pa @ pb.T)
    return np.maximum(c, 0.0, out=c)


def cost_matrix(a, b) -> np.ndarray:
    """Squared-Euclidean cost matrix between two point clouds."""
    pa, pb = _as_points(a), _as_points(b)
    if pa.shape[0] < 1 or pb.shape[0] < 1:
        raise ValueError("cost_matrix requires nonempty clouds")
    return squared_distances(pa, pb)


@dataclass
class Assignment:
    """A bijection stored as perm (row i pairs with column perm[i])."""

    perm: np.ndarray
    total_cost: float


def _lex_min_perm(C, perm, n):
    """Among all minimum-cost permutations, return the lexicographically
    smallest.  Uses optimal duals to restrict to tight edges, then a greedy
    forced-edge matching scan."""
    rows = np.arange(n)
    inv = np.empty(n, dtype=np.int64)
    inv[perm] = rows
    # difference constraints v[j] - v[perm[i]] <= C[i,j] - C[i,perm[i]]
    Cp = C[inv, :]
    W = Cp - Cp[rows, rows][:, None]
    v = np.zeros(n)
    for _ in range(n):
        nv = np.minimum(v, (v[:, None] + W).min(axis=0))
        if (nv == v).all():
            break
        v = nv
    u = C[rows, perm] - v[perm]
    reduced = C - u[:, None] - v[None, :]
    tol = 1e-9 * (1.0 + float(np.abs(C).max()))
    tight = reduced <= tol
    tight[rows, perm] = True  # matched edges are tight by construction
    if (tight.sum(axis=1) == 1).all():
        return perm  # unique optimum

    match = perm.copy()
    owner = np.empty(n, dtype=np.int64)
    owner[match] = rows
    fixed = np.zeros(n, dtype=bool)  # columns claimed by finished rows

    def reassign(start_row, reserved):
        """Augment start_row to a free column in the tight graph, avoiding
        fixed and reserved columns.  Iterative DFS over alternating paths."""
        visited = np.zeros(n, dtype=bool)
        parent_col = {}
        stack = [start_row]
        found = -1
        while stack and found < 0:
            r = stack.pop()
            for c in np.flatnonzero(tight[r]):
                if fixed[c] or c == reserved or visited[c]:
                    continue
                visited[c] = True
                parent_col[c] = r
                if owner[c] < 0:
                    found = c
                    break
                stack.append(owner[c])
        if found < 0:
            return False
        # unwind the alternating path: each row on it slides to the column
        # it proposed, releasing its old column to the previous row
        c = found
        while True:
            r = parent_col[c]
            old = match[r]
            match[r] = c
            owner[c] = r
            if r == start_row:
                break
            c = old
        return True

    for i in range(n):
        current = match[i]
        for j in np.flatnonzero(tight[i]):
            if fixed[j]:
                continue
            if j == current:
                break
            if j > current:
                break  # current column is feasible and smaller candidates failed
            # force edge (i, j): free j's owner and i's own column, then
            # try to re-route the displaced row
            r = owner[j]
            saved_match, saved_owner = match.copy(), owner.copy()
            owner[current] = -1
            match[i] = -1
            owner[j] = -1
            match[r] = -1
            if reassign(r, reserved=j):
                match[i] = j
                owner[j] = i
                break
            match, owner = saved_match, saved_owner
        fixed[match[i]] = True
    return match


def hungarian(cost) -> Assignment:
    """Minimum-total-cost perfect matching of a square cost matrix.

    Ties are broken toward the lexicographically smallest permutation
    (exactly, via optimal duals) for n <= 512; larger matrices return the
    solver's deterministic optimum.
    """
    C = np.asarray(getattr(cost, "values", cost), dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"hungarian requires a square matrix, got {C.shape}")
    if not np.isfinite(C).all():
        raise ValueError("cost matrix contains non-finite entries")
    n = C.shape[0]
    _, cols = linear_sum_assignment(C)
    perm = cols.astype(np.int64)
    if n <= LEX_REPAIR_MAX:
        perm = _lex_min_perm(C, perm, n)
    return Assignment(perm, float(C[np.arange(n), perm].sum()))


# ---------------------------------------------------------------------------
# Log-domain Sinkhorn with uniform weights.
#
# Problems are stacked along a leading batch axis so that one code path
# serves both a single full-size solve and many small block solves.
# ---------------------------------------------------------------------------


@dataclass
class SinkhornConfig:
    """Absolute epsilon schedule and stopping rule for one solve.

    epsilon anneals geometrically from epsilon_start down to epsilon_end
    (one sweep per rung), then refines at epsilon_end until the potential
    sup-change drops below tol or max_iters refinement sweeps elapse.
    """

    epsilon_start: float
    epsilon_end: float
    max_iters: int = 1000
    tol: float = 1e-6
    anneal_steps: int = 20

    def __post_init__(self):
        if self.epsilon_end > self.epsilon_start:
            raise ValueError("epsilon_end must be <= epsilon_start")
        if self.epsilon_end <= 0 or self.tol <= 0:
            raise ValueError("epsilon_end and tol must be positive")

    @classmethod
    def for_clouds(cls, *clouds, start_rel=0.5, end_rel=0.01, **kwargs) -> "SinkhornConfig":
        """Schedule in units of the squared diameter of the pooled clouds.

        The diameter estimate is 2 * max distance to the pooled centroid,
        which is exact for centrally symmetric shapes and never more than a
        factor 2 off in general.
        """
        pts = np.vstack([_as_points(c) for c in clouds])
        center = pts.mean(axis=0)
        diam2 = 4.0 * float(((pts - center) ** 2).sum(axis=1).max())
        diam2 = max(diam2, 1e-12)
        return cls(start_rel * diam2, end_rel * diam2, **kwargs)

    def schedule(self):
        if self.anneal_steps <= 1 or self.epsilon_start == self.epsilon_end:
            return np.array([self.epsilon_end])
        return np.geomspace(self.epsilon_start, self.epsilon_end, self.anneal_steps)


class _Stacked:
    """Sinkhorn potentials for a stack of (n x m) uniform-weight problems.

    Symmetric (self-transport) problems alias the transpose and second
    buffer onto the originals, halving peak memory.
    """

    def __init__(self, C, symmetric=False):
        C = np.ascontiguousarray(C, dtype=np.float64)
        if C.ndim == 2:
            C = C[None]
        self.C = C
        self.symmetric = symmetric
        self.CT = self.C if symmetric else np.ascontiguousarray(C.transpose(0, 2, 1))
        self.nb, self.n, self.m = C.shape
        self.lw_col = -np.log(self.m)  # log weight of each column atom
        self.lw_row = -np.log(self.n)
        self.f = np.zeros((self.nb, self.n))
        self.g = np.zeros((self.nb, self.m))
        self._buf = np.empty_like(self.C)
        self._buft = self._buf if symmetric else np.empty_like(self.CT)

    def _lse_apply(self, buf, M, pot, eps, lw):
        """-eps * logsumexp over the last axis of (lw + (pot - M)/eps)."""
        np.subtract(pot[:, None, :], M, out=buf)
        buf /= eps
        mx = buf.max(axis=2)
        buf -= mx[:, :, None]
        np.exp(buf, out=buf)
        s = buf.sum(axis=2)
        return -eps * (np.log(s) + mx + lw)

    def sweep(self, eps):
        """One averaged simultaneous update of both potentials.

        Both proposals are computed from the previous iterates and then
        averaged with them.  Unlike the plain alternating sweep this does
        not degenerate on (near-)symmetric problems, where the alternating
        iteration slows down arbitrarily; at C symmetric it reduces exactly
        to the self-transport iteration.
        """
        f_new = self._lse_apply(self._buf, self.C, self.g, eps, self.lw_col)
        g_new = self._lse_apply(self._buft, self.CT, self.f, eps, self.lw_row)
        self.f = 0.5 * (self.f + f_new)
        self.g = 0.5 * (self.g + g_new)

    def sweep_symmetric(self, eps):
        """Averaged fixed-point update for self-transport (requires n == m
        and symmetric C); keeps f == g and converges without oscillation."""
        t = self._lse_apply(self._buf, self.C, self.f, eps, self.lw_col)
        self.f = 0.5 * (self.f + t)
        self.g = self.f

    def refine(self, eps, tol, cap, symmetric=False):
        converged = False
        for _ in range(max(int(cap), 0)):
            f_old, g_old = self.f, self.g
            if symmetric:
                self.sweep_symmetric(eps)
            else:
                self.sweep(eps)
            delta = max(np.abs(self.f - f_old).max(), np.abs(self.g - g_old).max())
            if delta < tol:
                converged = True
                break
        return converged

    def anneal(self, eps_list, symmetric=False):
        for eps in eps_list:
            if symmetric:
                self.sweep_symmetric(eps)
            else:
                self.sweep(eps)

    def values(self):
        """Dual objective per stacked problem."""
        return self.f.mean(axis=1) + self.g.mean(axis=1)

    def plan_row_stats(self, eps, targets):
        """Row masses and barycentric sums of the transport plan.

        Returns (row_mass (nb, n), bary (nb, n, 3)) with
        bary[b, i] = sum_j pi[b, i, j] * targets[b, j].
        """
        buf = self._buf
        np.subtract(self.g[:, None, :], self.C, out=buf)
        buf += self.f[:, :, None]
        buf /= eps
        np.exp(buf, out=buf)
        buf *= 1.0 / (self.n * self.m)
        row_mass = buf.sum(axis=2)
        bary = buf @ targets
        return row_mass, bary


def _solve_pair(Ca, cfg, symmetric):
    prob = _Stacked(Ca, symmetric=symmetric)
    prob.anneal(cfg.schedule(), symmetric=symmetric)
    conv = prob.refine(cfg.epsilon_end, cfg.tol, cfg.max_iters, symmetric=symmetric)
    return prob, conv


@dataclass
class SinkhornResult:
    value: float
    grad_a: np.ndarray
    converged: bool


def sinkhorn_divergence(a, b, cfg: SinkhornConfig | None = None, want_grad=True) -> SinkhornResult:
    """Debiased entropic OT divergence S(a, b) with gradient in a.

    S = OT_eps(a,b) - OT_eps(a,a)/2 - OT_eps(b,b)/2 under uniform weights
    and squared-Euclidean cost.  The gradient is the envelope-theorem
    derivative at the converged plans; it matches central finite
    differences when cfg.tol is tight (the config is held fixed, so the
    value is a pure function of the coordinates).

    Non-convergence within cfg.max_iters sets converged=False on the
    result instead of raising.
    """
    pa, pb = _as_points(a), _as_points(b)
    if cfg is None:
        cfg = SinkhornConfig.for_clouds(pa, pb)
    eps = cfg.epsilon_end
    same = pa.shape == pb.shape and np.array_equal(pa, pb)

    # canonical argument order makes S(a,b) and S(b,a) bitwise equal
    swapped = False
    if not same and pb.tobytes() < pa.tobytes():
        pa, pb = pb, pa
        swapped = True

    paa, conv_aa = _solve_pair(squared_distances(pa, pa), cfg, symmetric=True)
    if same:
        pab, conv_ab = paa, conv_aa
        pbb, conv_bb = paa, conv_aa
    else:
        pab, conv_ab = _solve_pair(squared_distances(pa, pb), cfg, symmetric=False)
        pbb, conv_bb = _solve_pair(squared_distances(pb, pb), cfg, symmetric=True)

    value = float(pab.values()[0] - 0.5 * paa.values()[0] - 0.5 * pbb.values()[0])
    converged = bool(conv_ab and conv_aa and conv_bb)
    if not want_grad:
        return SinkhornResult(value, None, converged)

    grad_slot = 1 if swapped else 0
    if grad_slot == 0:
        rm_ab, bar_b = pab.plan_row_stats(eps, pb[None])
        rm_aa, bar_a = paa.plan_row_stats(eps, pa[None])
        grad = 2.0 * (pa * rm_ab[0][:, None] - bar_b[0]) - 2.0 * (pa * rm_aa[0][:, None] - bar_a[0])
    else:
        # gradient w.r.t. the second slot: transpose the ab problem
        tr = _Stacked(pab.CT[0])
        tr.f, tr.g = pab.g.copy(), pab.f.copy()
        rm_ab, bar_a = tr.plan_row_stats(eps, pa[None])
        rm_bb, bar_b = pbb.plan_row_stats(eps, pb[None])
        grad = 2.0 * (pb * rm_ab[0][:, None] - bar_a[0]) - 2.0 * (pb * rm_bb[0][:, None] - bar_b[0])
    return SinkhornResult(value, grad, converged)


# ---------------------------------------------------------------------------
# Wasserstein gradient flow
# ---------------------------------------------------------------------------


@dataclass
class WgfConfig:
    """Controls the superset deformation flow.

    The update is x <- x - step_size * m * grad(S).  Because the squared
    Euclidean cost contributes a factor 2 to the gradient, step_size 0.5
    makes the step exactly the divergence's displacement field at uniform
    weights; a full unit step overshoots 2x and settles in a noisy shell
    around the target instead of on it.

    For supersets larger than block_threshold the flow switches to
    stochastic block descent: each outer iteration re-partitions rows into
    random blocks of block_size and descends the blockwise divergence
    (history entries are then means over blocks).
    """

    iters: int = 200
    step_size: float = 0.5
    sinkhorn: SinkhornConfig | None = None  # derived from the target when None
    warm_refine: int = 30      # refinement sweep budget per outer iteration (full mode)
    first_refine: int = 120    # refinement budget after a fresh anneal
    reanneal_disp: float = 0.5  # re-anneal when positions moved > this * blur radius
    block_threshold: int = 4096
    block_size: int = 512
    block_anneal: int = 10
    block_refine: int = 4
    stop_ratio: float = 1e-4   # stop once S drops below stop_ratio * S_initial
    stall_tol: float = 3e-6    # relative |dS|/S0 below which progress counts as stalled
    stall_patience: int = 10
    seed: int = 0              # drives block partitions only

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")


def _wgf_full(x, target, cfg, sk):
    m = x.shape[0]
    eps = sk.epsilon_end
    lam = cfg.step_size
    history = []
    increases = 0
    stalled = 0
    # positions that moved further than a fraction of the blur radius
    # invalidate warm potentials; re-anneal then
    disp_limit = cfg.reanneal_disp * np.sqrt(eps)
    init_cfg = replace(sk, max_iters=cfg.first_refine)

    pbb, _ = _solve_pair(squared_distances(target, target), init_cfg, symmetric=True)
    vbb = pbb.values()[0]

    pab = paa = None
    last_disp = np.inf
    for k in range(cfg.iters + 1):
        Cab = squared_distances(x, target)
        Caa = squared_distances(x, x)
        if pab is None or last_disp > disp_limit:
            pab, _ = _solve_pair(Cab, init_cfg, symmetric=False)
            paa, _ = _solve_pair(Caa, init_cfg, symmetric=True)
        else:
            pab.C[:] = Cab
            pab.CT[:] = Cab.T
            paa.C[:] = Caa
            pab.refine(eps, sk.tol, cfg.warm_refine)
            paa.refine(eps, sk.tol, cfg.warm_refine, symmetric=True)
        S = float(pab.values()[0] - 0.5 * paa.values()[0] - 0.5 * vbb)
        history.append(S)
        if history[0] > 0 and 0.0 < S <= cfg.stop_ratio * history[0]:
            break
        if len(history) > 1:
            delta = S - history[-2]
            scale0 = max(abs(history[0]), 1e-30)
            if abs(delta) < cfg.stall_tol * scale0:
                stalled += 1
                increases = 0
                if stalled >= cfg.stall_patience:
                    break
            elif delta > 0:
                increases += 1
                stalled = 0
                if increases >= 10:
                    raise NumericError(
                        f"gradient flow divergence increased for {increases} consecutive "
                        f"iterations (iteration {k}, S={S:.6g}); history={history[-12:]}"
                    )
            else:
                increases = 0
                stalled = 0
        if k == cfg.iters:
            break
        rm_ab, bar_b = pab.plan_row_stats(eps, target[None])
        rm_aa, bar_a = paa.plan_row_stats(eps, x[None])
        grad = 2.0 * (x * rm_ab[0][:, None] - bar_b[0]) - 2.0 * (x * rm_aa[0][:, None] - bar_a[0])
        step = lam * m * grad
        last_disp = float(np.sqrt((step**2).sum(axis=1).max()))
        x = x - step
        if not np.isfinite(x).all():
            raise NumericError(f"gradient flow produced non-finite positions at iteration {k}")
    return x, history


def _wgf_blocks(x, target, cfg, sk):
    m = x.shape[0]
    lam = cfg.step_size
    eps = sk.epsilon_end
    bs = int(cfg.block_size)
    nb = m // bs  # leftover rows (< bs) rest one iteration and rotate in later
    if nb < 1:
        raise ValueError("block_size larger than superset")
    rng = RngState(cfg.seed).fork(977)
    block_cfg = replace(sk, anneal_steps=cfg.block_anneal, max_iters=cfg.block_refine)
    history = []
    increases = 0
    stalled = 0

    def _block_sqdist(u, v):
        c = np.einsum("bij,bij->bi", u, u)[:, :, None] \
            + np.einsum("bij,bij->bi", v, v)[:, None, :] \
            - 2.0 * (u @ v.transpose(0, 2, 1))
        return np.maximum(c, 0.0, out=c)

    for k in range(cfg.iters + 1):
        perm_x = rng.permutation(m)[: nb * bs].reshape(nb, bs)
        perm_t = rng.permutation(m)[: nb * bs].reshape(nb, bs)
        xs = x[perm_x]           # (nb, bs, 3)
        ts = target[perm_t]

        # solve the three problem stacks sequentially to bound peak memory
        pbb, _ = _solve_pair(_block_sqdist(ts, ts), block_cfg, symmetric=True)
        vbb = pbb.values()
        del pbb
        pab, _ = _solve_pair(_block_sqdist(xs, ts), block_cfg, symmetric=False)
        vab = pab.values()
        rm_ab, bar_b = pab.plan_row_stats(eps, ts)
        del pab
        paa, _ = _solve_pair(_block_sqdist(xs, xs), block_cfg, symmetric=True)
        vaa = paa.values()
        rm_aa, bar_a = paa.plan_row_stats(eps, xs)
        del paa

        S_blocks = vab - 0.5 * vaa - 0.5 * vbb
        S = float(S_blocks.mean())
        history.append(S)
        if history[0] > 0 and 0.0 < S <= cfg.stop_ratio * history[0]:
            break
        if len(history) > 1:
            delta = S - history[-2]
            scale0 = max(abs(history[0]), 1e-30)
            if abs(delta) < cfg.stall_tol * scale0:
                stalled += 1
                increases = 0
                if stalled >= cfg.stall_patience:
                    break
            elif delta > 0:
                increases += 1
                stalled = 0
                if increases >= 10:
                    raise NumericError(
                        f"blockwise gradient flow diverged at iteration {k}: "
                        f"history={history[-12:]}"
                    )
            else:
                increases = 0
                stalled = 0
        if k == cfg.iters:
            break
        grad = 2.0 * (xs * rm_ab[:, :, None] - bar_b) - 2.0 * (xs * rm_aa[:, :, None] - bar_a)
        upd = xs - lam * bs * grad
        x = x.copy()
        x[perm_x.reshape(-1)] = upd.reshape(-1, 3)
        if not np.isfinite(x).all():
            raise NumericError(f"blockwise gradient flow produced non-finite positions at iteration {k}")
    return x, history


def wasserstein_gradient_flow(noise: Superset, target: Superset, cfg: WgfConfig | None = None):
    """Deform a noise superset onto a target by Sinkhorn-divergence descent.

    Row i of the returned superset is the flowed position of noise row i,
    so the identity map on rows is the coupling.  Returns
    (deformed Superset, divergence history); history[0] is the initial
    divergence and history[-1] the final one.

    Raises NumericError if the divergence increases for 10 consecutive
    iterations.
    """
    xn = _as_points(noise)
    xt = _as_points(target)
    if xn.shape[0] != xt.shape[0]:
        raise ValueError("noise and target supersets must have equal size")
    if cfg is None:
        cfg = WgfConfig()
    sk = cfg.sinkhorn or SinkhornConfig.for_clouds(xt)
    if xn.shape[0] > cfg.block_threshold:
        deformed, history = _wgf_blocks(xn.copy(), xt, cfg, sk)
    else:
        deformed, history = _wgf_full(xn.copy(), xt, cfg, sk)
    return Superset(deformed, kind="data"), history


def exact_superset_ot(noise: Superset, data: Superset, threshold=10000) -> Assignment:
    """Minimum-cost bijection between equal-size supersets.

    Refuses supersets above the exact-solver threshold; use the
    wasserstein_gradient_flow path for those.
    """
    xn, xd = _as_points(noise), _as_points(data)
    if xn.shape[0] != xd.shape[0]:
        raise ValueError("supersets must have equal size")
    m = xn.shape[0]
    if m > threshold:
        raise ConfigError(
            f"superset size {m} exceeds the exact assignment threshold {threshold}; "
            "use the Wasserstein gradient flow path for large supersets"
        )
    C = squared_distances(xn, xd)
    if m <= LEX_REPAIR_MAX:
        return hungarian(C)
    _, cols = linear_sum_assignment(C)
    perm = cols.astype(np.int64)
    return Assignment(perm, float(C[np.arange(m), perm].sum()))
