"""Gibbs sampler for the strict trilinear joint factorization of coupled views.

Model: entry (n, d, l) of view t is Gaussian with mean sum_k z_{n,k}
v_{d,k} u_{l,k} and precision tau_t.  Component activity per view is
controlled by a spike-and-slab prior on the loading columns: h_{t,k} = 0
pins column k of V^(t) to exact zeros, h_{t,k} = 1 gives it an element-wise
ARD slab N(0, 1/alpha_{d,k}).  Matrix views (L = 1) have their third-mode
factor fixed to 1; with only matrix views the sampler is exactly a
multi-view matrix factorization.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import betaln, gammaln

from .core import Collection, Tensor3, validate_collection
from .dist import (
    NotPositiveDefiniteError,
    RngStream,
    cholesky_precision,
    draw_bernoulli_logodds,
    draw_mvn_precision_chol,
)

__all__ = [
    "HyperParams",
    "MtfState",
    "PosteriorSamples",
    "ModelData",
    "prepare",
    "init_state",
    "update_z",
    "update_vh",
    "update_u",
    "update_hypers",
    "mtf_sweep",
    "run_chain",
    "log_joint",
    "reconstruct_mean",
    "component_structure",
    "ComponentStructure",
    "sample_state_from_prior",
    "simulate_data",
]

_ALPHA_FLOOR = 1e-300  # keeps log(alpha) finite when ARD prior draws underflow


@dataclass
class HyperParams:
    """Component budget, prior parameters, and sampling schedule.

    Gamma/Beta priors are shape-rate / (a, b).  ``b_tau=None`` resolves the
    noise-precision rate per view from the data so that the prior mean
    matches a signal-to-noise ratio of 1 (noise variance = half the observed
    per-element variance); ``a_tau`` then controls how peaked that prior is.
    """

    k: int
    a_pi: float = 1.0
    b_pi: float = 1.0
    a_alpha: float = 1e-3
    b_alpha: float = 1e-3
    a_tau: float = 1.0
    b_tau: float | None = None
    # relaxed-model extras (ignored by the strict sampler)
    a_beta: float = 1e-3
    b_beta: float = 1e-3
    a_lambda: float = 1.0
    b_lambda: float = 1.0
    lambda_mode: str = "global"  # global | per_component | per_slab
    # schedule
    burn_in: int = 3000
    n_samples: int = 40
    thin: int = 10
    n_chains: int = 7

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"component budget must be >= 1, got {self.k}")
        for name in ("a_pi", "b_pi", "a_alpha", "b_alpha", "a_tau",
                     "a_beta", "b_beta", "a_lambda", "b_lambda"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.b_tau is not None and self.b_tau <= 0:
            raise ValueError("b_tau must be positive when given")
        if self.lambda_mode not in ("global", "per_component", "per_slab"):
            raise ValueError(f"unknown lambda_mode {self.lambda_mode!r}")
        if self.burn_in < 0 or self.n_samples < 1 or self.thin < 1 or self.n_chains < 1:
            raise ValueError("schedule fields must be positive (burn_in may be 0)")


@dataclass
class ViewData:
    """One view rearranged for sampling: values as (N, L, D), masked entries zeroed."""

    x: np.ndarray                 # (N, L, D)
    obs: np.ndarray | None        # (N, L, D) float 0/1, None when fully observed
    name: str
    n_obs: int
    obs_per_slab: np.ndarray      # (L,) observed counts
    var_obs: float                # mean unbiased fiber variance (0 if undefined)
    var_slab: np.ndarray          # (L,) same per slab

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def l(self) -> int:
        return self.x.shape[1]

    @property
    def d(self) -> int:
        return self.x.shape[2]

    def is_matrix(self) -> bool:
        return self.x.shape[1] == 1


def _fiber_variance(values_nld, obs_nld):
    """Mean over (slab, feature) fibers of the unbiased variance of observed entries."""
    counts = obs_nld.sum(axis=0)  # (L, D)
    ok = counts >= 2
    if not np.any(ok):
        return 0.0, np.zeros(values_nld.shape[1])
    x = values_nld * obs_nld
    mean = np.where(ok, x.sum(axis=0) / np.maximum(counts, 1), 0.0)
    var = ((x - mean[None]) ** 2 * obs_nld).sum(axis=0) / np.maximum(counts - 1, 1)
    per_slab = np.array([var[l][ok[l]].mean() if ok[l].any() else 0.0
                         for l in range(values_nld.shape[1])])
    return float(var[ok].mean()), per_slab


@dataclass
class ModelData:
    """A collection compiled into sampling-ready arrays plus resolved priors."""

    views: list[ViewData]
    u_groups: list[list[int]]
    group_of: dict[int, int]
    hp: HyperParams
    b_tau: np.ndarray             # (T,) resolved noise-precision rates
    b_tau_slab: list[np.ndarray]  # per view (L_t,)

    @property
    def n(self) -> int:
        return self.views[0].n

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.views]

    def set_values(self, t: int, values_nld: np.ndarray):
        """Replace view t's values (sampler-correctness harness hook)."""
        v = self.views[t]
        v.x = values_nld * v.obs if v.obs is not None else np.ascontiguousarray(values_nld)


def prepare(c: Collection, hp: HyperParams, validate: bool = True) -> ModelData:
    if validate:
        problems = validate_collection(c)
        if problems:
            raise ValueError("invalid collection: " + "; ".join(problems))
    views = []
    for t, mv in enumerate(c.views):
        x = np.ascontiguousarray(mv.values.transpose(0, 2, 1))  # (N, L, D)
        obs_b = mv.observed.transpose(0, 2, 1)
        fully = bool(obs_b.all())
        obs = None if fully else np.ascontiguousarray(obs_b, dtype=np.float64)
        if not fully:
            x = x * obs
        var, var_slab = _fiber_variance(x, obs_b.astype(np.float64))
        views.append(ViewData(
            x=x, obs=obs, name=c.names[t], n_obs=int(obs_b.sum()),
            obs_per_slab=obs_b.sum(axis=(0, 2)), var_obs=var, var_slab=var_slab,
        ))
    groups = c.u_groups()
    group_of = {t: g for g, members in enumerate(groups) for t in members}
    b_tau = np.empty(len(views))
    b_tau_slab = []
    for t, v in enumerate(views):
        if hp.b_tau is not None:
            b_tau[t] = hp.b_tau
            b_tau_slab.append(np.full(v.l, hp.b_tau))
        else:
            if v.var_obs <= 0 or np.any(v.var_slab <= 0):
                raise ValueError(
                    f"cannot resolve the SNR-1 noise prior for view {t} "
                    "(no usable observed variance); pass an explicit b_tau"
                )
            b_tau[t] = hp.a_tau * 0.5 * v.var_obs
            b_tau_slab.append(hp.a_tau * 0.5 * v.var_slab)
    return ModelData(views, groups, group_of, hp, b_tau, b_tau_slab)


def _as_data(c, hp: HyperParams | None = None) -> ModelData:
    if isinstance(c, ModelData):
        return c
    if hp is None:
        raise ValueError("hyperparameters are required when passing a raw Collection")
    return prepare(c, hp)


@dataclass
class MtfState:
    """All latent variables of one chain, plus the view/group structure."""

    Z: np.ndarray                  # (N, K)
    V: list[np.ndarray]            # per view (D_t, K)
    U: list[np.ndarray]            # per third-mode group (L_g, K)
    H: np.ndarray                  # (T, K) exact 0/1
    pi: np.ndarray                 # (K,)
    alpha: list[np.ndarray]        # per view (D_t, K)
    tau: np.ndarray                # (T,)
    group_of: dict[int, int] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.Z.shape[1]

    @property
    def n_views(self) -> int:
        return len(self.V)

    def u_for_view(self, t: int) -> np.ndarray:
        """Third-mode factors of view t; the constant 1 row for matrices."""
        if t in self.group_of:
            return self.U[self.group_of[t]]
        return np.ones((1, self.k))

    def copy(self) -> "MtfState":
        return MtfState(
            Z=self.Z.copy(),
            V=[v.copy() for v in self.V],
            U=[u.copy() for u in self.U],
            H=self.H.copy(),
            pi=self.pi.copy(),
            alpha=[a.copy() for a in self.alpha],
            tau=self.tau.copy(),
            group_of=dict(self.group_of),
        )


@dataclass
class PosteriorSamples:
    """Thinned post-burn-in snapshots of one chain plus per-sweep traces."""

    model: str
    states: list
    sweeps: list[int]
    chain_id: int
    trace_names: list[str]
    traces: np.ndarray            # (total_sweeps, 1 + T): log_joint, mse per view
    hp: HyperParams
    view_names: list[str]
    origins: list[int] | None = None   # source-view map when fit on unfolded data

    @property
    def n_snapshots(self) -> int:
        return len(self.states)


def _clip_unit(p):
    """Keep probabilities strictly inside (0, 1); extreme Beta draws underflow."""
    return np.clip(p, 1e-300, np.nextafter(1.0, 0.0))


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _chol_jittered(prec: np.ndarray) -> np.ndarray:
    """Cholesky with one bounded diagonal-jitter rescue."""
    try:
        return cholesky_precision(prec)
    except NotPositiveDefiniteError:
        k = prec.shape[0]
        bumped = prec + np.eye(k) * (1e-8 * np.trace(prec) / k)
        return cholesky_precision(bumped)


def _rank1_fit(data: ModelData, resid, z, n_power: int):
    """Joint rank-1 alternating fit of (z, per-view v, per-group u) to the
    current residuals."""
    vs = [np.zeros(v.d) for v in data.views]
    us = {g: np.full(data.views[m[0]].l, 1.0 / np.sqrt(data.views[m[0]].l))
          for g, m in enumerate(data.u_groups)}
    n = data.n
    for _ in range(n_power):
        zz = float(z @ z) or 1.0
        for t, v in enumerate(data.views):
            if t in data.group_of:
                u = us[data.group_of[t]]
                vs[t] = np.tensordot(u, resid[t], axes=(0, 1)).T @ z \
                    / (zz * float(u @ u))
            else:
                vs[t] = resid[t][:, 0, :].T @ z / zz
        for g, members in enumerate(data.u_groups):
            num = np.zeros(us[g].size)
            den = 0.0
            for t in members:
                num += np.einsum("nld,n,d->l", resid[t], z, vs[t], optimize=True)
                den += zz * float(vs[t] @ vs[t])
            us[g] = num / max(den, 1e-30)
        num = np.zeros(n)
        den = 0.0
        for t, v in enumerate(data.views):
            u = us[data.group_of[t]] if t in data.group_of else np.ones(1)
            b = np.outer(u, vs[t])
            num += np.einsum("nld,ld->n", resid[t], b, optimize=True)
            den += float(np.sum(b * b))
        z = num / max(den, 1e-30)
    return z, vs, us


def _subtract_component(data: ModelData, resid, z, vs, us, sign=1.0):
    for t, v in enumerate(data.views):
        u = us[data.group_of[t]] if t in data.group_of else np.ones(1)
        upd = z[:, None, None] * np.outer(u, vs[t])[None]
        if v.obs is not None:
            upd *= v.obs
        if sign > 0:
            resid[t] -= upd
        else:
            resid[t] += upd


def _above_noise_floor(data: ModelData, resid, z, vs, us, margin: float) -> bool:
    """Keep a fitted component only if it captures more of some view's
    residual than the top singular direction of pure noise would (the
    Marchenko-Pastur edge for that view's matricized shape)."""
    for t, v in enumerate(data.views):
        u = us[data.group_of[t]] if t in data.group_of else np.ones(1)
        cap = float(z @ z) * float(vs[t] @ vs[t]) * float(u @ u)
        total = float(np.sum(resid[t] ** 2))
        if total <= 0:
            continue
        cols = v.d * v.l
        edge = (np.sqrt(data.n) + np.sqrt(cols)) ** 2 / (data.n * cols)
        if cap / total > margin * edge:
            return True
    return False


def _deflation_start(data: ModelData, k: int, gen, n_power: int = 8,
                     n_backfit: int = 2, margin: float = 1.3):
    """Greedy rank-1 warm start: peel dominant joint rank-1 structure off the
    residual one component at a time, then backfit-polish the kept ones.

    A cold random start cannot bootstrap the spike-and-slab race (a random
    direction never accumulates activation evidence), slab-scale random
    loadings crush the latent rows into a degenerate gauge, and a principal
    subspace start leaves the components as mixtures that the race then
    entrenches.  Deflation stops at the noise floor; leftover budget
    components start empty, subject to the activation race like any other.

    Returns (Z, V per view, U per group), gauge-normalized so latent rows
    and third-mode factors sit at their prior scale.
    """
    n = data.n
    resid = [v.x.copy() for v in data.views]
    Z = np.zeros((n, k))
    V = [np.zeros((v.d, k)) for v in data.views]
    group_u = [0.05 * gen.standard_normal((data.views[g[0]].l, k))
               for g in data.u_groups]
    start = gen.standard_normal((n, k))  # fixed draw order for determinism
    fits = {}
    for j in range(k):
        z, vs, us = _rank1_fit(data, resid, start[:, j], n_power)
        if not np.isfinite(z).all() or float(z @ z) == 0.0:
            break
        if not _above_noise_floor(data, resid, z, vs, us, margin):
            break
        fits[j] = (z, vs, us)
        _subtract_component(data, resid, z, vs, us)
    for _ in range(n_backfit):
        for j, (z, vs, us) in fits.items():
            _subtract_component(data, resid, z, vs, us, sign=-1.0)
            z, vs, us = _rank1_fit(data, resid, z, n_power)
            fits[j] = (z, vs, us)
            _subtract_component(data, resid, z, vs, us)
    for j, (z, vs, us) in fits.items():
        # normalize gauge: |z| -> sqrt(N), |u| -> sqrt(L), scale into v
        cz = np.linalg.norm(z) / np.sqrt(n)
        if cz == 0 or not np.isfinite(cz):
            continue
        z = z / cz
        us = dict(us)
        for g in us:
            un = np.linalg.norm(us[g])
            cu = un / np.sqrt(us[g].size) if un > 0 else 1.0
            us[g] = us[g] / cu
            for t in data.u_groups[g]:
                vs[t] = vs[t] * cu
        Z[:, j] = z
        for t in range(data.n_views):
            V[t][:, j] = vs[t] * cz
        for g in us:
            group_u[g][:, j] = us[g]
    return Z, V, group_u


def init_state(c, hp: HyperParams, rng) -> MtfState:
    """Initial chain state: greedy rank-1 warm start for (Z, V, U), H all on,
    ARD precisions at their conditional posterior means, noise precision at
    its SNR-1 target."""
    data = _as_data(c, hp)
    gen = rng.gen if isinstance(rng, RngStream) else rng
    n, k = data.n, hp.k
    if n < k:
        warnings.warn(f"fewer samples ({n}) than components ({k}); expect slow mixing")
    Z, V, U = _deflation_start(data, k, gen)
    pi = _clip_unit(gen.beta(hp.a_pi, hp.b_pi, size=k))
    # conditional posterior mean given the warm-start loadings; empty columns
    # start with a tight (spike-like) slab, so their activation race is run
    # on the data rather than decided by an over-diffuse slab
    alpha = [(hp.a_alpha + 0.5) / (hp.b_alpha + V[t] ** 2 / 2.0)
             for t in range(data.n_views)]
    H = np.ones((data.n_views, k))
    tau = data.hp.a_tau / data.b_tau
    return MtfState(Z=Z, V=V, U=U, H=H, pi=pi, alpha=alpha, tau=tau.copy(),
                    group_of=dict(data.group_of))


def _recon_nld(state: MtfState, t: int) -> np.ndarray:
    """Mean reconstruction of view t as (N, L, D)."""
    u = state.u_for_view(t)
    zu = state.Z[:, None, :] * u[None, :, :]        # (N, L, K)
    return zu @ state.V[t].T                        # (N, L, D)


def reconstruct_mean(state: MtfState, t: int) -> Tensor3:
    """Sum of rank-1 components z_k o v_k o u_k for view t."""
    return Tensor3(_recon_nld(state, t).transpose(0, 2, 1))


def _residual(state: MtfState, data: ModelData, t: int) -> np.ndarray:
    """x - reconstruction, with masked entries held at zero."""
    v = data.views[t]
    r = v.x - _recon_nld(state, t)
    if v.obs is not None:
        r *= v.obs
    return r


def _residuals(state, data):
    return [_residual(state, data, t) for t in range(data.n_views)]


def update_z(state: MtfState, c, rng, hp: HyperParams | None = None) -> np.ndarray:
    """Resample every latent-variable row from its Gaussian full conditional.

    Precision for row n: I_K + sum_t tau_t sum_{(d,l) observed} b b^T with
    b = v_d * u_l.  Rows sharing a missingness pattern share one
    factorization; fully observed data uses a single one.
    """
    data = _as_data(c, hp)
    gen = rng.gen if isinstance(rng, RngStream) else rng
    n, k = state.Z.shape
    lin = np.zeros((n, k))
    base = np.eye(k)
    masked_views = []
    for t, v in enumerate(data.views):
        u = state.u_for_view(t)
        t1 = v.x @ state.V[t]                       # (N, L, K)
        lin += state.tau[t] * np.einsum("nlk,lk->nk", t1, u)
        if v.obs is None:
            base += state.tau[t] * ((state.V[t].T @ state.V[t]) * (u.T @ u))
        else:
            masked_views.append(t)
    if not masked_views:
        state.Z = draw_mvn_precision_chol(lin, _chol_jittered(base), gen)
        return state.Z
    # group rows by their joint missingness pattern across masked views
    flat = np.concatenate(
        [data.views[t].obs.reshape(n, -1) for t in masked_views], axis=1
    )
    patterns, inverse = np.unique(flat, axis=0, return_inverse=True)
    Z = np.empty((n, k))
    offs = np.cumsum([0] + [data.views[t].obs[0].size for t in masked_views])
    for p in range(patterns.shape[0]):
        rows = np.nonzero(inverse == p)[0]
        prec = base.copy()
        for j, t in enumerate(masked_views):
            v = data.views[t]
            pat = patterns[p, offs[j]:offs[j + 1]].reshape(v.l, v.d)
            u = state.u_for_view(t)
            prec += state.tau[t] * np.einsum(
                "ld,dk,lk,dj,lj->kj", pat, state.V[t], u, state.V[t], u, optimize=True
            )
        Z[rows] = draw_mvn_precision_chol(lin[rows], _chol_jittered(prec), gen)
    state.Z = Z
    return state.Z


def _slab_evidence_logodds(m, prior_prec, prior_mean, s):
    """Per-feature log evidence ratio (slab vs spike) for a collapsed column.

    ``m`` and ``s`` are the likelihood linear and precision statistics of
    each coefficient; the slab prior is N(prior_mean, 1/prior_prec).
    """
    denom = prior_prec + s
    shifted = prior_prec * prior_mean + m
    terms = 0.5 * (np.log(prior_prec) - np.log(denom)) \
        + shifted ** 2 / (2.0 * denom) - prior_prec * prior_mean ** 2 / 2.0
    return float(np.sum(terms)), shifted / denom, denom


def update_vh(state: MtfState, c, t: int, rng, hp: HyperParams | None = None,
              residual: np.ndarray | None = None):
    """Joint spike-and-slab update of (V^(t), H_{t,:}), column by column.

    Each column is integrated out of the likelihood to score active vs
    inactive, then redrawn from its Gaussian conditional when active and set
    to exact zeros when not.  Returns (V^(t), H row, residual).
    """
    data = _as_data(c, hp)
    gen = rng.gen if isinstance(rng, RngStream) else rng
    v = data.views[t]
    V, alpha, tau = state.V[t], state.alpha[t], state.tau[t]
    u = state.u_for_view(t)
    R = _residual(state, data, t) if residual is None else residual
    z2 = state.Z ** 2
    u2 = u ** 2
    if v.obs is None:
        zz = z2.sum(axis=0)
        uu = u2.sum(axis=0)
    for k in range(state.k):
        z_k, u_k = state.Z[:, k], u[:, k]
        if v.obs is None:
            sdata = np.full(v.d, zz[k] * uu[k])
        else:
            sdata = np.einsum("nld,n,l->d", v.obs, z2[:, k], u2[:, k], optimize=True)
        proj = np.einsum("nld,n,l->d", R, z_k, u_k, optimize=True)
        m = tau * (proj + V[:, k] * sdata)
        s = tau * sdata
        lo, post_mean, post_prec = _slab_evidence_logodds(m, alpha[:, k], 0.0, s)
        h_new = draw_bernoulli_logodds(_logit(state.pi[k]) + lo, gen)
        if h_new:
            v_new = post_mean + gen.standard_normal(v.d) / np.sqrt(post_prec)
        else:
            v_new = np.zeros(v.d)
        dv = V[:, k] - v_new
        if np.any(dv != 0.0):
            # swapping component k changes the reconstruction by -z dv u
            upd = z_k[:, None, None] * np.multiply.outer(u_k, dv)[None]
            if v.obs is not None:
                upd *= v.obs
            R += upd
        V[:, k] = v_new
        state.H[t, k] = float(h_new)
    return V, state.H[t], R


def update_u(state: MtfState, c, g: int, rng, hp: HyperParams | None = None) -> np.ndarray:
    """Resample the shared third-mode factors of one tensor-view group."""
    data = _as_data(c, hp)
    gen = rng.gen if isinstance(rng, RngStream) else rng
    members = data.u_groups[g]
    k = state.k
    n_slabs = data.views[members[0]].l
    lin = np.zeros((n_slabs, k))
    base = np.eye(k)
    masked = []
    for t in members:
        v = data.views[t]
        t1 = v.x @ state.V[t]                       # (N, L, K)
        lin += state.tau[t] * np.einsum("nlk,nk->lk", t1, state.Z)
        if v.obs is None:
            base += state.tau[t] * ((state.Z.T @ state.Z) * (state.V[t].T @ state.V[t]))
        else:
            masked.append(t)
    if not masked:
        state.U[g] = draw_mvn_precision_chol(lin, _chol_jittered(base), gen)
        return state.U[g]
    U = np.empty((n_slabs, k))
    for l in range(n_slabs):
        prec = base.copy()
        for t in masked:
            v = data.views[t]
            prec += state.tau[t] * np.einsum(
                "nd,nk,dk,nj,dj->kj", v.obs[:, l, :], state.Z, state.V[t],
                state.Z, state.V[t], optimize=True,
            )
        U[l] = draw_mvn_precision_chol(lin[l], _chol_jittered(prec), gen)
    state.U[g] = U
    return state.U[g]


def update_hypers(state: MtfState, c, rng, hp: HyperParams | None = None,
                  residuals: list[np.ndarray] | None = None):
    """Conjugate updates of pi, the ARD precisions, and the noise precisions.

    ARD precisions of inactive columns are left untouched (a valid partial
    scan: the coordinate selection depends only on H, which this update
    never changes).  Resampling them from the prior would make deactivation
    absorbing under the heavy-tailed default: Gamma(1e-3, 1e-3) draws are
    almost all numerically zero, which vetoes any later reactivation.
    """
    data = _as_data(c, hp)
    h = data.hp
    gen = rng.gen if isinstance(rng, RngStream) else rng
    active = state.H.sum(axis=0)
    state.pi = _clip_unit(gen.beta(h.a_pi + active, h.b_pi + data.n_views - active))
    for t, v in enumerate(data.views):
        a_post = h.a_alpha + state.H[t] / 2.0
        b_post = h.b_alpha + state.H[t] * state.V[t] ** 2 / 2.0
        draws = gen.gamma(np.broadcast_to(a_post, b_post.shape), 1.0 / b_post)
        state.alpha[t] = np.where(state.H[t] > 0,
                                  np.maximum(draws, _ALPHA_FLOOR),
                                  state.alpha[t])
    if residuals is None:
        residuals = _residuals(state, data)
    for t, v in enumerate(data.views):
        b_post = data.b_tau[t] + 0.5 * float(np.sum(residuals[t] ** 2))
        state.tau[t] = gen.gamma(h.a_tau + v.n_obs / 2.0, 1.0 / b_post)
    return state.pi, state.alpha, state.tau


def mtf_sweep(state: MtfState, data: ModelData, rng) -> list[np.ndarray]:
    """One full scan (z, then per-view (v,h), then per-group u, then hypers).

    Returns the per-view residuals, exact as of the end of the sweep.
    """
    update_z(state, data, rng)
    residuals = _residuals(state, data)
    for t in range(data.n_views):
        update_vh(state, data, t, rng, residual=residuals[t])
    for g in range(len(data.u_groups)):
        update_u(state, data, g, rng)
    for t in range(data.n_views):
        if not data.views[t].is_matrix():
            residuals[t] = _residual(state, data, t)
    update_hypers(state, data, rng, residuals=residuals)
    return residuals


def log_joint(state: MtfState, c, hp: HyperParams | None = None,
              residuals: list[np.ndarray] | None = None) -> float:
    """Log of the joint density over observed entries and all priors.

    Inactive columns contribute only their Bernoulli log(1 - pi_k) mass; the
    spike itself carries no density term.
    """
    data = _as_data(c, hp)
    h = data.hp
    if residuals is None:
        residuals = _residuals(state, data)
    log2pi = np.log(2.0 * np.pi)
    total = 0.0
    for t, v in enumerate(data.views):
        rss = float(np.sum(residuals[t] ** 2))
        total += 0.5 * v.n_obs * (np.log(state.tau[t]) - log2pi) - 0.5 * state.tau[t] * rss
    total += -0.5 * float(np.sum(state.Z ** 2)) - 0.5 * state.Z.size * log2pi
    for u in state.U:
        total += -0.5 * float(np.sum(u ** 2)) - 0.5 * u.size * log2pi
    for t in range(data.n_views):
        act = state.H[t] > 0
        if act.any():
            a, vv = state.alpha[t][:, act], state.V[t][:, act]
            total += float(np.sum(0.5 * (np.log(a) - log2pi) - a * vv ** 2 / 2.0))
        total += float(np.sum(np.where(state.H[t] > 0,
                                       np.log(state.pi), np.log1p(-state.pi))))
    total += float(np.sum((h.a_pi - 1) * np.log(state.pi)
                          + (h.b_pi - 1) * np.log1p(-state.pi))) \
        - state.k * betaln(h.a_pi, h.b_pi)
    for t in range(data.n_views):
        a = state.alpha[t]
        total += float(np.sum(h.a_alpha * np.log(h.b_alpha) - gammaln(h.a_alpha)
                              + (h.a_alpha - 1) * np.log(a) - h.b_alpha * a))
    for t in range(data.n_views):
        bt = data.b_tau[t]
        total += h.a_tau * np.log(bt) - gammaln(h.a_tau) \
            + (h.a_tau - 1) * np.log(state.tau[t]) - bt * state.tau[t]
    return float(total)


def _record_traces(traces, sweep_idx, lj, residuals, data):
    traces[sweep_idx, 0] = lj
    for t, v in enumerate(data.views):
        traces[sweep_idx, 1 + t] = np.sum(residuals[t] ** 2) / v.n_obs


def run_chain(c, hp: HyperParams, rng, chain_id: int = 0,
              origins: list[int] | None = None) -> PosteriorSamples:
    """Run one Gibbs chain and collect thinned snapshots after burn-in."""
    data = _as_data(c, hp)
    if isinstance(rng, RngStream):
        chain_id = rng.stream_id
    state = init_state(data, hp, rng)
    total = hp.burn_in + hp.n_samples * hp.thin
    traces = np.empty((total, 1 + data.n_views))
    states, sweeps = [], []
    for sweep in range(1, total + 1):
        residuals = mtf_sweep(state, data, rng)
        _record_traces(traces, sweep - 1, log_joint(state, data, residuals=residuals),
                       residuals, data)
        if sweep > hp.burn_in and (sweep - hp.burn_in) % hp.thin == 0:
            states.append(state.copy())
            sweeps.append(sweep)
    return PosteriorSamples(
        model="mtf", states=states, sweeps=sweeps, chain_id=chain_id,
        trace_names=["log_joint"] + [f"mse_view_{t + 1}" for t in range(data.n_views)],
        traces=traces, hp=hp, view_names=data.names, origins=origins,
    )


@dataclass
class ComponentStructure:
    """Posterior activity summary: which components live in which views."""

    activity: np.ndarray        # (n_groups, K) posterior activity scores
    active: np.ndarray          # (n_groups, K) bool, score > threshold
    threshold: float
    n_shared: int
    n_specific: np.ndarray      # per (grouped) view
    n_empty: int

    @property
    def counts(self) -> tuple[int, tuple[int, ...], int]:
        return self.n_shared, tuple(int(x) for x in self.n_specific), self.n_empty

    @property
    def effective_cardinality(self) -> int:
        return self.activity.shape[1] - self.n_empty


def _activity_matrix(samples: PosteriorSamples) -> np.ndarray:
    """Per-(view, component) activity score averaged over snapshots.

    Strict model: posterior mean of h_{t,k}.  Relaxed model: the largest
    per-slab posterior mean, so a component counts as active in a tensor
    if any slab uses it.
    """
    first = samples.states[0]
    if samples.model == "mtf":
        return np.mean([st.H for st in samples.states], axis=0)
    t_views = len(first.H)
    k = first.H[0].shape[1]
    act = np.empty((t_views, k))
    for t in range(t_views):
        slab_means = np.mean([st.H[t] for st in samples.states], axis=0)  # (L, K)
        act[t] = slab_means.max(axis=0)
    return act


def component_structure(samples, threshold: float = 0.5,
                        view_groups: list[list[int]] | None = None) -> ComponentStructure:
    """Count shared / view-specific / empty components from posterior activity.

    ``samples`` may be one chain or a list of chains (snapshots pooled).
    ``view_groups`` merges views that came from unfolding one tensor: a
    component is active in the merged view if active in any member.
    """
    chains = samples if isinstance(samples, (list, tuple)) else [samples]
    if not chains or chains[0].n_snapshots == 0:
        raise ValueError("need at least one snapshot")
    acts = [_activity_matrix(s) for s in chains]
    activity = np.mean(acts, axis=0) if len(acts) > 1 else acts[0]
    if view_groups is not None:
        activity = np.stack([activity[g].max(axis=0) for g in view_groups])
    active = activity > threshold
    n_active_views = active.sum(axis=0)
    n_shared = int(np.sum(n_active_views >= 2))
    n_specific = np.array([
        int(np.sum(active[t] & (n_active_views == 1))) for t in range(active.shape[0])
    ])
    n_empty = int(np.sum(n_active_views == 0))
    return ComponentStructure(activity, active, threshold, n_shared, n_specific, n_empty)


# ---------------------------------------------------------------------------
# exact generative draws, used by the sampler-correctness harness


def sample_state_from_prior(data: ModelData, hp: HyperParams, rng) -> MtfState:
    """Draw every latent exactly from its prior (unlike init_state)."""
    gen = rng.gen if isinstance(rng, RngStream) else rng
    n, k = data.n, hp.k
    Z = gen.standard_normal((n, k))
    U = [gen.standard_normal((data.views[g[0]].l, k)) for g in data.u_groups]
    pi = _clip_unit(gen.beta(hp.a_pi, hp.b_pi, size=k))
    H = (gen.random((data.n_views, k)) < pi[None, :]).astype(np.float64)
    V, alpha = [], []
    for t, v in enumerate(data.views):
        a = np.maximum(gen.gamma(hp.a_alpha, 1.0 / hp.b_alpha, size=(v.d, k)),
                       _ALPHA_FLOOR)
        alpha.append(a)
        V.append(gen.standard_normal((v.d, k)) / np.sqrt(a) * H[t][None, :])
    tau = gen.gamma(hp.a_tau, 1.0 / data.b_tau)
    return MtfState(Z=Z, V=V, U=U, H=H, pi=pi, alpha=alpha, tau=tau,
                    group_of=dict(data.group_of))


def simulate_data(state: MtfState, data: ModelData, rng) -> list[np.ndarray]:
    """Draw data from the likelihood given the state; arrays are (N, L, D)."""
    gen = rng.gen if isinstance(rng, RngStream) else rng
    out = []
    for t, v in enumerate(data.views):
        x = _recon_nld(state, t) + gen.standard_normal(v.x.shape) / np.sqrt(state.tau[t])
        out.append(x)
    return out
