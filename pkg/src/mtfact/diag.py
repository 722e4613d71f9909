"""Convergence diagnostics and the sampler-correctness harness.

The harness compares forward simulation from the generative model against
the Gibbs transition interleaved with data resimulation; a correct sampler
leaves the joint distribution invariant, so every statistic's two estimates
must agree.  Deliberately broken transition kernels are shipped as fixtures
to prove the harness has teeth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import mtf as _mtf
from . import rmtf as _rmtf
from .core import Collection, MaskedTensor3, Tensor3
from .mtf import HyperParams, ModelData, PosteriorSamples, component_structure, prepare
from .rmtf import RmtfState

__all__ = [
    "geweke_z",
    "spectral_variance",
    "joint_distribution_test",
    "JointDistResult",
    "buggy_transitions",
    "summarize_run",
    "RunSummary",
]


def spectral_variance(x: np.ndarray) -> float:
    """Batch-means estimate of the spectral density at zero (n * var of the mean).

    Uses floor(sqrt(n)) batches; adequate at the trace lengths used here and
    keeps reported z-scores reproducible.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    n_batches = int(math.isqrt(n))
    if n_batches < 2:
        raise ValueError(f"trace segment too short for batch means (n={n})")
    blen = n // n_batches
    means = x[: n_batches * blen].reshape(n_batches, blen).mean(axis=1)
    return blen * float(np.var(means, ddof=1))


def geweke_z(trace, first_frac: float = 0.1, last_frac: float = 0.5) -> float:
    """Z-score comparing the early and late segments of a trace.

    Variances of the segment means use the batch-means spectral estimate, so
    autocorrelated traces are handled.  Errors on traces shorter than 100 or
    with a zero-variance segment.
    """
    trace = np.asarray(trace, dtype=np.float64)
    if trace.ndim != 1:
        raise ValueError("trace must be one-dimensional")
    n = trace.size
    if n < 100:
        raise ValueError(f"trace too short for the diagnostic (n={n} < 100)")
    if not (0 < first_frac and 0 < last_frac and first_frac + last_frac <= 1):
        raise ValueError("need 0 < first_frac, last_frac and first_frac + last_frac <= 1")
    a = trace[: int(first_frac * n)]
    b = trace[n - int(last_frac * n):]
    sa, sb = spectral_variance(a), spectral_variance(b)
    if sa == 0 or sb == 0:
        raise ValueError("zero-variance trace segment")
    return float((a.mean() - b.mean()) / np.sqrt(sa / a.size + sb / b.size))


# ---------------------------------------------------------------------------
# joint-distribution test


def _toy_collection(n: int, d: int, l: int) -> Collection:
    """Placeholder fully observed matrix + tensor pair (tensor only if l > 1)."""
    views = [
        MaskedTensor3.fully_observed(Tensor3(np.zeros((n, d, 1)) + 0.1)),
        MaskedTensor3.fully_observed(Tensor3(np.zeros((n, d, l)) + 0.1)),
    ]
    return Collection(tuple(views), (), ("m", "t"))


def _mtf_stats(state, data: ModelData):
    h = state.H
    out = {
        "z_mean": state.Z.mean(),
        "z_sq": (state.Z ** 2).mean(),
        "v_mean": np.mean([v.mean() for v in state.V]),
        "v_sq": np.mean([(v ** 2).mean() for v in state.V]),
        "h_mean": np.mean([x.mean() for x in h]) if isinstance(h, list) else h.mean(),
        "pi_mean": state.pi.mean(),
        "pi_sq": (state.pi ** 2).mean(),
        "tau_mean": state.tau.mean() if not isinstance(state.tau, list)
        else np.mean([t.mean() for t in state.tau]),
        "tau_sq": (state.tau ** 2).mean() if not isinstance(state.tau, list)
        else np.mean([(t ** 2).mean() for t in state.tau]),
    }
    if state.U:
        out["u_mean"] = np.mean([u.mean() for u in state.U])
        out["u_sq"] = np.mean([(u ** 2).mean() for u in state.U])
    return out


def _rmtf_stats(state: RmtfState, data: ModelData):
    out = _mtf_stats(state, data)
    out["w_mean"] = np.mean([w.mean() for w in state.W])
    out["w_sq"] = np.mean([(w ** 2).mean() for w in state.W])
    if state.lambda_mode == "per_slab":
        lam = np.concatenate([x for x in state.lam if x is not None])
    else:
        lam = np.atleast_1d(np.asarray(state.lam))
    out["lam_mean"] = lam.mean()
    out["lam_sq"] = (lam ** 2).mean()
    return out


def _x_stats(arrays):
    return {
        "x_mean": np.mean([a.mean() for a in arrays]),
        "x_sq": np.mean([(a ** 2).mean() for a in arrays]),
    }


@dataclass
class JointDistResult:
    stat_names: list[str]
    z_scores: np.ndarray
    threshold: float
    alpha: float
    n_iter: int

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.z_scores) < self.threshold))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.stat_names, self.z_scores))

    def __str__(self):
        lines = [f"{'PASS' if self.passed else 'FAIL'}  "
                 f"(threshold {self.threshold:.2f}, alpha {self.alpha}, "
                 f"n_iter {self.n_iter})"]
        for name, z in zip(self.stat_names, self.z_scores):
            flag = "" if abs(z) < self.threshold else "  <-- FAIL"
            lines.append(f"  {name:10s} z = {z:+7.2f}{flag}")
        return "\n".join(lines)


def joint_distribution_test(model: str, sizes, hp: HyperParams, n_iter: int, rng,
                            transition=None, alpha: float = 0.005) -> JointDistResult:
    """Compare forward simulation against the Gibbs transition, moment by moment.

    ``sizes`` is (n, d, l); the test collection is one matrix and one tensor
    (a second matrix when l = 1, which exercises the all-matrices path).
    ``transition(state, data, rng) -> state`` may be overridden to test the
    shipped bug fixtures.  hp.b_tau must be explicit: the noise prior has to
    stay fixed while the data are resimulated.
    """
    if hp.b_tau is None:
        raise ValueError("the harness needs an explicit b_tau (data-independent prior)")
    n, d, l = sizes
    gen = rng.gen if hasattr(rng, "gen") else rng
    data = prepare(_toy_collection(n, d, l), hp)
    if model == "mtf":
        sample_prior, simulate = _mtf.sample_state_from_prior, _mtf.simulate_data
        stats_fn = _mtf_stats

        def default_transition(state, data, rng):
            _mtf.mtf_sweep(state, data, rng)
            return state
    elif model == "rmtf":
        sample_prior, simulate = _rmtf.rmtf_sample_state_from_prior, _rmtf.rmtf_simulate_data
        stats_fn = _rmtf_stats

        def default_transition(state, data, rng):
            _rmtf.rmtf_sweep(state, data, rng)
            return state
    else:
        raise ValueError(f"unknown model {model!r}")
    transition = transition or default_transition

    # forward: independent draws from prior + likelihood
    fwd_rows = []
    for _ in range(n_iter):
        st = sample_prior(data, hp, gen)
        xs = simulate(st, data, gen)
        row = stats_fn(st, data)
        row.update(_x_stats(xs))
        fwd_rows.append(row)
    names = sorted(fwd_rows[0])
    fwd = np.array([[r[k] for k in names] for r in fwd_rows])

    # successive: Gibbs transition interleaved with data resimulation
    state = sample_prior(data, hp, gen)
    suc = np.empty((n_iter, len(names)))
    for i in range(n_iter):
        xs = simulate(state, data, gen)
        for t in range(data.n_views):
            data.set_values(t, xs[t])
        state = transition(state, data, gen)
        row = stats_fn(state, data)
        row.update(_x_stats(xs))
        suc[i] = [row[k] for k in names]

    z = np.empty(len(names))
    for j in range(len(names)):
        se2 = np.var(fwd[:, j], ddof=1) / n_iter + spectral_variance(suc[:, j]) / n_iter
        diff = fwd[:, j].mean() - suc[:, j].mean()
        if se2 == 0:  # degenerate constant statistic (e.g. all-matrix v's)
            z[j] = 0.0 if diff == 0 else np.inf
        else:
            z[j] = diff / np.sqrt(se2)
    threshold = float(norm.ppf(1.0 - alpha / (2 * len(names))))
    return JointDistResult(list(names), z, threshold, alpha, n_iter)


def buggy_transitions() -> dict[str, tuple[str, callable]]:
    """Deliberately wrong Gibbs kernels; each must fail the harness.

    Returns name -> (model, transition).
    """

    def tau_rate_halved(state, data, rng):
        gen = rng.gen if hasattr(rng, "gen") else rng
        residuals = _mtf.mtf_sweep(state, data, gen)
        for t, v in enumerate(data.views):
            b_post = data.b_tau[t] + 0.25 * float(np.sum(residuals[t] ** 2))
            state.tau[t] = gen.gamma(data.hp.a_tau + v.n_obs / 2.0, 1.0 / b_post)
        return state

    def z_prior_dropped(state, data, rng):
        gen = rng.gen if hasattr(rng, "gen") else rng
        _mtf.mtf_sweep(state, data, gen)
        # redraw Z from a conditional missing the unit prior precision
        k = state.k
        lin = np.zeros((data.n, k))
        prec = np.zeros((k, k))
        for t in range(data.n_views):
            u = state.u_for_view(t)
            t1 = data.views[t].x @ state.V[t]
            lin += state.tau[t] * np.einsum("nlk,lk->nk", t1, u)
            prec += state.tau[t] * ((state.V[t].T @ state.V[t]) * (u.T @ u))
        prec += 1e-10 * np.eye(k)  # numerical guard only, not the prior
        state.Z = _mtf.draw_mvn_precision_chol(lin, _mtf._chol_jittered(prec), gen)
        return state

    def lambda_shape_halved(state, data, rng):
        gen = rng.gen if hasattr(rng, "gen") else rng
        _rmtf.rmtf_sweep(state, data, gen)
        counts, devs = _rmtf._lambda_stats(state, data)
        tensor_ts = [t for t, v in enumerate(data.views) if not v.is_matrix()]
        n_act = sum(counts[t].sum() for t in tensor_ts)
        ss = sum(devs[t].sum() for t in tensor_ts)
        state.lam = np.asarray(gen.gamma(data.hp.a_lambda + 0.25 * n_act,
                                         1.0 / (data.hp.b_lambda + 0.5 * ss)))
        return state

    return {
        "tau_rate_halved": ("mtf", tau_rate_halved),
        "z_prior_dropped": ("mtf", z_prior_dropped),
        "lambda_shape_halved": ("rmtf", lambda_shape_halved),
    }


# ---------------------------------------------------------------------------
# run summaries


@dataclass
class RunSummary:
    chain_ids: list[int]
    geweke: dict[str, list[float]]        # trace name -> z per chain
    flags: list[str]
    structure: object                     # ComponentStructure
    effective_cardinality: int
    lambda_mean: float | None
    lambda_std: float | None

    @property
    def converged(self) -> bool:
        return not self.flags

    def __str__(self):
        lines = [f"chains: {self.chain_ids}"]
        for name, zs in self.geweke.items():
            zs_txt = ", ".join("n/a" if z is None else f"{z:+.2f}" for z in zs)
            lines.append(f"geweke[{name}]: {zs_txt}")
        sh, spec, emp = self.structure.counts
        lines.append(f"components: shared={sh} specific={list(spec)} empty={emp} "
                     f"(effective {self.effective_cardinality})")
        if self.lambda_mean is not None:
            lines.append(f"lambda posterior: {self.lambda_mean:.4g} "
                         f"+- {self.lambda_std:.4g}")
        lines.append("flags: " + ("none" if not self.flags else "; ".join(self.flags)))
        return "\n".join(lines)


def summarize_run(samples, threshold: float = 0.5, flag_z: float = 2.0) -> RunSummary:
    """Aggregate Geweke checks, component structure and the slab-similarity
    posterior over one or more chains; flags chains that look unconverged.

    Traces too short to test are flagged; exactly constant traces (e.g. the
    reconstruction error of an all-off model) are reported as untestable but
    not flagged, since a non-moving statistic is stationary.
    """
    chains = list(samples) if isinstance(samples, (list, tuple)) else [samples]
    geweke: dict[str, list[float]] = {}
    flags = []
    for chain in chains:
        post = chain.traces[chain.hp.burn_in:]
        for j, name in enumerate(chain.trace_names):
            zs = geweke.setdefault(name, [])
            try:
                z = geweke_z(post[:, j])
            except ValueError as err:
                zs.append(None)
                if "zero-variance" not in str(err):
                    flags.append(f"chain {chain.chain_id}: trace {name} untestable")
                continue
            zs.append(z)
            if abs(z) > flag_z:
                flags.append(f"chain {chain.chain_id}: |geweke z|={abs(z):.2f} on {name}")
    structure = component_structure(chains, threshold=threshold)
    lam_mean = lam_std = None
    if chains[0].model == "rmtf":
        vals = []
        for chain in chains:
            for st in chain.states:
                if st.lambda_mode == "per_slab":
                    vals.append(np.mean(np.concatenate(
                        [x for x in st.lam if x is not None])))
                else:
                    vals.append(float(np.mean(st.lam)))
        lam_mean, lam_std = float(np.mean(vals)), float(np.std(vals))
    return RunSummary(
        chain_ids=[c.chain_id for c in chains], geweke=geweke, flags=flags,
        structure=structure, effective_cardinality=structure.effective_cardinality,
        lambda_mean=lam_mean, lambda_std=lam_std,
    )
