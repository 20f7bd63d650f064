"""Multilevel model with a Besag-York-Mollie spatial error, fitted by Gibbs sampling.

    y_i = x_i' beta + gamma_county(i) + alpha_state(i) + v_i + u_i

``alpha`` and ``gamma`` are i.i.d. normal intercepts, ``u`` is i.i.d. normal
tract noise and ``v`` is an intrinsic CAR field whose conditional for tract i
given its neighbours is normal with mean ``sum_l w_il v_l / w_i+`` and
variance ``sigma2_v / w_i+``. Every precision has a Gamma(shape, rate)
prior, Gamma(1, 0.0005) by default.

With a Gaussian likelihood each latent block has a Gaussian full conditional
and each precision a Gamma one, so the sampler is exact Gibbs:

* beta: multivariate normal block;
* alpha, gamma: independent normals per group;
* v: single-site sweep (compiled kernel), then re-centred to sum zero within
  each connected component of the graph;
* precisions: conjugate Gamma draws.

By default ``u`` is the observation error and is integrated out (the data
precision is ``tau_u``); ``separate_noise=True`` adds a further Gaussian
observation error with its own precision ``tau_resid`` and samples ``u``
explicitly.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import _backend
from .diagnostics import effective_sample_size, split_rhat
from .errors import ValidationError
from .mlm import ModelSpec, _codes, design_matrix
from .neighbors import NeighborGraph

RHAT_THRESHOLD = 1.05
PRECISIONS = ("state", "county", "v", "u", "resid")


@dataclass(frozen=True)
class GammaPrior:
    shape: float = 1.0
    rate: float = 0.0005

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValidationError("Gamma prior shape and rate must be > 0")

    @property
    def mean(self):
        return self.shape / self.rate


@dataclass(frozen=True)
class McmcConfig:
    chains: int = 4
    iterations: int = 5000
    burn_in: int = 2500
    thin: int = 1
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.chains < 1 or self.thin < 1:
            raise ValidationError("chains and thin must be >= 1")
        if not self.iterations > self.burn_in >= 0:
            raise ValidationError("need iterations > burn_in >= 0")


@dataclass
class BymSpec:
    model: ModelSpec | None
    graph: NeighborGraph
    priors: dict = field(default_factory=dict)
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    separate_noise: bool = False
    beta_prior_precision: float = 1e-6

    def prior(self, name):
        return self.priors.get(name, GammaPrior())


def icar_conditional(v, i, graph: NeighborGraph, sigma2_v):
    """Conditional mean and variance of ``v[i]`` given its neighbours."""
    if not sigma2_v > 0:
        raise ValidationError("sigma2_v must be > 0")
    lo, hi = graph.indptr[i], graph.indptr[i + 1]
    if hi == lo:
        raise ValidationError(f"tract {i} has no neighbours")
    w = graph.weights[lo:hi]
    wsum = float(np.sum(w))
    m = float(np.sum(w * np.asarray(v, dtype=float)[graph.indices[lo:hi]])) / wsum
    return m, sigma2_v / wsum


@dataclass
class GibbsState:
    beta: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    v: np.ndarray
    u: np.ndarray
    tau: dict

    def copy(self):
        return GibbsState(self.beta.copy(), self.alpha.copy(), self.gamma.copy(),
                          self.v.copy(), self.u.copy(), dict(self.tau))


class BymModel:
    """Data, graph and priors for one BYM fit, with its full conditionals."""

    def __init__(self, y, X, state, county, graph: NeighborGraph, priors=None,
                 separate_noise=False, beta_prior_precision=1e-6, likelihood=True):
        self.y = np.asarray(y, dtype=np.float64)
        self.X = np.asarray(X, dtype=np.float64)
        self.n, self.p = self.X.shape
        if graph.n != self.n:
            raise ValidationError(f"graph has {graph.n} nodes but data has {self.n} rows")
        if not graph.is_symmetric():
            graph = graph.symmetrized()
        if (graph.degrees() == 0).any():
            i = int(np.flatnonzero(graph.degrees() == 0)[0])
            raise ValidationError(f"tract {i} has no neighbours; the ICAR field needs >= 1")
        self.graph = graph
        self.state, self.n_state = _codes(state)
        pairs = np.stack([self.state, _codes(county)[0]], axis=1)
        _, inv = np.unique(pairs, axis=0, return_inverse=True)
        self.county = inv.reshape(-1).astype(np.int64)
        self.n_county = int(self.county.max()) + 1
        self.priors = {k: (priors or {}).get(k, GammaPrior()) for k in PRECISIONS}
        self.separate_noise = separate_noise
        self.likelihood = likelihood
        self.p0 = beta_prior_precision
        self.n_in_state = np.bincount(self.state, minlength=self.n_state).astype(float)
        self.n_in_county = np.bincount(self.county, minlength=self.n_county).astype(float)
        self.xtx = self.X.T @ self.X
        self.wsum = graph.weight_sums()
        self.row = graph.row_index()
        self.components = graph.component_labels()
        self.n_components = int(self.components.max()) + 1
        self._kern = _backend.kernels

    # ----- full conditionals (pure functions of the state) -----

    def tau_lik(self, s):
        if not self.likelihood:
            return 0.0
        return s.tau["resid"] if self.separate_noise else s.tau["u"]

    def _noise(self, s):
        return s.u if self.separate_noise else 0.0

    def cond_beta(self, s):
        t = self.tau_lik(s)
        target = self.y - s.alpha[self.state] - s.gamma[self.county] - s.v - self._noise(s)
        Q = t * self.xtx + self.p0 * np.eye(self.p)
        cov = np.linalg.inv(Q)
        cf = cho_factor(Q, lower=True)
        return cho_solve(cf, t * (self.X.T @ target)), cov

    def _cond_group(self, s, codes, counts, k, tau_group, exclude):
        t = self.tau_lik(s)
        target = self.y - self.X @ s.beta - s.v - self._noise(s) - exclude
        sums = np.bincount(codes, weights=target, minlength=k)
        prec = t * counts + tau_group
        return t * sums / prec, 1.0 / prec

    def cond_state(self, s):
        return self._cond_group(s, self.state, self.n_in_state, self.n_state,
                                s.tau["state"], s.gamma[self.county])

    def cond_county(self, s):
        return self._cond_group(s, self.county, self.n_in_county, self.n_county,
                                s.tau["county"], s.alpha[self.state])

    def v_target(self, s):
        return (self.y - self.X @ s.beta - s.alpha[self.state] - s.gamma[self.county]
                - self._noise(s))

    def cond_v_site(self, s, i):
        """Normal conditional of v_i: ICAR neighbour prior times the data term."""
        m, s2 = icar_conditional(s.v, i, self.graph, 1.0 / s.tau["v"])
        t = self.tau_lik(s)
        prec = 1.0 / s2 + t
        target = self.v_target(s)[i] if t > 0 else 0.0
        return (m / s2 + t * target) / prec, 1.0 / prec

    def cond_u(self, s):
        if not self.separate_noise:
            raise ValidationError("u is integrated out unless separate_noise=True")
        t = s.tau["resid"] if self.likelihood else 0.0
        target = self.y - self.X @ s.beta - s.alpha[self.state] - s.gamma[self.county] - s.v
        prec = t + s.tau["u"]
        return t * target / prec, np.full(self.n, 1.0 / prec)

    def icar_quadratic(self, v):
        """v' (D - W) v."""
        diff = v[self.row] - v[self.graph.indices]
        return 0.5 * float(np.sum(self.graph.weights * diff * diff))

    def residual(self, s):
        return (self.y - self.X @ s.beta - s.alpha[self.state] - s.gamma[self.county]
                - s.v - self._noise(s))

    def cond_precisions(self, s):
        """(shape, rate) of each precision's Gamma full conditional."""
        pr = self.priors
        out = {
            "state": (pr["state"].shape + 0.5 * self.n_state,
                      pr["state"].rate + 0.5 * float(s.alpha @ s.alpha)),
            "county": (pr["county"].shape + 0.5 * self.n_county,
                       pr["county"].rate + 0.5 * float(s.gamma @ s.gamma)),
            "v": (pr["v"].shape + 0.5 * (self.n - self.n_components),
                  pr["v"].rate + 0.5 * self.icar_quadratic(s.v)),
        }
        lik = self.likelihood
        e = self.residual(s)
        sse = float(e @ e)
        if self.separate_noise:
            out["u"] = (pr["u"].shape + 0.5 * self.n, pr["u"].rate + 0.5 * float(s.u @ s.u))
            out["resid"] = (pr["resid"].shape + (0.5 * self.n if lik else 0.0),
                            pr["resid"].rate + (0.5 * sse if lik else 0.0))
        else:
            out["u"] = (pr["u"].shape + (0.5 * self.n if lik else 0.0),
                        pr["u"].rate + (0.5 * sse if lik else 0.0))
        return out

    # ----- sampler -----

    def center_v(self, v):
        if self.n_components == 1:
            v -= v.mean()
        else:
            means = (np.bincount(self.components, weights=v, minlength=self.n_components)
                     / np.bincount(self.components, minlength=self.n_components))
            v -= means[self.components]
        return v

    def initial_state(self, rng):
        beta, *_ = np.linalg.lstsq(self.X, self.y, rcond=None)
        r = self.y - self.X @ beta
        base = 1.0 / max(float(np.var(r)), 1e-8)
        jitter = lambda: base * math.exp(rng.normal(0.0, 1.0))  # noqa: E731
        tau = {"state": jitter(), "county": jitter(), "v": jitter(), "u": jitter()}
        if self.separate_noise:
            tau["resid"] = jitter()
        beta = beta + rng.normal(0.0, 0.1, self.p) * (np.abs(beta) + 0.1)
        return GibbsState(beta, np.zeros(self.n_state), np.zeros(self.n_county),
                          np.zeros(self.n), np.zeros(self.n), tau)

    def step(self, s, rng):
        mean, cov = self.cond_beta(s)
        s.beta = mean + np.linalg.cholesky(cov) @ rng.standard_normal(self.p)
        mean, var = self.cond_state(s)
        s.alpha = mean + np.sqrt(var) * rng.standard_normal(self.n_state)
        mean, var = self.cond_county(s)
        s.gamma = mean + np.sqrt(var) * rng.standard_normal(self.n_county)
        target = self.v_target(s) if self.likelihood else np.zeros(self.n)
        self._kern.icar_sweep(s.v, self.graph.indptr, self.graph.indices, self.graph.weights,
                              np.ascontiguousarray(target), s.tau["v"], self.tau_lik(s),
                              rng.standard_normal(self.n))
        self.center_v(s.v)
        if self.separate_noise:
            mean, var = self.cond_u(s)
            s.u = mean + np.sqrt(var) * rng.standard_normal(self.n)
        for name, (a, b) in self.cond_precisions(s).items():
            s.tau[name] = rng.gamma(a, 1.0 / b)
        return s

    def run_chain(self, mcmc: McmcConfig, seed_seq):
        rng = np.random.default_rng(seed_seq)
        s = self.initial_state(rng)
        keep = range(mcmc.burn_in, mcmc.iterations, mcmc.thin)
        n_keep = len(keep)
        taus = sorted(s.tau)
        rec = {
            "beta": np.empty((n_keep, self.p)),
            "tau": {k: np.empty(n_keep) for k in taus},
            "v_sum": np.zeros(self.n),
            "v_sq": np.zeros(self.n),
            "u_sum": np.zeros(self.n),
            "alpha_sum": np.zeros(self.n_state),
            "gamma_sum": np.zeros(self.n_county),
            "max_abs_vsum": 0.0,
        }
        j = 0
        for it in range(mcmc.iterations):
            self.step(s, rng)
            if it >= mcmc.burn_in and (it - mcmc.burn_in) % mcmc.thin == 0:
                rec["beta"][j] = s.beta
                for k in taus:
                    rec["tau"][k][j] = s.tau[k]
                rec["v_sum"] += s.v
                rec["v_sq"] += s.v * s.v
                u = s.u if self.separate_noise else self.residual(s)
                rec["u_sum"] += u
                rec["alpha_sum"] += s.alpha
                rec["gamma_sum"] += s.gamma
                rec["max_abs_vsum"] = max(rec["max_abs_vsum"], abs(float(s.v.sum())))
                j += 1
        rec["n"] = n_keep
        return rec


def _summ(x):
    x = np.asarray(x, dtype=float).ravel()
    lo, hi = np.quantile(x, [0.025, 0.975])
    return {"mean": float(x.mean()), "sd": float(x.std(ddof=1)), "q025": float(lo),
            "q975": float(hi)}


@dataclass
class BymFit:
    names: tuple
    beta_posterior: dict
    precision_posteriors: dict
    v_summary: dict
    u_summary: dict
    alpha_mean: np.ndarray
    gamma_mean: np.ndarray
    rhat: dict
    ess: dict
    converged: bool
    draws: dict
    meta: dict

    def summary(self):
        return {
            "coefficients": {
                n: {"estimate": d["mean"], "sd": d["sd"], "ci_low": d["q025"],
                    "ci_high": d["q975"]}
                for n, d in self.beta_posterior.items()
            },
            "ci_level": 0.95,
            "precisions": self.precision_posteriors,
            "rhat": self.rhat,
            "ess": self.ess,
            "converged": self.converged,
            "status": "converged" if self.converged else "not-converged",
            "v_sum_of_posterior_mean": float(np.sum(self.v_summary["mean"])),
            "meta": self.meta,
        }

    def write_draws(self, path):
        """Dump scalar draws (beta and precisions) as long-format CSV."""
        names = list(self.draws)
        chains, n = self.draws[names[0]].shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "draw"] + names)
            for c in range(chains):
                for t in range(n):
                    w.writerow([c, t] + [repr(float(self.draws[k][c, t])) for k in names])


def fit_bym_arrays(y, X, state, county, graph, names=None, priors=None, mcmc=None,
                   separate_noise=False, beta_prior_precision=1e-6, likelihood=True) -> BymFit:
    """Run the Gibbs sampler and summarise the posterior.

    Chains use independent streams spawned from ``mcmc.seed``; output does not
    depend on ``mcmc.n_jobs``.
    """
    mcmc = mcmc or McmcConfig()
    model = BymModel(y, X, state, county, graph, priors, separate_noise,
                     beta_prior_precision, likelihood)
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(model.p))
    seeds = np.random.SeedSequence(mcmc.seed).spawn(mcmc.chains)
    if mcmc.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=mcmc.n_jobs) as pool:
            recs = list(pool.map(lambda ss: model.run_chain(mcmc, ss), seeds))
    else:
        recs = [model.run_chain(mcmc, ss) for ss in seeds]

    draws = {}
    for j, name in enumerate(names):
        draws[name] = np.stack([r["beta"][:, j] for r in recs])
    tau_names = sorted(recs[0]["tau"])
    for k in tau_names:
        draws[f"tau_{k}"] = np.stack([r["tau"][k] for r in recs])

    rhat, ess = {}, {}
    for k, d in draws.items():
        if d.shape[1] >= 4:
            rhat[k] = split_rhat(d)
            ess[k] = effective_sample_size(d)
    converged = bool(rhat) and all(r <= RHAT_THRESHOLD for r in rhat.values())

    total = sum(r["n"] for r in recs)
    v_mean = sum(r["v_sum"] for r in recs) / total
    v_var = sum(r["v_sq"] for r in recs) / total - v_mean ** 2
    return BymFit(
        names=names,
        beta_posterior={n: _summ(draws[n]) for n in names},
        precision_posteriors={k: _summ(draws[f"tau_{k}"]) for k in tau_names},
        v_summary={"mean": v_mean, "sd": np.sqrt(np.maximum(v_var, 0.0))},
        u_summary={"mean": sum(r["u_sum"] for r in recs) / total},
        alpha_mean=sum(r["alpha_sum"] for r in recs) / total,
        gamma_mean=sum(r["gamma_sum"] for r in recs) / total,
        rhat=rhat,
        ess=ess,
        converged=converged,
        draws=draws,
        meta={
            "chains": mcmc.chains, "iterations": mcmc.iterations, "burn_in": mcmc.burn_in,
            "thin": mcmc.thin, "seed": mcmc.seed, "separate_noise": separate_noise,
            "n_components": model.n_components, "rhat_threshold": RHAT_THRESHOLD,
            "max_abs_v_sum": max(r["max_abs_vsum"] for r in recs),
            "priors": {k: [p.shape, p.rate] for k, p in model.priors.items()},
            "kernel_backend": _backend.BACKEND if model._kern is _backend.kernels else "custom",
        },
    )


def fit_bym(spec: BymSpec, data) -> BymFit:
    """Fit ``spec.model`` with a BYM error on a tract table aligned to ``spec.graph``."""
    if spec.model is None:
        raise ValidationError("BymSpec.model is required for table input")
    y, X, names = design_matrix(spec.model, data)
    return fit_bym_arrays(y, X, data["state_id"].to_numpy(), data["county_id"].to_numpy(),
                          spec.graph, names, spec.priors, spec.mcmc, spec.separate_noise,
                          spec.beta_prior_precision)
