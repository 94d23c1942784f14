"""Hierarchical Bayes mixed logit by Gibbs sampling with a random-walk
Metropolis step for the individual part-worths.

The population distribution is a single multivariate normal with mean
``betabar`` and covariance ``Sigma``; hyperpriors are normal on ``betabar``
and inverse Wishart on ``Sigma``. The default random-walk increment for
respondent i has covariance ``step^2 (H_i + Sigma^-1)^-1`` where ``H_i`` is
the logit information at the mode of i's fractional likelihood (the unit's
own likelihood blended with a normal approximation of the pooled one).
"""
import os
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.special import logsumexp

from .errors import NumericalFailureError


@dataclass(frozen=True)
class HyperPriors:
    mu: np.ndarray
    omega: np.ndarray
    nu: float
    psi: np.ndarray

    @classmethod
    def default(cls, o):
        nu = o + 3
        return cls(mu=np.zeros(o), omega=100.0 * np.eye(o), nu=float(nu),
                   psi=nu * np.eye(o))

    def __post_init__(self):
        o = len(self.mu)
        if self.nu < o:
            raise ValueError("inverse Wishart degrees of freedom must be >= o")
        for name in ("omega", "psi"):
            mat = getattr(self, name)
            if not np.allclose(mat, mat.T):
                raise ValueError(f"{name} must be symmetric")
            np.linalg.cholesky(mat)


@dataclass
class McmcChain:
    beta_draws: np.ndarray
    betabar_draws: np.ndarray
    sigma_draws: np.ndarray
    acceptance_rate: float
    seed: int
    burn_in: int
    keep: int
    step_scale: float
    beta_store_every: int = 1

    @property
    def n_iter(self):
        return self.betabar_draws.shape[0]

    def hyper_draws(self):
        """(iterations, o + o(o+1)/2) matrix of betabar and upper-triangular Sigma."""
        o = self.betabar_draws.shape[1]
        iu = np.triu_indices(o)
        return np.concatenate([self.betabar_draws, self.sigma_draws[:, iu[0], iu[1]]], axis=1)


def logit_prob(beta, x):
    """Conditional logit probabilities over the rows of one choice set."""
    u = np.asarray(x, dtype=float) @ np.asarray(beta, dtype=float)
    u = u - u.max()
    e = np.exp(u)
    return e / e.sum()


def log_likelihood(beta, choices, x):
    """Log-likelihood of one respondent's choices.

    `choices` is either the (sets, alternatives) 0/1 matrix or the chosen
    alternative index per set; `x` is the (sets, alternatives, o) design.
    """
    x = np.asarray(x, dtype=float)
    choices = np.asarray(choices)
    u = x @ np.asarray(beta, dtype=float)
    lse = logsumexp(u, axis=1)
    if choices.ndim == 2:
        return float(np.sum(choices * (u - lse[:, None])))
    return float(np.sum(u[np.arange(len(choices)), choices] - lse))


class _Data:
    def __init__(self, chosen, x):
        self.x = np.asarray(x, dtype=float)
        K, J, o = self.x.shape
        self.K, self.J, self.o = K, J, o
        self.xflat = np.ascontiguousarray(self.x.reshape(K * J, o).T)
        chosen = np.asarray(chosen)
        # sum of chosen rows per respondent, so the chosen-utility term is a dot product
        self.xc = self.x[np.arange(K)[None, :], chosen].sum(axis=1)

    def loglik(self, beta):
        u = (beta @ self.xflat).reshape(len(beta), self.K, self.J)
        return np.einsum("io,io->i", beta, self.xc) - logsumexp(u, axis=2).sum(axis=1)


def mnl_information(beta, x):
    """Negative Hessian of the conditional logit log-likelihood at `beta`
    (it does not depend on the choices)."""
    x = np.asarray(x, dtype=float)
    u = x @ beta
    eta = np.exp(u - logsumexp(u, axis=1, keepdims=True))
    xbar = np.einsum("kj,kjo->ko", eta, x)
    return np.einsum("kj,kjo,kjp->op", eta, x, x) - xbar.T @ xbar


def _fit(fun, o):
    res = minimize(fun, np.zeros(o), jac=True, method="BFGS", options={"gtol": 1e-6})
    return res.x, bool(np.all(np.isfinite(res.x)) and res.success)


def fractional_information(data, w=0.1):
    """Per-respondent information matrices for the random-walk proposal.

    Each respondent's log-likelihood is weighted ``1 - w`` and combined with
    ``w / N`` times a normal approximation of the pooled log-likelihood; the
    information of the respondent's own likelihood at that mode is returned
    with the modes. Respondents whose fit fails get the identity and a zero
    mode.
    """
    N, K, o = len(data.xc), data.K, data.o
    x = data.x
    xc_total = data.xc.sum(axis=0)

    def pooled(beta):
        u = x @ beta
        lse = logsumexp(u, axis=1)
        eta = np.exp(u - lse[:, None])
        grad = xc_total - N * np.einsum("kj,kjo->o", eta, x)
        return -(beta @ xc_total - N * lse.sum()), -grad

    b_pool, ok = _fit(pooled, o)
    H_pool = N * mnl_information(b_pool, x) if ok else np.eye(o)
    out = np.empty((N, o, o))
    modes = np.zeros((N, o))
    for i in range(N):
        xc = data.xc[i]

        def frac(beta):
            u = x @ beta
            lse = logsumexp(u, axis=1)
            eta = np.exp(u - lse[:, None])
            g = xc - np.einsum("kj,kjo->o", eta, x)
            d = beta - b_pool
            val = (1 - w) * (beta @ xc - lse.sum()) - 0.5 * w / N * d @ H_pool @ d
            return -val, -((1 - w) * g - w / N * H_pool @ d)

        b_i, ok_i = _fit(frac, o)
        out[i] = mnl_information(b_i, x) if ok_i else np.eye(o)
        if ok_i:
            modes[i] = b_i
    return out, modes


def _chosen_index(choices):
    f = getattr(choices, "f", choices)
    f = np.asarray(f)
    if f.ndim == 3:
        return np.argmax(f, axis=2)
    return f


def _mvn_kernel(beta, mean, chol):
    z = solve_triangular(chol, (beta - mean).T, lower=True)
    return -0.5 * np.einsum("ij,ij->j", z, z)


def _draw_iw(rng, df, scale):
    """Inverse Wishart draw by the Bartlett decomposition of its inverse."""
    p = scale.shape[0]
    scale_inv = np.linalg.inv(scale)
    scale_inv = (scale_inv + scale_inv.T) / 2
    L = np.linalg.cholesky(scale_inv)
    A = np.zeros((p, p))
    A[np.diag_indices(p)] = np.sqrt(rng.chisquare(df - np.arange(p)))
    il = np.tril_indices(p, -1)
    A[il] = rng.standard_normal(len(il[0]))
    LA = L @ A
    W = LA @ LA.T
    sigma = np.linalg.inv(W)
    return (sigma + sigma.T) / 2


def _save_checkpoint(path, state, store):
    tmp = path + ".tmp.npz"
    np.savez(tmp, **store, **state)
    os.replace(tmp, path)


def run_chain(choices, x, priors=None, burn_in=10_000, keep=30_000, seed=0,
              step_scale=None, adapt=True, target_accept=0.3, beta_store_every=1,
              checkpoint=None, checkpoint_every=1000, progress=None, proposal="hessian",
              init="zero"):
    """Run one chain of burn_in + keep iterations and return every draw.

    Each iteration does one random-walk Metropolis update per respondent,
    then draws ``betabar`` and ``Sigma`` from their conjugate conditionals.
    The increment covariance is ``step^2 (H_i + Sigma^-1)^-1`` with
    `proposal` "hessian" or ``step^2 Sigma`` with "sigma". The step scale
    starts at 2.93/sqrt(o), adapts toward `target_accept` during burn-in
    only, and is frozen afterwards. With `init` "modes" the chain starts at
    the fractional-likelihood modes plus standard normal jitter (so chains
    with different seeds start apart), with "zero" at the origin. With
    `checkpoint`, state is saved
    periodically and a later call with the same arguments resumes from it.
    """
    if proposal not in ("hessian", "sigma"):
        raise ValueError(f"unknown proposal {proposal!r}")
    if init not in ("modes", "zero"):
        raise ValueError(f"unknown init {init!r}")
    x = np.asarray(x, dtype=float)
    o = x.shape[2]
    chosen = _chosen_index(choices)
    data = _Data(chosen, x)
    N = chosen.shape[0]
    info, modes = fractional_information(data) if proposal == "hessian" or init == "modes" \
        else (None, None)
    if proposal == "sigma":
        info = None
    if priors is None:
        priors = HyperPriors.default(o)
    total = burn_in + keep
    if step_scale is None:
        step_scale = 2.93 / np.sqrt(o)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    omega_inv = np.linalg.inv(priors.omega)
    omega_inv_mu = omega_inv @ priors.mu

    beta = np.zeros((N, o))
    betabar = np.zeros(o)
    sigma = np.eye(o)
    if init == "modes":
        beta = modes + rng.standard_normal((N, o))
        betabar = beta.mean(axis=0)
        sigma = np.cov(beta, rowvar=False) + np.eye(o) if N > 1 else np.eye(o)
    n_store = -(-total // beta_store_every)
    store = {
        "beta_draws": np.empty((n_store, N, o)),
        "betabar_draws": np.empty((total, o)),
        "sigma_draws": np.empty((total, o, o)),
        "accepted": np.zeros(total, dtype=np.int64),
    }
    start = 0
    if checkpoint is not None and os.path.exists(checkpoint):
        ck = np.load(checkpoint, allow_pickle=True)
        if int(ck["total"]) != total or ck["beta_draws"].shape != store["beta_draws"].shape:
            raise ValueError("checkpoint does not match the requested chain")
        for key in store:
            store[key] = ck[key].copy()
        start = int(ck["next_iter"])
        beta, betabar, sigma = ck["beta"].copy(), ck["betabar"].copy(), ck["sigma"].copy()
        step_scale = float(ck["step_scale"])
        rng.bit_generator.state = ck["rng_state"].item()

    ll = data.loglik(beta)
    for it in range(start, total):
        try:
            chol = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailureError(f"Sigma not positive definite at iteration {it}",
                                        iteration=it) from exc
        z = rng.standard_normal((N, o))
        if info is None:
            prop = beta + step_scale * z @ chol.T
        else:
            # A = L L^T  =>  L^-T z has covariance A^-1
            prec = info + np.linalg.inv(sigma)
            try:
                root = np.linalg.cholesky(prec)
            except np.linalg.LinAlgError as exc:
                raise NumericalFailureError(f"proposal precision not positive definite at "
                                            f"iteration {it}", iteration=it) from exc
            prop = beta + step_scale * np.linalg.solve(np.swapaxes(root, 1, 2),
                                                       z[:, :, None])[:, :, 0]
        ll_prop = data.loglik(prop)
        log_ratio = (ll_prop + _mvn_kernel(prop, betabar, chol)
                     - ll - _mvn_kernel(beta, betabar, chol))
        accept = np.log(rng.uniform(size=N)) <= log_ratio
        beta[accept] = prop[accept]
        ll[accept] = ll_prop[accept]
        rate = accept.mean()
        store["accepted"][it] = accept.sum()
        if adapt and it < burn_in:
            step_scale *= np.exp(0.05 * (rate - target_accept))

        sigma_inv = np.linalg.inv(sigma)
        post_prec = omega_inv + N * sigma_inv
        post_cov = np.linalg.inv(post_prec)
        post_cov = (post_cov + post_cov.T) / 2
        post_mean = post_cov @ (omega_inv_mu + sigma_inv @ beta.sum(axis=0))
        try:
            betabar = post_mean + np.linalg.cholesky(post_cov) @ rng.standard_normal(o)
            dev = beta - betabar
            sigma = _draw_iw(rng, priors.nu + N, priors.psi + dev.T @ dev)
            np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailureError(f"covariance update failed at iteration {it}",
                                        iteration=it) from exc

        if it % beta_store_every == 0:
            store["beta_draws"][it // beta_store_every] = beta
        store["betabar_draws"][it] = betabar
        store["sigma_draws"][it] = sigma
        if progress is not None:
            progress(it)
        if checkpoint is not None and (it + 1) % checkpoint_every == 0 and it + 1 < total:
            state = {"beta": beta, "betabar": betabar, "sigma": sigma,
                     "step_scale": step_scale, "next_iter": it + 1, "total": total,
                     "rng_state": np.array(rng.bit_generator.state, dtype=object)}
            _save_checkpoint(checkpoint, state, store)

    kept = store["accepted"][burn_in:]
    acc = float(kept.sum() / (N * len(kept))) if len(kept) else float("nan")
    chain = McmcChain(beta_draws=store["beta_draws"], betabar_draws=store["betabar_draws"],
                      sigma_draws=store["sigma_draws"], acceptance_rate=acc, seed=int(seed),
                      burn_in=burn_in, keep=keep, step_scale=float(step_scale),
                      beta_store_every=beta_store_every)
    if checkpoint is not None and os.path.exists(checkpoint):
        os.remove(checkpoint)
    return chain


def save_chain(chain, path):
    np.savez_compressed(
        path, beta_draws=chain.beta_draws, betabar_draws=chain.betabar_draws,
        sigma_draws=chain.sigma_draws, acceptance_rate=chain.acceptance_rate,
        seed=chain.seed, burn_in=chain.burn_in, keep=chain.keep,
        step_scale=chain.step_scale, beta_store_every=chain.beta_store_every,
        iteration=np.arange(chain.n_iter))


def load_chain(path):
    z = np.load(path)
    return McmcChain(beta_draws=z["beta_draws"], betabar_draws=z["betabar_draws"],
                     sigma_draws=z["sigma_draws"],
                     acceptance_rate=float(z["acceptance_rate"]), seed=int(z["seed"]),
                     burn_in=int(z["burn_in"]), keep=int(z["keep"]),
                     step_scale=float(z["step_scale"]),
                     beta_store_every=int(z["beta_store_every"]))
