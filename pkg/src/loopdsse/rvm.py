"""Relevance vector machine regression (sparse Bayesian kernel regression).

Training follows the classic re-estimation loop: posterior moments given
the hyperparameters, fixed-point updates of the weight precisions and noise
variance, pruning of weights whose precision exceeds ``alpha_max``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

FORMAT_VERSION = 1


class DegenerateModelError(RuntimeError):
    """Every basis function was pruned."""


@dataclass(frozen=True)
class KernelConfig:
    r: float = 1.0
    alpha_max: float = 1e9
    alpha_init: float = 1e-2
    sigma2_init: float | None = None  # None: 0.1 * var(targets)
    max_iters: int = 500
    tol: float = 1e-3
    sigma2_floor: float = 1e-8
    bias: bool = True

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("kernel bandwidth r must be positive")
        if not self.alpha_max > self.alpha_init > 0:
            raise ValueError("need alpha_max > alpha_init > 0")
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    def with_r(self, r):
        return KernelConfig(**{**self.__dict__, "r": float(r)})


def rbf_kernel(xi, xj, r):
    """exp(-|xi - xj|^2 / r^2) for two feature vectors."""
    xi = np.asarray(xi, dtype=float)
    xj = np.asarray(xj, dtype=float)
    if xi.shape != xj.shape:
        raise ValueError(f"dimension mismatch {xi.shape} vs {xj.shape}")
    if not r > 0:
        raise ValueError("r must be positive")
    return float(np.exp(-np.sum((xi - xj) ** 2) / r**2))


def kernel_matrix(A, B, r):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch {A.shape[1]} vs {B.shape[1]}")
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    np.maximum(d2, 0.0, out=d2)
    return np.exp(-d2 / r**2)


def design_matrix(X, r):
    """N x (N+1) matrix: a column of ones followed by K(x_i, x_j)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    K = kernel_matrix(X, X, r)
    # exact symmetry and unit diagonal regardless of rounding in d2
    K = np.triu(K, 1)
    K = K + K.T + np.eye(len(X))
    return np.hstack([np.ones((len(X), 1)), K])


def _spd_factor(M):
    """Cholesky factor with diagonal jitter escalation 1e-10 -> 1e-6 (relative)."""
    try:
        return sla.cho_factor(M, lower=True, check_finite=False)
    except sla.LinAlgError:
        pass
    scale = float(np.mean(np.diag(M)))
    for jitter in (1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        try:
            return sla.cho_factor(M + jitter * scale * np.eye(len(M)), lower=True, check_finite=False)
        except sla.LinAlgError:
            continue
    raise np.linalg.LinAlgError("posterior precision not positive definite even with jitter")


@dataclass
class EmResult:
    Sigma: np.ndarray
    mu: np.ndarray
    alphas: np.ndarray
    sigma2: float
    prune: np.ndarray
    sigma2_held: bool = False
    log_ml: float = math.nan  # evidence at the *input* hyperparameters


def _posterior(gram, phit, alphas, sigma2, Phi=None, t=None):
    M = gram / sigma2
    M[np.diag_indices_from(M)] += alphas
    cf = _spd_factor(M)
    Sigma = sla.cho_solve(cf, np.eye(len(M)), check_finite=False)
    Sigma = 0.5 * (Sigma + Sigma.T)
    mu = sla.cho_solve(cf, phit / sigma2, check_finite=False)
    # refinement with an extended-precision residual: small mu_i enter
    # alpha_i = gamma_i / mu_i^2 squared, so their accuracy matters. With the
    # design matrix at hand the residual skips the rounded Gram product.
    a_l = np.asarray(alphas, dtype=np.longdouble)
    if Phi is None:
        Ml = gram.astype(np.longdouble) / sigma2
        Ml[np.diag_indices_from(Ml)] += a_l
        b_l = phit.astype(np.longdouble) / sigma2
        sweeps = 1
    else:
        P_l = np.asarray(Phi, dtype=np.longdouble)
        t_l = np.asarray(t, dtype=np.longdouble)
        sweeps = 2
    for _ in range(sweeps):
        mu_l = mu.astype(np.longdouble)
        if Phi is None:
            resid = b_l - Ml @ mu_l
        else:
            resid = P_l.T @ (t_l - P_l @ mu_l) / sigma2 - a_l * mu_l
        mu = mu + sla.cho_solve(cf, resid.astype(float), check_finite=False)
    logdet_M = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return Sigma, mu, logdet_M


def log_evidence(n, tt, phit, mu, alphas, sigma2, logdet_M):
    """log p(t | alpha, sigma2) from posterior quantities (Woodbury form)."""
    logdet_C = n * math.log(sigma2) - np.sum(np.log(alphas)) + logdet_M
    quad = (tt - phit @ mu) / sigma2
    return -0.5 * (n * math.log(2 * math.pi) + logdet_C + quad)


def em_iteration(Phi, alphas, sigma2, targets, alpha_max=1e9, sigma2_floor=1e-8, gram=None, phit=None):
    """One re-estimation sweep.

    Sigma = (Phi^T Phi / sigma2 + A)^-1, mu = Sigma Phi^T t / sigma2,
    alpha_i <- (1 - alpha_i Sigma_ii) / mu_i^2 and
    sigma2 <- |t - Phi mu|^2 / (N - sum_i (1 - alpha_i Sigma_ii)).

    ``gram`` / ``phit`` may carry precomputed ``Phi^T Phi`` and ``Phi^T t``.
    Weights with ``mu_i == 0`` (or no well-determinedness left) are sent
    to ``alpha_max``. A non-positive noise denominator keeps the old
    ``sigma2`` and sets ``sigma2_held``.
    """
    Phi = np.asarray(Phi, dtype=float)
    t = np.asarray(targets, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    gram = Phi.T @ Phi if gram is None else np.array(gram, dtype=float)
    phit = Phi.T @ t if phit is None else phit
    Sigma, mu, logdet_M = _posterior(gram, phit, alphas, sigma2, Phi, t)
    log_ml = log_evidence(len(t), float(t @ t), phit, mu, alphas, sigma2, logdet_M)
    # one extended-precision refinement of Sigma; gamma_i -> 0 for weights
    # about to be pruned and loses digits to the rounded inverse otherwise
    P_l = Phi.astype(np.longdouble)
    B_l = P_l.T @ P_l / sigma2
    S_l = Sigma.astype(np.longdouble)
    R = np.eye(len(S_l), dtype=np.longdouble) - (B_l + np.diag(alphas.astype(np.longdouble))) @ S_l
    S_l = S_l + S_l @ R
    Sigma = 0.5 * (S_l + S_l.T).astype(float)
    gamma = np.einsum("ij,ji->i", B_l, S_l).astype(float)
    a_new, s2_new, held = _reestimate(Phi, t, gram, Sigma, mu, sigma2, alpha_max, sigma2_floor, gamma)
    return EmResult(Sigma, mu, a_new, s2_new, a_new >= alpha_max, held, log_ml)


def _reestimate(Phi, t, gram, Sigma, mu, sigma2, alpha_max, sigma2_floor, gamma=None):
    # 1 - alpha_i Sigma_ii rewritten as (B Sigma)_ii with B = Phi^T Phi / sigma2,
    # identical since (B + A) Sigma = I, but free of cancellation when gamma -> 0
    if gamma is None:
        gamma = np.einsum("ij,ji->i", gram, Sigma) / sigma2
    with np.errstate(divide="ignore", invalid="ignore"):
        a_new = gamma / mu**2
    a_new = np.where((mu == 0) | (gamma <= 0) | ~np.isfinite(a_new), alpha_max, a_new)
    resid = t - Phi @ mu
    denom = len(t) - np.sum(gamma)
    held = not denom > 0
    s2_new = sigma2 if held else max(float(resid @ resid) / denom, sigma2_floor)
    return a_new, s2_new, held


def _em_fallback(Phi, t, Sigma, mu, alphas, sigma2, sigma2_floor):
    """Expectation-maximization hyperparameter step (monotone in the evidence)."""
    a = 1.0 / (mu**2 + np.diag(Sigma))
    resid = t - Phi @ mu
    gamma = 1.0 - alphas * np.diag(Sigma)
    s2 = max((float(resid @ resid) + sigma2 * float(np.sum(gamma))) / len(t), sigma2_floor)
    return a, s2


@dataclass(frozen=True, eq=False)
class RvmModel:
    relevance_vectors: np.ndarray  # (R, d)
    bias: bool
    mu: np.ndarray  # (R + bias,)
    Sigma: np.ndarray
    sigma2: float
    alphas: np.ndarray
    r: float
    iterations: int = 0
    n_train: int = 0
    log_ml_trace: tuple = ()
    scaling_key: str | None = None
    fallback_steps: int = 0

    @property
    def n_relevance(self):
        return len(self.relevance_vectors)

    @property
    def dim(self):
        return self.relevance_vectors.shape[1]

    def basis(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError(f"feature dimension {X.shape[1]} does not match model ({self.dim})")
        cols = [kernel_matrix(X, self.relevance_vectors, self.r)] if self.n_relevance else []
        if self.bias:
            cols.insert(0, np.ones((len(X), 1)))
        return np.hstack(cols) if cols else np.zeros((len(X), 0))

    def predict(self, X):
        """Predictive mean and variance for the rows of X."""
        phi = self.basis(X)
        mean = phi @ self.mu
        var = self.sigma2 + np.einsum("ij,jk,ik->i", phi, self.Sigma, phi)
        return mean, np.maximum(var, self.sigma2)

    def to_dict(self):
        il = np.tril_indices(len(self.mu))
        return {
            "format": "rvm",
            "version": FORMAT_VERSION,
            "r": self.r,
            "bias": self.bias,
            "relevance_vectors": self.relevance_vectors.tolist(),
            "mu": self.mu.tolist(),
            "Sigma_lower": self.Sigma[il].tolist(),
            "sigma2": self.sigma2,
            "alphas": self.alphas.tolist(),
            "iterations": self.iterations,
            "n_train": self.n_train,
            "scaling_key": self.scaling_key,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "rvm" or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a version-1 RVM document")
        m = len(d["mu"])
        S = np.zeros((m, m))
        il = np.tril_indices(m)
        S[il] = d["Sigma_lower"]
        S = S + np.tril(S, -1).T
        dim_rv = np.asarray(d["relevance_vectors"], dtype=float)
        return cls(
            relevance_vectors=dim_rv.reshape(len(dim_rv), -1) if dim_rv.size else dim_rv.reshape(0, 0),
            bias=bool(d["bias"]),
            mu=np.asarray(d["mu"], dtype=float),
            Sigma=S,
            sigma2=float(d["sigma2"]),
            alphas=np.asarray(d["alphas"], dtype=float),
            r=float(d["r"]),
            iterations=int(d.get("iterations", 0)),
            n_train=int(d.get("n_train", 0)),
            scaling_key=d.get("scaling_key"),
        )

    def dumps(self):
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class PredictiveDistribution:
    mean: float
    variance: float


def predict(model, x):
    mean, var = model.predict(np.atleast_2d(x))
    return PredictiveDistribution(float(mean[0]), float(var[0]))


@dataclass(frozen=True, eq=False)
class MeanModel:
    """Fallback predictor: constant mean with empirical variance."""

    mean: float
    variance: float
    dim: int
    flagged: str = "fallback"

    def predict(self, X):
        X = np.atleast_2d(X)
        n = len(X)
        return np.full(n, self.mean), np.full(n, self.variance)

    @classmethod
    def fit(cls, targets, dim, floor=1e-8):
        t = np.asarray(targets, dtype=float)
        if t.size == 0:
            return cls(0.5, 1.0 / 12.0, dim)
        return cls(float(t.mean()), max(float(t.var()), floor), dim)


def train(X, targets, config=KernelConfig()):
    """Fit an RVM; returns an :class:`RvmModel`.

    Iterates until the largest |change of log alpha| among surviving weights
    falls below ``config.tol`` or ``config.max_iters`` is reached. An update
    that would lower the evidence is replaced by the EM step, so the
    recorded evidence trace never decreases by more than rounding.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.asarray(targets, dtype=float)
    n = len(t)
    if n < 2:
        raise ValueError("need at least two training samples")
    Phi = design_matrix(X, config.r)
    if not config.bias:
        Phi = Phi[:, 1:]
    gram_full = Phi.T @ Phi
    phit_full = Phi.T @ t
    tt = float(t @ t)
    active = np.arange(Phi.shape[1])
    alphas = np.full(len(active), config.alpha_init)
    if config.sigma2_init is not None:
        sigma2 = float(config.sigma2_init)
    else:
        sigma2 = max(0.1 * float(np.var(t)), 1e-6)
    fallbacks = 0
    it = 0
    g = gram_full
    post = _posterior(g, phit_full, alphas, sigma2)
    trace = [log_evidence(n, tt, phit_full, post[1], alphas, sigma2, post[2])]
    slack = lambda L: 1e-8 * max(1.0, abs(L))
    for it in range(1, config.max_iters + 1):
        P = Phi[:, active]
        Sigma, mu, _ = post
        a_new, s2_new, _ = _reestimate(P, t, g, Sigma, mu, sigma2, config.alpha_max, config.sigma2_floor)
        keep = a_new < config.alpha_max
        new_post, new_ml = _evidence(gram_full, phit_full, tt, n, active[keep], a_new[keep], s2_new)
        if new_ml < trace[-1] - slack(trace[-1]):
            a_new, s2_new = _em_fallback(P, t, Sigma, mu, alphas, sigma2, config.sigma2_floor)
            keep = a_new < config.alpha_max
            new_post, new_ml = _evidence(gram_full, phit_full, tt, n, active[keep], a_new[keep], s2_new)
            fallbacks += 1
        if not np.any(keep):
            raise DegenerateModelError("all basis functions pruned")
        delta = float(np.max(np.abs(np.log(a_new[keep]) - np.log(alphas[keep]))))
        active, alphas, sigma2 = active[keep], a_new[keep], s2_new
        g = gram_full[np.ix_(active, active)]
        post = new_post
        trace.append(new_ml)
        if delta < config.tol:
            break
    Sigma, mu, _ = post
    has_bias = config.bias and active[0] == 0
    rv_idx = active - 1 if config.bias else active
    rv_idx = rv_idx[rv_idx >= 0]
    return RvmModel(
        relevance_vectors=X[rv_idx].copy(),
        bias=bool(has_bias),
        mu=mu,
        Sigma=Sigma,
        sigma2=float(sigma2),
        alphas=alphas.copy(),
        r=config.r,
        iterations=it,
        n_train=n,
        log_ml_trace=tuple(trace),
        fallback_steps=fallbacks,
    )


def _evidence(gram_full, phit_full, tt, n, active, alphas, sigma2):
    """Posterior and log evidence for the basis subset ``active``."""
    if len(active) == 0:
        return None, -math.inf
    pt = phit_full[active]
    post = _posterior(gram_full[np.ix_(active, active)], pt, alphas, sigma2)
    return post, log_evidence(n, tt, pt, post[1], alphas, sigma2, post[2])


def subsample_uniform(n, cap):
    """At most ``cap`` indices spread evenly over range(n)."""
    if n <= cap:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, cap).round().astype(int))


BANDWIDTH_GRID = (0.1, 0.3, 1.0, 3.0, 10.0)


def select_bandwidth(X, targets, config=KernelConfig(), grid=BANDWIDTH_GRID, k_folds=5):
    """Pick r by K-fold CV (contiguous folds) on validation mean squared error.

    Returns ``(best_r, scores)`` where scores maps r -> mean validation MSE.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.asarray(targets, dtype=float)
    folds = np.array_split(np.arange(len(t)), k_folds)
    scores = {}
    for r in grid:
        cfg = config.with_r(r)
        errs = []
        for f in folds:
            mask = np.ones(len(t), dtype=bool)
            mask[f] = False
            try:
                m = train(X[mask], t[mask], cfg)
                pred = m.predict(X[f])[0]
            except DegenerateModelError:
                pred = np.full(len(f), t[mask].mean())
            errs.append(float(np.mean((pred - t[f]) ** 2)))
        scores[r] = float(np.mean(errs))
    best = min(grid, key=lambda r: (scores[r], r))
    return best, scores


def fit(X, targets, config=KernelConfig(), min_samples=2):
    """Train, falling back to :class:`MeanModel` for tiny or degenerate problems."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.asarray(targets, dtype=float)
    if len(t) < min_samples:
        return MeanModel.fit(t, X.shape[1] if X.size else 0)
    try:
        return train(X, t, config)
    except DegenerateModelError:
        return MeanModel.fit(t, X.shape[1])
