"""
Truncated Dirichlet-process Gaussian mixture fit by ADVI.

Generative model over (standardized) rows y:
    alpha ~ Gamma(1, 1)
    nu_k  ~ Beta(1, alpha),        k < K
    pi    = stick_break(nu)
    mu_k  ~ Normal(0, I)
    sigma_kj ~ HalfNormal(1)
    y_i   ~ sum_k pi_k Normal(mu_k, diag(sigma_k^2))

The variational posterior is a mean-field Gaussian over the unconstrained
variables (log alpha, logit nu, mu, log sigma).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import special

import tensor as T
from data_handler import load_checkpoint, save_checkpoint
from optim import Adam
from tensor import LOG_2PI, Tensor, grad, parameters
from utils import DivergenceError, NumericalError, PathLike, ShapeError, derive_seed

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]
LOG_HALF_NORMAL_CONST = math.log(2.0) - 0.5 * LOG_2PI
TRUNCATION_GRID = (25, 50, 75, 100)


@dataclass
class DPGMMConfig:
    truncation: int = 50
    mc_samples: int = 8
    lr: float = 3e-3
    steps: int = 2000
    batch_size: int = 256
    n_draws: int = 512
    init_stick: float = 0.99
    init_scale: float = 0.1
    standardize: bool = True
    clip_norm: Optional[float] = 100.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.truncation < 1:
            raise ValueError("truncation K must be >= 1")
        if self.lr <= 0.0:
            raise ValueError("lr must be > 0")
        if self.mc_samples < 1 or self.n_draws < 1 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("mc_samples, n_draws and batch_size must be >= 1")
        if not 0.0 < self.init_stick < 1.0:
            raise ValueError("init_stick must be in (0, 1)")


# ----- closed-form pieces ---------------------------------------------------------------
def stick_break(nu) -> np.ndarray:
    """
    pi_i = nu_i prod_{j<i} (1 - nu_j) for i < K, and pi_K takes the
    remaining stick. Accepts (K-1,) or a batch (..., K-1).
    """
    nu = np.asarray(nu, dtype=np.float64)
    if nu.size and (np.any(nu <= 0.0) or np.any(nu >= 1.0)):
        raise ValueError("stick fractions nu must lie in (0, 1)")
    batch = nu.shape[:-1] if nu.ndim else ()
    remaining = np.cumprod(1.0 - nu, axis=-1)
    ones = np.ones(batch + (1,))
    before = np.concatenate([ones, remaining], axis=-1)
    return before * np.concatenate([nu, ones], axis=-1)


def _component_log_density(y: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    z = (y - mu) / sigma
    return np.sum(-0.5 * LOG_2PI - np.log(sigma) - 0.5 * z * z, axis=-1)


def mixture_log_lik(y, pi, mu, sigma):
    """
    log sum_k pi_k N(y; mu_k, diag(sigma_k^2)).

    y (p,) or (n, p); pi (K,); mu, sigma (K, p). Returns a float or (n,).
    """
    y = np.asarray(y, dtype=np.float64)
    pi, mu, sigma = (np.asarray(a, dtype=np.float64) for a in (pi, mu, sigma))
    if mu.shape != sigma.shape or mu.shape[0] != pi.shape[-1] or y.shape[-1] != mu.shape[-1]:
        raise ShapeError(f"mixture shapes disagree: y {y.shape}, pi {pi.shape}, mu {mu.shape}, sigma {sigma.shape}")
    comp = _component_log_density(y[..., None, :], mu, sigma)
    with np.errstate(divide="ignore"):
        out = special.logsumexp(comp + np.log(pi), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


# ----- variational family -------------------------------------------------------------------
@dataclass(frozen=True)
class MixtureDensityDraws:
    """n posterior draws of mixture parameters on the original data scale."""

    weights: np.ndarray  # (n, K)
    means: np.ndarray    # (n, K, p)
    stds: np.ndarray     # (n, K, p)

    def __len__(self) -> int:
        return len(self.weights)


@dataclass
class VariationalPosterior:
    """
    Mean-field Gaussian q over (log alpha, logit nu, mu, log sigma).

    params holds '<var>.loc' and '<var>.log_scale' for var in
    alpha (1,), nu (K-1,), mu (K, p), sigma (K, p). shift/scale map the
    original data to the standardized space the model lives in.
    """

    config: DPGMMConfig
    dim: int
    params: Params
    shift: np.ndarray
    scale: np.ndarray
    elbo_trace: List[float] = field(default_factory=list)

    @property
    def truncation(self) -> int:
        return self.params["mu.loc"].shape[0]

    @property
    def stds(self) -> Dict[str, np.ndarray]:
        return {name[: -len(".log_scale")]: np.exp(v) for name, v in self.params.items() if name.endswith(".log_scale")}

    def component_means(self) -> np.ndarray:
        """Variational mean of each component centre, on the original scale."""
        return self.params["mu.loc"] * self.scale + self.shift

    def save(self, path: PathLike) -> None:
        arrays = dict(self.params)
        arrays["standardize.shift"] = self.shift
        arrays["standardize.scale"] = self.scale
        save_checkpoint(path, arrays, {
            "kind": "dpgmm",
            "config": asdict(self.config),
            "dim": self.dim,
            "elbo_trace": self.elbo_trace,
        })

    @classmethod
    def load(cls, path: PathLike) -> "VariationalPosterior":
        arrays, manifest = load_checkpoint(path, kind="dpgmm")
        shift = arrays.pop("standardize.shift")
        scale = arrays.pop("standardize.scale")
        return cls(DPGMMConfig(**manifest["config"]), int(manifest["dim"]), arrays, shift, scale,
                   list(manifest.get("elbo_trace", [])))


VARIABLES = ("alpha", "nu", "mu", "sigma")


def _shapes(K: int, p: int) -> Dict[str, Tuple[int, ...]]:
    return {"alpha": (1,), "nu": (K - 1,), "mu": (K, p), "sigma": (K, p)}


def _farthest_points(rows: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy farthest-point selection of k centres, starting from a random row."""
    pool = rows[rng.choice(len(rows), size=min(len(rows), 2000), replace=False)]
    centres = [pool[rng.integers(len(pool))]]
    dist = np.sum((pool - centres[0]) ** 2, axis=1)
    for _ in range(1, k):
        centres.append(pool[int(np.argmax(dist))])
        dist = np.minimum(dist, np.sum((pool - centres[-1]) ** 2, axis=1))
    return np.asarray(centres)


def init_posterior(rows: np.ndarray, config: DPGMMConfig, rng: np.random.Generator,
                   shift: Optional[np.ndarray] = None, scale: Optional[np.ndarray] = None) -> VariationalPosterior:
    """
    Start from a dominant first stick (nu = init_stick) with component
    centres spread over the data, so components are recruited as needed.
    """
    K, p = config.truncation, rows.shape[1]
    shift = np.zeros(p) if shift is None else shift
    scale = np.ones(p) if scale is None else scale
    std_rows = (rows - shift) / scale
    params: Params = {
        "alpha.loc": np.zeros(1),
        "nu.loc": np.full(K - 1, special.logit(config.init_stick)),
        "mu.loc": _farthest_points(std_rows, K, rng) if len(rows) else np.zeros((K, p)),
        "sigma.loc": np.zeros((K, p)),
    }
    for var, shape in _shapes(K, p).items():
        params[f"{var}.log_scale"] = np.full(shape, math.log(config.init_scale))
    return VariationalPosterior(config, p, params, shift, scale)


def draw_noise(rng: np.random.Generator, K: int, p: int, n: int) -> Dict[str, np.ndarray]:
    return {var: rng.standard_normal((n,) + shape) for var, shape in _shapes(K, p).items()}


def _elbo_tensor(P: Mapping[str, Tensor], rows: np.ndarray, noise: Mapping[str, np.ndarray],
                 data_scale: float = 1.0) -> Tensor:
    """
    Reparameterized ELBO estimate on standardized rows:
    mean over draws of [data_scale * log p(rows | theta) + log p(theta) + log|J|] + H[q].
    """
    u = {var: P[f"{var}.loc"] + T.exp(P[f"{var}.log_scale"]) * noise[var] for var in VARIABLES}
    S = noise["alpha"].shape[0]
    K, p = P["mu.loc"].shape

    u_alpha = u["alpha"]
    alpha = T.exp(u_alpha)
    log_nu = -T.softplus(-u["nu"])
    log_1m_nu = -T.softplus(u["nu"])
    mu, log_sigma = u["mu"], u["sigma"]
    sigma = T.exp(log_sigma)

    # log p(theta) + log|d theta / d u|, per draw
    log_prior = T.sum(-alpha + u_alpha, axis=-1)
    log_prior = log_prior + T.sum(T.log(alpha) + (alpha - 1.0) * log_1m_nu + log_nu + log_1m_nu, axis=-1)
    log_prior = log_prior + T.sum(T.reshape(-0.5 * LOG_2PI - 0.5 * T.square(mu), (S, -1)), axis=-1)
    log_prior = log_prior + T.sum(T.reshape(LOG_HALF_NORMAL_CONST - 0.5 * T.square(sigma) + log_sigma, (S, -1)), axis=-1)

    total = log_prior
    if len(rows):
        zeros = np.zeros((S, 1))
        log_pi = (T.concat([log_nu, Tensor(zeros)], axis=-1)
                  + T.concat([Tensor(zeros), T.cumsum(log_1m_nu, axis=-1)], axis=-1))
        y = rows[None, :, None, :]
        z = (y - T.reshape(mu, (S, 1, K, p))) / T.reshape(sigma, (S, 1, K, p))
        comp = T.sum(-0.5 * LOG_2PI - T.reshape(log_sigma, (S, 1, K, p)) - 0.5 * T.square(z), axis=-1)
        loglik = T.sum(T.logsumexp(comp + T.reshape(log_pi, (S, 1, K)), axis=-1), axis=-1)
        total = total + data_scale * loglik

    entropy = 0.0
    for var in VARIABLES:
        entropy = entropy + T.sum(P[f"{var}.log_scale"] + 0.5 * (1.0 + LOG_2PI))
    return T.mean(total) + entropy


def _standardized(posterior: VariationalPosterior, data) -> np.ndarray:
    rows = np.asarray(data, dtype=np.float64).reshape(-1, posterior.dim) if np.size(data) else np.zeros((0, posterior.dim))
    return (rows - posterior.shift) / posterior.scale


def elbo(posterior: VariationalPosterior, data, mc_samples: int, rng: Optional[np.random.Generator] = None,
         noise: Optional[Mapping[str, np.ndarray]] = None) -> float:
    """
    Monte Carlo ELBO of `data` under `posterior`, on the standardized scale.
    Passing `noise` (from draw_noise) fixes the draws for common random numbers.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    if noise is None:
        rng = rng or np.random.default_rng()
        noise = draw_noise(rng, posterior.truncation, posterior.dim, mc_samples)
    value = _elbo_tensor({k: Tensor(v) for k, v in posterior.params.items()}, _standardized(posterior, data), noise)
    return float(value.data)


def elbo_grad(posterior: VariationalPosterior, data, noise: Mapping[str, np.ndarray]) -> Tuple[float, Params]:
    P = parameters(posterior.params)
    value = _elbo_tensor(P, _standardized(posterior, data), noise)
    return float(value.data), grad(value, P)


def fit_advi(data, config: DPGMMConfig, rng: Optional[np.random.Generator] = None,
             tag: str = "dpgmm") -> VariationalPosterior:
    """Maximize the ELBO by Adam on minibatches; returns the posterior with its ELBO trace."""
    rows = np.asarray(getattr(data, "rows", data), dtype=np.float64)
    if rows.ndim != 2 or len(rows) == 0:
        raise ValueError(f"fit_advi needs a non-empty 2-d data matrix, got shape {rows.shape}")
    rng = rng or np.random.default_rng(config.seed)
    if config.standardize:
        shift, scale = rows.mean(axis=0), rows.std(axis=0)
        scale[scale < 1e-8] = 1.0
    else:
        shift, scale = np.zeros(rows.shape[1]), np.ones(rows.shape[1])
    posterior = init_posterior(rows, config, rng, shift, scale)
    std_rows = (rows - shift) / scale
    K, p = config.truncation, rows.shape[1]
    n = len(rows)
    batch = min(config.batch_size, n)
    opt = Adam(posterior.params, lr=config.lr, clip_norm=config.clip_norm)

    for step in range(config.steps):
        idx = rng.choice(n, size=batch, replace=False) if batch < n else np.arange(n)
        noise = draw_noise(rng, K, p, config.mc_samples)
        P = parameters(posterior.params)
        try:
            value = _elbo_tensor(P, std_rows[idx], noise, data_scale=n / batch)
            grads = grad(-value, P)
        except NumericalError as exc:
            raise DivergenceError(f"{tag} diverged at step {step}: {exc}", step=step) from exc
        posterior.params = opt.step(posterior.params, grads)
        posterior.elbo_trace.append(float(value.data))
        if (step + 1) % 200 == 0 or step + 1 == config.steps:
            recent = posterior.elbo_trace[-200:]
            logger.info("[%s] step %d elbo=%.3f", tag, step + 1, float(np.mean(recent)))
    return posterior


# ----- posterior predictive ------------------------------------------------------------------
def posterior_draws(posterior: VariationalPosterior, n_draws: int, rng: np.random.Generator) -> MixtureDensityDraws:
    """Draw mixture parameters from q, mapped back to the original data scale."""
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    noise = draw_noise(rng, posterior.truncation, posterior.dim, n_draws)
    u = {var: posterior.params[f"{var}.loc"] + np.exp(posterior.params[f"{var}.log_scale"]) * noise[var]
         for var in VARIABLES}
    weights = stick_break(np.clip(special.expit(u["nu"]), 1e-300, 1.0 - 1e-16))
    means = u["mu"] * posterior.scale + posterior.shift
    stds = np.exp(u["sigma"]) * posterior.scale
    return MixtureDensityDraws(weights, means, stds)


def _draws_log_lik(rows: np.ndarray, draws: MixtureDensityDraws, chunk: int) -> np.ndarray:
    out = np.empty(len(rows))
    with np.errstate(divide="ignore"):
        log_w = np.log(draws.weights)  # (S, K)
    for start in range(0, len(rows), chunk):
        y = rows[start:start + chunk, None, None, :]                     # (c, 1, 1, p)
        comp = _component_log_density(y, draws.means, draws.stds)         # (c, S, K)
        per_draw = special.logsumexp(comp + log_w, axis=-1)               # (c, S)
        out[start:start + chunk] = special.logsumexp(per_draw, axis=-1) - math.log(len(draws))
    return out


def posterior_log_lik(y, posterior, n_draws: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None):
    """
    log of the Monte Carlo posterior predictive
    (1/S) sum_s p(y | theta_s), theta_s ~ q. The same S draws serve every row.
    `posterior` may also be a MixtureDensityDraws.
    """
    if isinstance(posterior, MixtureDensityDraws):
        draws = posterior
    else:
        n_draws = n_draws or posterior.config.n_draws
        draws = posterior_draws(posterior, n_draws, rng or np.random.default_rng(posterior.config.seed))
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    rows = np.atleast_2d(y)
    S, K, p = draws.means.shape
    if rows.shape[1] != p:
        raise ShapeError(f"posterior expects rows of dim {p}, found {rows.shape[1]}")
    chunk = max(1, int(4e6 // max(S * K * p, 1)))
    out = _draws_log_lik(rows, draws, chunk)
    return float(out[0]) if single else out


def posterior_mean_weights(posterior: VariationalPosterior, n_draws: int = 1000, seed: int = 0) -> np.ndarray:
    draws = posterior_draws(posterior, n_draws, np.random.default_rng(seed))
    return draws.weights.mean(axis=0)


def effective_components(posterior: VariationalPosterior, threshold: float = 0.01,
                         n_draws: int = 1000, seed: int = 0) -> int:
    """Number of components whose posterior-mean weight exceeds `threshold`."""
    return int(np.sum(posterior_mean_weights(posterior, n_draws, seed) > threshold))


def fit_truncation_sweep(data, config: DPGMMConfig, truncations: Sequence[int] = TRUNCATION_GRID,
                         ) -> Dict[int, Tuple[VariationalPosterior, float]]:
    """Fit one posterior per truncation level; returns K -> (posterior, mean ELBO of the last 100 steps)."""
    results: Dict[int, Tuple[VariationalPosterior, float]] = {}
    for K in truncations:
        cfg = DPGMMConfig(**{**asdict(config), "truncation": int(K)})
        rng = np.random.default_rng(derive_seed(config.seed, "dpgmm-sweep", int(K)))
        posterior = fit_advi(data, cfg, rng, tag=f"dpgmm K={K}")
        final = float(np.mean(posterior.elbo_trace[-100:])) if posterior.elbo_trace else float("nan")
        results[int(K)] = (posterior, final)
        logger.info("[dpgmm-sweep] K=%d final elbo=%.3f effective=%d", K, final, effective_components(posterior))
    return results
