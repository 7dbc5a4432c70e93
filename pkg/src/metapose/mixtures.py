"""Spherical Gaussian mixtures fitted to 2D heatmaps with weighted EM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyHeatmap

LOG_EPS = 1e-12
MIN_WEIGHT = 1e-12


@dataclass
class HeatmapGrid:
    """Probability grid of shape ``(H, W)``; cell centers live in ``[0, 1]^2``.

    Column index maps to the first image coordinate, row index to the second.
    The grid is normalized to unit mass on construction.
    """

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2:
            raise ValueError(f"heatmap must be 2D, got shape {p.shape}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("heatmap values must be finite and non-negative")
        total = p.sum()
        if total <= 0:
            raise EmptyHeatmap("heatmap has zero total mass")
        self.probs = p / total

    @property
    def height(self):
        return self.probs.shape[0]

    @property
    def width(self):
        return self.probs.shape[1]

    def points(self):
        """Cell centers as an ``(H*W, 2)`` array matching ``probs.ravel()``."""
        xs = (np.arange(self.width) + 0.5) / self.width
        ys = (np.arange(self.height) + 0.5) / self.height
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)


@dataclass
class GaussianMixture2D:
    weights: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 2)
        self.sigmas = np.asarray(self.sigmas, dtype=float).reshape(-1)
        m = self.weights.shape[0]
        if self.means.shape[0] != m or self.sigmas.shape[0] != m:
            raise ValueError("mixture component arrays disagree in length")

    @property
    def n_components(self):
        return self.weights.shape[0]

    @classmethod
    def single(cls, mean, sigma):
        return cls([1.0], [mean], [sigma])

    def sorted(self):
        """Components reordered by descending weight (stable)."""
        order = np.argsort(-self.weights, kind="stable")
        return GaussianMixture2D(self.weights[order], self.means[order], self.sigmas[order])


@dataclass
class EmConfig:
    n_components: int = 4
    max_iters: int = 50
    tol: float = 1e-7
    seed: int = 0
    sigma_floor: float = 1e-4

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")


def component_log_terms(weights, means, sigmas, x):
    """Per-component terms ``log(w / (2 pi s^2) + eps) - |x - mu|^2 / (2 s^2)``.

    Broadcasts: ``weights``/``sigmas`` are ``(..., M)``, ``means`` is
    ``(..., M, 2)`` and ``x`` is ``(..., 2)``. Returns ``(..., M)``.
    """
    var = sigmas**2
    diff = x[..., None, :] - means
    sq = np.sum(diff * diff, axis=-1)
    return np.log(weights / (2.0 * np.pi * var) + LOG_EPS) - sq / (2.0 * var)


def _lse(a):
    top = np.max(a, axis=-1, keepdims=True)
    return (top + np.log(np.sum(np.exp(a - top), axis=-1, keepdims=True)))[..., 0]


def mixture_log_prob(weights, means, sigmas, x):
    return _lse(component_log_terms(weights, means, sigmas, x))


def mixture_log_prob_grad(weights, means, sigmas, x):
    """Return ``(log_prob, d log_prob / dx)`` with the same broadcasting rules."""
    a = component_log_terms(weights, means, sigmas, x)
    lp = _lse(a)
    resp = np.exp(a - lp[..., None])
    diff = x[..., None, :] - means
    grad = -np.sum((resp / sigmas**2)[..., None] * diff, axis=-2)
    return lp, grad


def log_prob(g, x):
    """Stable log-density of mixture ``g`` at ``x`` (shape ``(2,)`` or ``(N, 2)``)."""
    x = np.asarray(x, dtype=float)
    return mixture_log_prob(g.weights, g.means, g.sigmas, x)


def weighted_log_likelihood(h, g):
    return float(np.dot(h.probs.ravel(), log_prob(g, h.points())))


def _seed_means(x, p, m, rng):
    """k-means++ seeding with draws proportional to cell mass."""
    idx = [rng.choice(len(x), p=p)]
    d2 = np.sum((x - x[idx[0]]) ** 2, axis=1)
    for _ in range(1, m):
        score = p * d2
        total = score.sum()
        if total <= 0:
            nxt = rng.choice(len(x), p=p)
        else:
            nxt = rng.choice(len(x), p=score / total)
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return x[idx].copy(), d2


def em_iterations(h, cfg):
    """Yield the mixture after seeding and after every EM iteration."""
    x = h.points()
    p = h.probs.ravel()
    keep = p > 0
    x, p = x[keep], p[keep]
    rng = np.random.default_rng(cfg.seed)
    m = cfg.n_components
    means, d2 = _seed_means(x, p, m, rng)
    spread = np.sqrt(max(np.dot(p, d2) / 2.0, 0.0))
    sigmas = np.full(m, max(spread, cfg.sigma_floor))
    weights = np.full(m, 1.0 / m)
    g = GaussianMixture2D(weights, means, sigmas)
    yield g
    for _ in range(cfg.max_iters):
        # E-step: plain responsibilities
        a = component_log_terms(g.weights, g.means, g.sigmas, x)
        eta = np.exp(a - _lse(a)[:, None])
        # weighted M-step
        ep = eta * p[:, None]
        mass = ep.sum(axis=0)
        weights = mass / mass.sum()
        means = g.means.copy()
        sigmas = g.sigmas.copy()
        live = mass > 0
        means[live] = (ep[:, live].T @ x) / mass[live, None]
        sq = np.sum((x[:, None, :] - means[None]) ** 2, axis=-1)
        # per-axis variance of a spherical 2D Gaussian: divide by the dimension
        sigmas[live] = np.sqrt(np.sum(ep[:, live] * sq[:, live], axis=0) / (2.0 * mass[live]))
        sigmas = np.maximum(sigmas, cfg.sigma_floor)
        weights = np.maximum(weights, MIN_WEIGHT)
        weights = weights / weights.sum()
        g = GaussianMixture2D(weights, means, sigmas)
        yield g


def fit_gmm(h, cfg=None):
    """Fit a spherical mixture to heatmap ``h``; stops once the weighted
    log-likelihood improves by less than ``cfg.tol``."""
    cfg = cfg or EmConfig()
    prev = -np.inf
    g = None
    for g in em_iterations(h, cfg):
        ll = weighted_log_likelihood(h, g)
        if ll - prev < cfg.tol:
            break
        prev = ll
    return g


@dataclass
class MixtureSet:
    """Per-(camera, joint) mixtures packed into arrays with a shared component count.

    ``weights`` and ``sigmas`` are ``(C, J, M)``, ``means`` is ``(C, J, M, 2)``.
    """

    weights: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.sigmas = np.asarray(self.sigmas, dtype=float)
        if self.weights.ndim != 3 or self.means.shape != self.weights.shape + (2,) \
                or self.sigmas.shape != self.weights.shape:
            raise ValueError("inconsistent mixture array shapes")

    @property
    def shape(self):
        """``(C, J, M)``."""
        return self.weights.shape

    @classmethod
    def from_nested(cls, mixtures):
        """Build from a ``[camera][joint]`` nested list of :class:`GaussianMixture2D`."""
        ms = {g.n_components for row in mixtures for g in row}
        if len(ms) != 1:
            raise ValueError(f"mixtures must share a component count, got {sorted(ms)}")
        return cls(
            [[g.weights for g in row] for row in mixtures],
            [[g.means for g in row] for row in mixtures],
            [[g.sigmas for g in row] for row in mixtures],
        )

    def get(self, c, j):
        return GaussianMixture2D(self.weights[c, j], self.means[c, j], self.sigmas[c, j])

    def take_cameras(self, index):
        index = np.asarray(index)
        return MixtureSet(self.weights[index], self.means[index], self.sigmas[index])

    def log_prob(self, keypoints):
        """Log-density of each ``(C, J, 2)`` keypoint under its own mixture."""
        return mixture_log_prob(self.weights, self.means, self.sigmas, keypoints)
