"""Full-covariance Gaussians stored by mean and lower Cholesky factor."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mild import numkit
from mild.errors import DimensionMismatch, NotPositiveDefinite, SingularBlock

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class BlockSplit:
    """Index sets for agent 1 and agent 2 inside a joint vector."""

    first_dims: tuple[int, ...]
    second_dims: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "first_dims", tuple(int(i) for i in self.first_dims))
        object.__setattr__(self, "second_dims", tuple(int(i) for i in self.second_dims))
        if set(self.first_dims) & set(self.second_dims):
            raise DimensionMismatch("block index sets overlap")
        if len(set(self.first_dims)) != len(self.first_dims) or len(set(self.second_dims)) != len(
            self.second_dims
        ):
            raise DimensionMismatch("repeated index in block split")

    @property
    def dim(self) -> int:
        return len(self.first_dims) + len(self.second_dims)

    @classmethod
    def halves(cls, d1: int, d2: int | None = None) -> "BlockSplit":
        d2 = d1 if d2 is None else d2
        return cls(tuple(range(d1)), tuple(range(d1, d1 + d2)))

    def check(self, d: int) -> None:
        if sorted(self.first_dims + self.second_dims) != list(range(d)):
            raise DimensionMismatch(f"block split does not cover 0..{d}")


@dataclass(frozen=True, eq=False)
class MultivariateGaussian:
    mean: np.ndarray
    chol: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        chol = np.array(self.chol, dtype=float)
        if chol.shape != (mean.size, mean.size):
            raise DimensionMismatch(f"chol shape {chol.shape} does not match mean of size {mean.size}")
        chol = np.tril(chol)
        if not np.all(np.diag(chol) > 0):
            raise NotPositiveDefinite("Cholesky diagonal must be strictly positive")
        mean.setflags(write=False)
        chol.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "chol", chol)

    @classmethod
    def from_cov(cls, mean, cov) -> "MultivariateGaussian":
        return cls(mean, numkit.cholesky(cov))

    @classmethod
    def standard(cls, d: int) -> "MultivariateGaussian":
        return cls(np.zeros(d), np.eye(d))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def cov(self) -> np.ndarray:
        c = self.chol @ self.chol.T
        return 0.5 * (c + c.T)

    def logdet(self) -> float:
        return numkit.logdet_from_chol(self.chol)

    def logpdf(self, x) -> float | np.ndarray:
        """Log-density at ``x`` (a vector, or a ``(n, d)`` batch)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"point has dimension {x.shape[-1]}, Gaussian has {self.dim}")
        diff = (x - self.mean).reshape(-1, self.dim).T
        w = numkit.solve_triangular(self.chol, diff)
        out = -0.5 * (np.sum(w * w, axis=0) + self.dim * LOG_2PI + self.logdet())
        return float(out[0]) if x.ndim == 1 else out

    def marginal(self, dims: Sequence[int]) -> "MultivariateGaussian":
        idx = _index(dims, self.dim)
        return MultivariateGaussian.from_cov(self.mean[idx], self.cov[np.ix_(idx, idx)])

    def sample(self, n: int, rng) -> np.ndarray:
        eps = numkit.make_rng(rng).standard_normal((n, self.dim))
        return self.mean + eps @ self.chol.T

    def allclose(self, other: "MultivariateGaussian", atol: float = 1e-12) -> bool:
        return self.dim == other.dim and np.allclose(self.mean, other.mean, atol=atol) and np.allclose(
            self.cov, other.cov, atol=atol
        )


def _index(dims, d: int) -> np.ndarray:
    idx = np.asarray(list(dims), dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= d):
        raise DimensionMismatch(f"index set {list(dims)} outside 0..{d - 1}")
    return idx


def logpdf(g: MultivariateGaussian, x) -> float | np.ndarray:
    return g.logpdf(x)


def marginal(g: MultivariateGaussian, dims: Sequence[int]) -> MultivariateGaussian:
    return g.marginal(dims)


@dataclass(frozen=True, eq=False)
class Conditioner:
    """Affine map ``observed -> conditional mean`` plus the fixed conditional covariance.

    ``mean(x) = offset + gain @ x``; the covariance does not depend on ``x``.
    """

    gain: np.ndarray
    offset: np.ndarray
    cond_chol: np.ndarray
    observed_marginal: MultivariateGaussian

    def mean(self, observed) -> np.ndarray:
        observed = np.asarray(observed, dtype=float)
        return self.offset + observed @ self.gain.T

    @property
    def cov(self) -> np.ndarray:
        return self.cond_chol @ self.cond_chol.T


def conditioner(g: MultivariateGaussian, split: BlockSplit) -> Conditioner:
    split.check(g.dim)
    i1 = np.asarray(split.first_dims, dtype=int)
    i2 = np.asarray(split.second_dims, dtype=int)
    cov = g.cov
    s11 = cov[np.ix_(i1, i1)]
    s12 = cov[np.ix_(i1, i2)]
    s22 = cov[np.ix_(i2, i2)]
    try:
        l11 = numkit.cholesky(s11)
    except NotPositiveDefinite as exc:
        raise SingularBlock(f"observed block is not positive definite: {exc}") from None
    a = numkit.solve_triangular(l11, s12)  # L11^{-1} S12
    gain = numkit.solve_triangular(l11, a, trans=True).T  # S21 S11^{-1}
    offset = g.mean[i2] - gain @ g.mean[i1]
    cond = s22 - a.T @ a
    cond = 0.5 * (cond + cond.T)
    cond_chol = numkit.safe_cholesky(cond)
    return Conditioner(gain, offset, cond_chol, MultivariateGaussian(g.mean[i1], l11))


def condition(g: MultivariateGaussian, split: BlockSplit, observed) -> MultivariateGaussian:
    """Exact conditional of the second block given the first block equals ``observed``."""
    observed = np.asarray(observed, dtype=float).reshape(-1)
    if observed.size != len(split.first_dims):
        raise DimensionMismatch(f"observed has {observed.size} dims, split expects {len(split.first_dims)}")
    c = conditioner(g, split)
    return MultivariateGaussian(c.mean(observed), c.cond_chol)


def kl_divergence(q: MultivariateGaussian, p: MultivariateGaussian) -> float:
    """Closed-form ``KL(q || p)`` between full-covariance Gaussians."""
    if q.dim != p.dim:
        raise DimensionMismatch(f"KL between dimensions {q.dim} and {p.dim}")
    m = numkit.solve_triangular(p.chol, q.chol)
    delta = numkit.solve_triangular(p.chol, p.mean - q.mean)
    kl = 0.5 * (np.sum(m * m) - q.dim + delta @ delta + p.logdet() - q.logdet())
    return max(float(kl), 0.0) if kl > -1e-12 else float(kl)
