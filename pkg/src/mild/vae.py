"""Per-agent VAE with a full-covariance Gaussian posterior.

The encoder trunk feeds two linear heads: the posterior mean and the
row-major lower triangle of its Cholesky factor. Diagonal entries go through
``l -> 2|l| + DIAG_FLOOR``; off-diagonal entries are used as-is.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mild import numkit
from mild.errors import DimensionMismatch
from mild.gauss import MultivariateGaussian
from mild.nnet import LEAKY_SLOPE, DenseNet

DIAG_FLOOR = 1e-4


def n_tri(d: int) -> int:
    return d * (d + 1) // 2


def assemble_chol(raw: np.ndarray, d: int) -> np.ndarray:
    """Map ``(n, d(d+1)/2)`` triangle-head outputs to ``(n, d, d)`` Cholesky factors."""
    rows, cols = np.tril_indices(d)
    L = np.zeros((raw.shape[0], d, d))
    L[:, rows, cols] = raw
    diag = np.arange(d)
    L[:, diag, diag] = 2.0 * np.abs(L[:, diag, diag]) + DIAG_FLOOR
    return L


def sample_posterior(mean, chol, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Reparameterized draws ``mean + chol @ eps``.

    Accepts a single posterior (``mean`` of shape ``(d,)``) or a batch
    (``(b, d)`` with ``chol`` ``(b, d, d)``). Returns ``(samples, eps)``;
    samples are ``(n, d)`` or ``(b, n, d)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    mean = np.asarray(mean, dtype=float)
    chol = np.asarray(chol, dtype=float)
    rng = numkit.make_rng(rng)
    if mean.ndim == 1:
        eps = rng.standard_normal((n, mean.size))
        return mean + eps @ chol.T, eps
    eps = rng.standard_normal((mean.shape[0], n, mean.shape[1]))
    return mean[:, None, :] + np.einsum("bij,bsj->bsi", chol, eps), eps


@dataclass
class ElboResult:
    loss: float
    recon: float
    kl: float
    grads: list[np.ndarray]


def _kl_terms(mu: np.ndarray, L: np.ndarray, priors: Sequence[MultivariateGaussian]):
    """Per-example KL(q_n || p_n) and its gradients w.r.t. the posterior mean and factor."""
    n, d = mu.shape
    kl = np.empty(n)
    g_mu = np.empty_like(mu)
    g_L = np.empty_like(L)
    groups: dict[int, list[int]] = {}
    lookup: dict[int, MultivariateGaussian] = {}
    for i, p in enumerate(priors):
        if p.dim != d:
            raise DimensionMismatch(f"prior dimension {p.dim} != latent dimension {d}")
        groups.setdefault(id(p), []).append(i)
        lookup[id(p)] = p
    diag = np.arange(d)
    for key, idx in groups.items():
        p = lookup[key]
        idx = np.asarray(idx)
        m = len(idx)
        Lq = L[idx]  # (m, d, d)
        stacked = Lq.transpose(1, 0, 2).reshape(d, m * d)
        M = numkit.solve_triangular(p.chol, stacked)  # Lp^-1 Lq
        PL = numkit.solve_triangular(p.chol, M, trans=True).reshape(d, m, d).transpose(1, 0, 2)
        M = M.reshape(d, m, d)
        diff = (mu[idx] - p.mean).T  # (d, m)
        w = numkit.solve_triangular(p.chol, diff)
        Pdiff = numkit.solve_triangular(p.chol, w, trans=True).T
        logdet_q = 2.0 * np.sum(np.log(Lq[:, diag, diag]), axis=1)
        kl[idx] = 0.5 * (
            np.sum(M * M, axis=(0, 2)) - d + np.sum(w * w, axis=0) + p.logdet() - logdet_q
        )
        g_mu[idx] = Pdiff
        gl = np.tril(PL)
        gl[:, diag, diag] -= 1.0 / Lq[:, diag, diag]
        g_L[idx] = gl
    return kl, g_mu, g_L


class VaeAgent:
    def __init__(
        self,
        input_dim: int,
        latent_dim: int = 5,
        hidden: Sequence[int] = (250, 150),
        rng=0,
        leaky_slope: float = LEAKY_SLOPE,
        nets: dict | None = None,
    ):
        self.input_dim = int(input_dim)
        self.latent_dim = int(latent_dim)
        self.hidden = tuple(int(h) for h in hidden)
        if nets is not None:
            self.trunk = nets["trunk"]
            self.mean_head = nets["mean_head"]
            self.tri_head = nets["tri_head"]
            self.decoder = nets["decoder"]
        else:
            rng = numkit.make_rng(rng)
            sizes = (self.input_dim, *self.hidden)
            self.trunk = DenseNet.build(sizes, rng, output_activation="leaky_relu", leaky_slope=leaky_slope)
            self.mean_head = DenseNet.build((self.hidden[-1], self.latent_dim), rng, leaky_slope=leaky_slope)
            self.tri_head = DenseNet.build((self.hidden[-1], n_tri(self.latent_dim)), rng, leaky_slope=leaky_slope)
            self.decoder = DenseNet.build(
                (self.latent_dim, *self.hidden[::-1], self.input_dim), rng, leaky_slope=leaky_slope
            )
        if self.decoder.out_dim != self.input_dim or self.trunk.in_dim != self.input_dim:
            raise DimensionMismatch("encoder/decoder do not match input_dim")

    def nets(self) -> dict[str, DenseNet]:
        return {"trunk": self.trunk, "mean_head": self.mean_head, "tri_head": self.tri_head, "decoder": self.decoder}

    def parameters(self) -> list[np.ndarray]:
        out = []
        for net in self.nets().values():
            out.extend(net.parameters())
        return out

    def _check(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.input_dim:
            raise DimensionMismatch(f"input has {x.shape[1]} dims, agent expects {self.input_dim}")
        return x

    def encode_arrays(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Posterior means ``(n, d)`` and Cholesky factors ``(n, d, d)``."""
        h = self.trunk(self._check(x))
        return self.mean_head(h), assemble_chol(self.tri_head(h), self.latent_dim)

    def encode(self, x) -> list[MultivariateGaussian]:
        mu, L = self.encode_arrays(x)
        return [MultivariateGaussian(m, l) for m, l in zip(mu, L)]

    def decode(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[1] != self.latent_dim:
            raise DimensionMismatch(f"latent has {z.shape[1]} dims, agent expects {self.latent_dim}")
        return self.decoder(z)

    def elbo_loss(
        self,
        x,
        priors: Sequence[MultivariateGaussian],
        n_samples: int = 10,
        kl_scale: float = 1e-3,
        rng=None,
        eps: np.ndarray | None = None,
    ) -> ElboResult:
        """Negative-ELBO surrogate and its gradients (order of :meth:`parameters`).

        ``loss = mean_n [ mean_s sum_j (decode(z_ns)_j - x_nj)^2 + kl_scale * KL(q_n || p_n) ]``.
        The squared error is summed over coordinates, i.e. the negative log of an
        identity-covariance Gaussian likelihood up to a constant and a factor 2.
        Pass ``eps`` of shape ``(n, n_samples, d)`` to fix the reparameterization noise.
        """
        x = self._check(x)
        n, D = x.shape
        d = self.latent_dim
        if len(priors) != n:
            raise DimensionMismatch(f"{len(priors)} priors for a batch of {n}")
        h, c_trunk = self.trunk.forward(x)
        mu, c_mu = self.mean_head.forward(h)
        raw, c_tri = self.tri_head.forward(h)
        L = assemble_chol(raw, d)
        if eps is None:
            eps = numkit.make_rng(rng).standard_normal((n, n_samples, d))
        S = eps.shape[1]
        z = mu[:, None, :] + np.einsum("nij,nsj->nsi", L, eps)
        xhat, c_dec = self.decoder.forward(z.reshape(n * S, d))
        resid = xhat.reshape(n, S, D) - x[:, None, :]
        recon_n = np.mean(np.sum(resid * resid, axis=2), axis=1)
        kl_n, gkl_mu, gkl_L = _kl_terms(mu, L, priors)
        recon = float(recon_n.mean())
        kl = float(kl_n.mean())
        loss = recon + kl_scale * kl

        g_dec, g_z = self.decoder.backward(c_dec, (2.0 / (n * S)) * resid.reshape(n * S, D))
        g_z = g_z.reshape(n, S, d)
        g_mu = g_z.sum(axis=1) + (kl_scale / n) * gkl_mu
        g_L = np.tril(np.einsum("nsi,nsj->nij", g_z, eps)) + (kl_scale / n) * gkl_L
        rows, cols = np.tril_indices(d)
        g_raw = g_L[:, rows, cols]
        on_diag = rows == cols
        g_raw[:, on_diag] *= 2.0 * np.sign(raw[:, on_diag])
        g_mean_head, g_h1 = self.mean_head.backward(c_mu, g_mu)
        g_tri_head, g_h2 = self.tri_head.backward(c_tri, g_raw)
        g_trunk, _ = self.trunk.backward(c_trunk, g_h1 + g_h2, input_grad=False)
        return ElboResult(loss, recon, kl, g_trunk + g_mean_head + g_tri_head + g_dec)


@dataclass
class VaePair:
    agent1: VaeAgent
    agent2: VaeAgent

    def __post_init__(self):
        if self.agent1.latent_dim != self.agent2.latent_dim:
            raise DimensionMismatch("both agents must share the latent dimension")

    @property
    def latent_dim(self) -> int:
        return self.agent1.latent_dim

    def agent(self, s: int) -> VaeAgent:
        return self.agent1 if s == 1 else self.agent2


def transfer_hidden(src: VaeAgent, dst: VaeAgent) -> int:
    """Copy every layer whose shape matches between ``src`` and ``dst``; returns the count copied.

    With different input sizes this copies the trunk's second layer onward,
    both heads, and all decoder layers but the last.
    """
    copied = 0
    for name in ("trunk", "mean_head", "tri_head", "decoder"):
        for a, b in zip(getattr(src, name).layers, getattr(dst, name).layers):
            if a.weight.shape == b.weight.shape:
                b.weight[...] = a.weight
                b.bias[...] = a.bias
                copied += 1
    return copied
