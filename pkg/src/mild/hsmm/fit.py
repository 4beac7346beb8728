"""Temporal-split initialization and EM fitting of an :class:`HsmmModel`.

EM is Baum-Welch over the step-level HMM with full-covariance emissions.
Covariances are MAP estimates ``(S_k + reg * I) / N_k`` so that every update
stays positive definite; the quantity that EM increases is therefore the
log-likelihood minus ``reg/2 * sum_k tr(Sigma_k^-1)``. Durations are refit
afterwards from the dwell times of the Viterbi segmentation.
"""

from __future__ import annotations

import warnings
from collections import defaultdict
from typing import Sequence

import numpy as np

from mild import numkit
from mild.errors import DegenerateComponentWarning, DimensionMismatch, InsufficientData
from mild.gauss import LOG_2PI, BlockSplit, MultivariateGaussian
from mild.hsmm.model import DURATION_STD_FLOOR, HsmmModel
from mild.numkit import logsumexp

PI_EPS = 1e-6
MIN_MASS = 1e-3


def _log(a) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(a)


def _as_demos(demos, dim: int | None = None) -> list[np.ndarray]:
    out = [np.asarray(d, dtype=float) for d in demos]
    if not out:
        raise InsufficientData("no demonstrations")
    for d in out:
        if d.ndim != 2:
            raise DimensionMismatch(f"demonstration must be (T, d), got {d.shape}")
        if dim is not None and d.shape[1] != dim:
            raise DimensionMismatch(f"demonstration has {d.shape[1]} dims, model has {dim}")
    return out


def temporal_slices(demos: Sequence[np.ndarray], K: int) -> list[np.ndarray]:
    """Stack the ``i``-th of ``K`` equal time slices of every demo."""
    parts: list[list[np.ndarray]] = [[] for _ in range(K)]
    for d in demos:
        T = d.shape[0]
        if T < K:
            raise InsufficientData(f"demo of length {T} is shorter than K={K}")
        for i in range(K):
            parts[i].append(d[i * T // K : (i + 1) * T // K])
    return [np.concatenate(p) for p in parts]


def regularization(demos: Sequence[np.ndarray]) -> float:
    data = np.concatenate(demos)
    cov = np.atleast_2d(np.cov(data.T, bias=True)) if data.shape[0] > 1 else np.zeros((data.shape[1],) * 2)
    return numkit.default_jitter(cov)


def _fit_gaussian(x: np.ndarray, reg: float) -> MultivariateGaussian:
    mean = x.mean(axis=0)
    diff = x - mean
    cov = diff.T @ diff / x.shape[0]
    return MultivariateGaussian(mean, numkit.cholesky(numkit.regularize_spd(cov, reg)))


def init_temporal_split(
    demos,
    K: int,
    split: BlockSplit | None = None,
    dur_floor: float = DURATION_STD_FLOOR,
    dmax_factor: float = 2.0,
) -> HsmmModel:
    """Seed component ``i`` from the ``i``-th temporal slice of every demo.

    The transition matrix starts left-to-right with the self-transition mass
    implied by an expected dwell of ``mean_length / K`` steps.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    demos = _as_demos(demos)
    dim = demos[0].shape[1]
    if split is None:
        split = BlockSplit.halves(dim // 2, dim - dim // 2)
    slices = temporal_slices(demos, K)
    for i, s in enumerate(slices):
        if s.shape[0] < 2:
            raise InsufficientData(f"temporal slice {i} has fewer than 2 points")
    reg = regularization(demos)
    comps = [_fit_gaussian(s, reg) for s in slices]

    t_bar = float(np.mean([d.shape[0] for d in demos]))
    dwell = t_bar / K
    pi = np.full(K, PI_EPS / max(K - 1, 1))
    pi[0] = 1.0 - PI_EPS if K > 1 else 1.0
    trans = np.zeros((K, K))
    leave = min(1.0, 1.0 / max(dwell, 1.0))
    for i in range(K - 1):
        trans[i, i] = 1.0 - leave
        trans[i, i + 1] = leave
    trans[K - 1, K - 1] = 1.0
    longest = max(d.shape[0] - (K - 1) * d.shape[0] // K for d in demos)
    return HsmmModel(
        pi=pi,
        trans=trans,
        components=comps,
        dur_mean=np.full(K, dwell),
        dur_std=np.full(K, dwell / 2.0),
        d_max=max(1, int(np.ceil(dmax_factor * longest))),
        split=split,
        dur_floor=dur_floor,
        reg=reg,
    )


def _log_emissions(model_comps, x: np.ndarray) -> np.ndarray:
    """``(N, T, K)`` log-densities for a stack of equal-length demos."""
    N, T, d = x.shape
    flat = x.reshape(-1, d)
    out = np.empty((flat.shape[0], len(model_comps)))
    for k, g in enumerate(model_comps):
        w = numkit.solve_triangular(g.chol, (flat - g.mean).T)
        out[:, k] = -0.5 * (np.sum(w * w, axis=0) + d * LOG_2PI + g.logdet())
    return out.reshape(N, T, -1)


def _forward_backward_log(log_pi, log_a, log_b):
    N, T, K = log_b.shape
    la = np.empty_like(log_b)
    lb = np.empty_like(log_b)
    la[:, 0] = log_pi + log_b[:, 0]
    for t in range(1, T):
        la[:, t] = logsumexp(la[:, t - 1, :, None] + log_a, axis=1) + log_b[:, t]
    lb[:, T - 1] = 0.0
    for t in range(T - 2, -1, -1):
        lb[:, t] = logsumexp(log_a + (log_b[:, t + 1] + lb[:, t + 1])[:, None, :], axis=2)
    ll = logsumexp(la[:, T - 1], axis=1)
    gamma = np.exp(la + lb - ll[:, None, None])
    if T > 1:
        lx = la[:, :-1, :, None] + log_a + (log_b[:, 1:] + lb[:, 1:])[:, :, None, :] - ll[:, None, None, None]
        xi = np.exp(lx).sum(axis=(0, 1))
    else:
        xi = np.zeros((K, K))
    return gamma, xi, ll


def _forward_backward(pi, a, log_b):
    """Forward-backward over ``(N, T, K)`` log-emissions; returns gamma, summed xi, per-demo loglik.

    Runs scaled in linear space; falls back to log space if a scale factor underflows.
    """
    N, T, K = log_b.shape
    shift = log_b.max(axis=2, keepdims=True)
    b = np.exp(log_b - shift)
    alpha = np.empty_like(b)
    scale = np.empty((N, T))
    alpha[:, 0] = pi * b[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        for t in range(T):
            if t:
                alpha[:, t] = (alpha[:, t - 1] @ a) * b[:, t]
            c = alpha[:, t].sum(axis=1)
            scale[:, t] = c
            alpha[:, t] /= c[:, None]
    # an underflowed scale poisons every later step, so one check at the end suffices
    if not np.all(scale > 1e-280) or not np.all(np.isfinite(scale)):
        with np.errstate(divide="ignore"):
            return _forward_backward_log(np.log(pi), np.log(a), log_b)
    beta = np.empty_like(b)
    beta[:, T - 1] = 1.0
    for t in range(T - 2, -1, -1):
        beta[:, t] = ((b[:, t + 1] * beta[:, t + 1]) @ a.T) / scale[:, t + 1, None]
    gamma = alpha * beta
    gamma /= gamma.sum(axis=2, keepdims=True)
    if T > 1:
        nxt = b[:, 1:] * beta[:, 1:] / scale[:, 1:, None]  # (N, T-1, K)
        xi = a * (alpha[:, :-1].reshape(-1, K).T @ nxt.reshape(-1, K))
    else:
        xi = np.zeros((K, K))
    ll = np.log(scale).sum(axis=1) + shift[..., 0].sum(axis=1)
    return gamma, xi, ll


def _groups(demos: list[np.ndarray]) -> list[np.ndarray]:
    by_len = defaultdict(list)
    for d in demos:
        by_len[d.shape[0]].append(d)
    return [np.stack(by_len[T]) for T in sorted(by_len)]


def _penalty(comps, reg: float) -> float:
    total = 0.0
    for g in comps:
        inv_l = numkit.solve_triangular(g.chol, np.eye(g.dim))
        total += float(np.sum(inv_l * inv_l))
    return 0.5 * reg * total


def em_objective(model: HsmmModel, demos) -> float:
    """Penalized log-likelihood that each EM iteration does not decrease."""
    demos = _as_demos(demos, model.dim)
    ll = 0.0
    for x in _groups(demos):
        _, _, l = _forward_backward(model.pi, model.trans, _log_emissions(model.components, x))
        ll += float(l.sum())
    return ll - _penalty(model.components, model.reg)


def fit_em(
    model: HsmmModel,
    demos,
    max_iters: int = 100,
    tol: float = 1e-5,
    history: list | None = None,
    refit_durations: bool = True,
    dmax_factor: float = 2.0,
) -> HsmmModel:
    """Baum-Welch on a copy of ``model``; returns the fitted model.

    Stops when the objective gains less than ``tol`` per observation. The
    objective before every M-step is appended to ``history`` when given.
    """
    demos = _as_demos(demos, model.dim)
    groups = _groups(demos)
    n_obs = sum(d.shape[0] for d in demos)
    pi = model.pi.copy()
    trans = model.trans.copy()
    comps = list(model.components)
    reg = model.reg
    K = model.K
    prev = -np.inf
    for _ in range(max_iters):
        ll = 0.0
        g0 = np.zeros(K)
        xi = np.zeros((K, K))
        mass = np.zeros(K)
        s1 = np.zeros((K, model.dim))
        s2 = np.zeros((K, model.dim, model.dim))
        for x in groups:
            gamma, xi_g, ll_g = _forward_backward(pi, trans, _log_emissions(comps, x))
            ll += float(ll_g.sum())
            g0 += gamma[:, 0].sum(axis=0)
            xi += xi_g
            flat_g = gamma.reshape(-1, K)
            flat_x = x.reshape(-1, model.dim)
            mass += flat_g.sum(axis=0)
            s1 += flat_g.T @ flat_x
            for k in range(K):
                s2[k] += (flat_x * flat_g[:, k, None]).T @ flat_x
        objective = ll - _penalty(comps, reg)
        if history is not None:
            history.append(objective)
        if np.isfinite(prev) and objective - prev < tol * n_obs:
            break
        prev = objective

        pi = g0 / g0.sum()
        rows = xi.sum(axis=1)
        new_trans = trans.copy()
        ok = rows > 0
        new_trans[ok] = xi[ok] / rows[ok, None]
        trans = new_trans
        new_comps = []
        reseeded = False
        for k in range(K):
            if mass[k] < MIN_MASS:
                warnings.warn(
                    f"component {k} has responsibility mass {mass[k]:.2e}; re-seeding",
                    DegenerateComponentWarning,
                    stacklevel=2,
                )
                new_comps.append(_reseed(demos, K, reg))
                reseeded = True
                continue
            mu = s1[k] / mass[k]
            scatter = s2[k] - mass[k] * np.outer(mu, mu)
            cov = (scatter + reg * np.eye(model.dim)) / mass[k]
            new_comps.append(MultivariateGaussian(mu, numkit.safe_cholesky(0.5 * (cov + cov.T), reg)))
        comps = new_comps
        if reseeded:
            prev = -np.inf

    fitted = HsmmModel(
        pi=pi,
        trans=trans,
        components=comps,
        dur_mean=model.dur_mean.copy(),
        dur_std=model.dur_std.copy(),
        d_max=model.d_max,
        split=model.split,
        dur_floor=model.dur_floor,
        reg=reg,
    )
    if refit_durations:
        fitted = estimate_durations(fitted, demos, dmax_factor)
    return fitted


def _reseed(demos, K: int, reg: float) -> MultivariateGaussian:
    slices = temporal_slices(demos, K)
    widest = max(slices, key=lambda s: float(np.trace(np.atleast_2d(np.cov(s.T, bias=True)))))
    return _fit_gaussian(widest, reg)


def viterbi(model: HsmmModel, x) -> np.ndarray:
    """Most likely step-level state path under ``(pi, trans)``."""
    x = np.asarray(x, dtype=float)
    log_b = _log_emissions(model.components, x[None])[0]
    log_a = _log(model.trans)
    T, K = log_b.shape
    delta = _log(model.pi) + log_b[0]
    back = np.zeros((T, K), dtype=int)
    for t in range(1, T):
        scores = delta[:, None] + log_a
        back[t] = np.argmax(scores, axis=0)
        delta = scores[back[t], np.arange(K)] + log_b[t]
    path = np.empty(T, dtype=int)
    path[-1] = int(np.argmax(delta))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def dwell_times(path) -> list[tuple[int, int]]:
    """Run-length encode a state path into ``(state, length)`` pairs."""
    runs = []
    start = 0
    for t in range(1, len(path) + 1):
        if t == len(path) or path[t] != path[start]:
            runs.append((int(path[start]), t - start))
            start = t
    return runs


def estimate_durations(model: HsmmModel, demos, dmax_factor: float = 2.0) -> HsmmModel:
    """Refit per-state dwell mean/std from Viterbi segmentations; unvisited states keep theirs."""
    per_state: dict[int, list[int]] = defaultdict(list)
    for x in _as_demos(demos, model.dim):
        for state, length in dwell_times(viterbi(model, x)):
            per_state[state].append(length)
    mean = model.dur_mean.copy()
    std = model.dur_std.copy()
    longest = 1
    for k, lengths in per_state.items():
        arr = np.asarray(lengths, dtype=float)
        mean[k] = arr.mean()
        std[k] = max(arr.std(), model.dur_floor)
        longest = max(longest, int(arr.max()))
    return HsmmModel(
        pi=model.pi,
        trans=model.trans,
        components=model.components,
        dur_mean=mean,
        dur_std=std,
        d_max=max(1, int(np.ceil(dmax_factor * longest))),
        split=model.split,
        dur_floor=model.dur_floor,
        reg=model.reg,
    )


def fit_hsmm(
    demos,
    K: int,
    split: BlockSplit | None = None,
    max_iters: int = 100,
    tol: float = 1e-5,
    dur_floor: float = DURATION_STD_FLOOR,
    dmax_factor: float = 2.0,
    history: list | None = None,
) -> HsmmModel:
    """Temporal-split init followed by :func:`fit_em`."""
    init = init_temporal_split(demos, K, split, dur_floor, dmax_factor)
    return fit_em(init, demos, max_iters, tol, history, dmax_factor=dmax_factor)
