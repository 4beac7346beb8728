"""Filtered state weights for the HMM and explicit-duration recursions.

The semi-Markov filter keeps, for every state, a buffer over elapsed dwell
time ``l = 1..d_max``. Summing the buffer over ``l`` gives the probability of
occupying the state at ``t`` given the observations so far; normalizing those
occupancies gives ``h``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mild.errors import DimensionMismatch, EmptySequence
from mild.hsmm.model import HsmmModel
from mild.numkit import logsumexp

MODES = ("hmm", "hsmm")
EMISSIONS = ("full", "marginal", "dropped")


def _log(a) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(a)


@dataclass
class ForwardResult:
    h: np.ndarray  # (T, K)
    loglik: float


class ForwardFilter:
    """Online forward recursion; call :meth:`step` once per observation."""

    def __init__(self, model: HsmmModel, mode: str = "hsmm", emissions: str = "full"):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if emissions not in EMISSIONS:
            raise ValueError(f"emissions must be one of {EMISSIONS}, got {emissions!r}")
        self.model = model
        self.mode = mode
        self.emissions = emissions
        self.t = 0
        self.loglik = 0.0
        self._log_pi = _log(model.pi)
        if emissions == "full":
            self._dists = model.components
        elif emissions == "marginal":
            self._dists = model.agent_marginals(1)
        else:
            self._dists = None
        if mode == "hmm":
            self._log_trans = _log(model.trans)
            self._alpha = None
        else:
            self._log_trans = _log(model.segment_trans())
            logp = model.duration_log_pmf()
            # log survival S(l) = P(duration >= l)
            rev = np.logaddexp.accumulate(logp[:, ::-1], axis=1)[:, ::-1]
            self._log_hazard = logp - rev
            stay = np.full_like(logp, -np.inf)
            stay[:, :-1] = rev[:, 1:] - rev[:, :-1]
            self._log_stay = stay
            self._buf = None

    @property
    def obs_dim(self) -> int | None:
        return None if self._dists is None else self._dists[0].dim

    def log_emission(self, obs) -> np.ndarray:
        if self._dists is None:
            return np.zeros(self.model.K)
        obs = np.asarray(obs, dtype=float).reshape(-1)
        if obs.size != self.obs_dim:
            raise DimensionMismatch(f"observation has {obs.size} dims, emissions expect {self.obs_dim}")
        return np.array([g.logpdf(obs) for g in self._dists])

    def step(self, obs=None) -> np.ndarray:
        e = self.log_emission(obs)
        if self.mode == "hmm":
            if self._alpha is None:
                a = self._log_pi + e
            else:
                a = logsumexp(self._alpha[:, None] + self._log_trans, axis=0) + e
            c = logsumexp(a)
            self._alpha = a - c
            occ = self._alpha
        else:
            if self._buf is None:
                buf = np.full((self.model.K, self.model.d_max), -np.inf)
                buf[:, 0] = self._log_pi
            else:
                ended = logsumexp(self._buf + self._log_hazard, axis=1)
                buf = np.empty_like(self._buf)
                buf[:, 0] = logsumexp(ended[:, None] + self._log_trans, axis=0)
                buf[:, 1:] = self._buf[:, :-1] + self._log_stay[:, :-1]
            buf += e[:, None]
            c = logsumexp(buf)
            self._buf = buf - c
            occ = logsumexp(self._buf, axis=1)
        self.loglik += float(c)
        self.t += 1
        h = np.exp(occ - logsumexp(occ))
        return h / h.sum()


def forward_variable(
    model: HsmmModel,
    observations=None,
    mode: str = "hsmm",
    emissions: str = "full",
    n_steps: int | None = None,
) -> ForwardResult:
    """Run the forward recursion over a sequence.

    With ``emissions="dropped"`` the observations are ignored and ``n_steps``
    gives the horizon.
    """
    f = ForwardFilter(model, mode, emissions)
    if emissions == "dropped":
        T = n_steps if n_steps is not None else (0 if observations is None else len(observations))
        seq = [None] * T
    else:
        if observations is None:
            raise EmptySequence("observations required unless emissions are dropped")
        seq = np.asarray(observations, dtype=float)
        if seq.ndim != 2:
            raise DimensionMismatch(f"observations must be (T, d), got {seq.shape}")
        T = seq.shape[0]
    if T == 0:
        raise EmptySequence("forward recursion over an empty sequence")
    h = np.empty((T, model.K))
    for t in range(T):
        h[t] = f.step(seq[t])
    return ForwardResult(h, f.loglik)


def prior_schedule(model: HsmmModel, n_steps: int) -> np.ndarray:
    """Most likely component at each step with emissions dropped (ties go to the lowest index)."""
    h = forward_variable(model, None, mode="hsmm", emissions="dropped", n_steps=n_steps).h
    return np.argmax(h, axis=1)


def prior_component(model: HsmmModel, t: int):
    """Component index and per-agent marginal priors at step ``t`` (0-based)."""
    if t < 0:
        raise ValueError("t must be non-negative")
    i = int(prior_schedule(model, t + 1)[t])
    return i, (model.agent_marginals(1)[i], model.agent_marginals(2)[i])
