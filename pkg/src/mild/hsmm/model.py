from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mild.errors import DimensionMismatch
from mild.gauss import BlockSplit, Conditioner, MultivariateGaussian, conditioner
from mild.numkit import logsumexp

DURATION_STD_FLOOR = 0.5


def duration_log_pmf(mean, std, d_max: int, floor: float = DURATION_STD_FLOOR) -> np.ndarray:
    """Log of a Gaussian pmf over ``1..d_max`` renormalized on that support; shape ``(K, d_max)``."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    std = np.maximum(np.atleast_1d(np.asarray(std, dtype=float)), floor)
    d = np.arange(1, d_max + 1, dtype=float)
    logp = -0.5 * ((d[None, :] - mean[:, None]) / std[:, None]) ** 2
    return logp - logsumexp(logp, axis=1, keepdims=True)


@dataclass(eq=False)
class HsmmModel:
    """Explicit-duration HMM over the joint two-agent latent space.

    ``trans`` is the step-level transition matrix estimated by Baum-Welch (it
    keeps self-transitions). The semi-Markov recursion uses
    :meth:`segment_trans`, which removes them and renormalizes.
    """

    pi: np.ndarray
    trans: np.ndarray
    components: list[MultivariateGaussian]
    dur_mean: np.ndarray
    dur_std: np.ndarray
    d_max: int
    split: BlockSplit
    dur_floor: float = DURATION_STD_FLOOR
    reg: float = 1e-8
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.trans = np.asarray(self.trans, dtype=float)
        self.dur_mean = np.asarray(self.dur_mean, dtype=float)
        self.dur_std = np.maximum(np.asarray(self.dur_std, dtype=float), self.dur_floor)
        self.d_max = int(self.d_max)
        self.components = list(self.components)
        K = len(self.components)
        if self.pi.shape != (K,) or self.trans.shape != (K, K):
            raise DimensionMismatch(f"pi {self.pi.shape} / trans {self.trans.shape} inconsistent with K={K}")
        if self.dur_mean.shape != (K,) or self.dur_std.shape != (K,):
            raise DimensionMismatch("duration statistics must have one entry per state")
        if self.d_max < 1:
            raise ValueError("d_max must be >= 1")
        for g in self.components:
            if g.dim != self.split.dim:
                raise DimensionMismatch(f"component dimension {g.dim} != split dimension {self.split.dim}")
        self.split.check(self.dim)

    @property
    def K(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def means(self) -> np.ndarray:
        return np.stack([g.mean for g in self.components])

    def duration_log_pmf(self) -> np.ndarray:
        if "dur" not in self._cache:
            self._cache["dur"] = duration_log_pmf(self.dur_mean, self.dur_std, self.d_max, self.dur_floor)
        return self._cache["dur"]

    def segment_trans(self) -> np.ndarray:
        if "seg" not in self._cache:
            self._cache["seg"] = segment_transitions(self.trans)
        return self._cache["seg"]

    def agent_marginals(self, agent: int) -> list[MultivariateGaussian]:
        """Per-component marginals over agent ``agent`` (1 or 2)."""
        key = ("marg", agent)
        if key not in self._cache:
            dims = self.split.first_dims if agent == 1 else self.split.second_dims
            self._cache[key] = [g.marginal(dims) for g in self.components]
        return self._cache[key]

    def conditioners(self) -> list[Conditioner]:
        if "cond" not in self._cache:
            self._cache["cond"] = [conditioner(g, self.split) for g in self.components]
        return self._cache["cond"]

    def summary(self) -> dict:
        return {
            "K": self.K,
            "dim": self.dim,
            "d_max": self.d_max,
            "pi_argmax": int(np.argmax(self.pi)),
            "duration_mean": [round(float(v), 4) for v in self.dur_mean],
            "duration_std": [round(float(v), 4) for v in self.dur_std],
        }


def segment_transitions(trans) -> np.ndarray:
    """Drop self-transitions and renormalize; states with nowhere else to go stay put."""
    a = np.array(trans, dtype=float)
    np.fill_diagonal(a, 0.0)
    rows = a.sum(axis=1)
    for i in np.flatnonzero(rows <= 1e-12):
        a[i] = 0.0
        a[i, i] = 1.0
        rows[i] = 1.0
    return a / rows[:, None]
