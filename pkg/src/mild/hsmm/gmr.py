from __future__ import annotations

import numpy as np

from mild.errors import DimensionMismatch, EmptySequence
from mild.hsmm.forward import ForwardFilter
from mild.hsmm.model import HsmmModel

WEIGHT_FLOOR = 1e-8


def clamp_weights(h: np.ndarray, floor: float = WEIGHT_FLOOR) -> np.ndarray:
    h = np.where(h < floor, 0.0, h)
    return h / h.sum()


class GmrStream:
    """Causal GMR: feed agent-1 latents one step at a time, get agent-2 moments back.

    Weights come from the semi-Markov filter with agent-1 marginal emissions.
    The output covariance is moment-matched over the weighted conditionals.
    """

    def __init__(self, model: HsmmModel, mode: str = "hsmm"):
        self.model = model
        self.filter = ForwardFilter(model, mode=mode, emissions="marginal")
        self.conds = model.conditioners()
        self.d1 = len(model.split.first_dims)

    def step(self, z1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        z1 = np.asarray(z1, dtype=float).reshape(-1)
        if z1.size != self.d1:
            raise DimensionMismatch(f"agent-1 latent has {z1.size} dims, model expects {self.d1}")
        h = clamp_weights(self.filter.step(z1))
        means = np.stack([c.offset + c.gain @ z1 for c in self.conds])
        mean = h @ means
        second = sum(hk * (c.cov + np.outer(m, m)) for hk, c, m in zip(h, self.conds, means))
        cov = second - np.outer(mean, mean)
        return mean, 0.5 * (cov + cov.T), h


def gmr_condition(model: HsmmModel, z1, mode: str = "hsmm"):
    """Agent-2 latent means ``(T, d2)``, covariances ``(T, d2, d2)`` and weights ``(T, K)``."""
    z1 = np.asarray(z1, dtype=float)
    if z1.ndim != 2:
        raise DimensionMismatch(f"agent-1 sequence must be (T, d1), got {z1.shape}")
    if z1.shape[0] == 0:
        raise EmptySequence("empty agent-1 sequence")
    stream = GmrStream(model, mode)
    out = [stream.step(z) for z in z1]
    return (
        np.stack([o[0] for o in out]),
        np.stack([o[1] for o in out]),
        np.stack([o[2] for o in out]),
    )
