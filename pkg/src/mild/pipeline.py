"""Training (alternating VAE epochs and per-class HSMM refits) and conditioning."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from mild import numkit
from mild.dataio import WindowedDemo
from mild.errors import DimensionMismatch, EmptyClass, EmptyDataset, NonFiniteLoss, UnknownClass
from mild.gauss import BlockSplit, MultivariateGaussian
from mild.hsmm import HsmmModel, fit_em, fit_hsmm, prior_schedule
from mild.hsmm.fit import em_objective
from mild.hsmm.gmr import GmrStream
from mild.nnet import AdamW, retain_heap
from mild.vae import VaeAgent, VaePair, transfer_hidden

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    latent_dim: int = 5
    components: int = 10
    window: int = 40
    kl_scale: float = 1e-3
    n_samples: int = 10
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: tuple[int, ...] = (250, 150)
    epochs: int = 100
    seed: int = 0
    em_max_iters: int = 50
    em_tol: float = 1e-5
    duration_floor: float = 0.5
    dmax_factor: float = 2.0
    refit_with: str = "mean"  # or "sample"
    warm_start: bool = False
    share_weights: bool = False
    shuffle: bool = True
    early_stopping: bool = False
    val_fraction: float = 0.1
    patience: int = 20

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.refit_with not in ("mean", "sample"):
            raise ValueError("refit_with must be 'mean' or 'sample'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class TrainedModel:
    vae: VaePair
    hsmms: dict[str, HsmmModel]
    config: TrainConfig
    frame_dims: tuple[int, int]  # per-frame dims (d1, d2) before windowing

    def __post_init__(self):
        for label, h in self.hsmms.items():
            if h.dim != 2 * self.vae.latent_dim:
                raise DimensionMismatch(f"HSMM {label!r} has dimension {h.dim}, expected {2 * self.vae.latent_dim}")

    @property
    def classes(self) -> list[str]:
        return sorted(self.hsmms)

    def hsmm(self, label: str) -> HsmmModel:
        if label not in self.hsmms:
            raise UnknownClass(label, self.hsmms)
        return self.hsmms[label]


@dataclass
class EpochRecord:
    epoch: int
    class_label: str
    recon1: float
    kl1: float
    recon2: float
    kl2: float
    hsmm_loglik: float
    val_loss: float | None
    wall_clock: float

    def deterministic(self) -> tuple:
        """Everything but wall-clock time."""
        return (self.epoch, self.class_label, self.recon1, self.kl1, self.recon2, self.kl2, self.hsmm_loglik, self.val_loss)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def recon(self, epoch: int) -> float:
        rows = [r for r in self.records if r.epoch == epoch]
        return float(np.mean([(r.recon1 + r.recon2) / 2 for r in rows]))

    def to_csv(self, path) -> None:
        header = "epoch,class,recon1,kl1,recon2,kl2,hsmm_loglik,val_loss,wall_clock_s"
        lines = [header]
        for r in self.records:
            val = "" if r.val_loss is None else repr(r.val_loss)
            lines.append(
                f"{r.epoch},{r.class_label},{r.recon1!r},{r.kl1!r},{r.recon2!r},{r.kl2!r},"
                f"{r.hsmm_loglik!r},{val},{r.wall_clock:.3f}"
            )
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def _split_validation(demos: list[WindowedDemo], fraction: float, rng) -> tuple[list, list]:
    by_class: dict[str, list[int]] = {}
    for i, d in enumerate(demos):
        by_class.setdefault(d.class_label, []).append(i)
    val = set()
    for label in sorted(by_class):
        idx = by_class[label]
        n_val = min(int(round(fraction * len(idx))), len(idx) - 1)
        if n_val > 0:
            val.update(int(i) for i in rng.choice(idx, size=n_val, replace=False))
    return [d for i, d in enumerate(demos) if i not in val], [d for i, d in enumerate(demos) if i in val]


def _priors(hsmm: HsmmModel | None, schedule: np.ndarray | None, agent: int, n: int, latent_dim: int, std):
    if hsmm is None:
        return [std] * n
    marg = hsmm.agent_marginals(agent)
    return [marg[i] for i in schedule[:n]]


def _encode_means(agent: VaeAgent, x) -> np.ndarray:
    return agent.encode_arrays(x)[0]


def _latent_demo(vae: VaePair, d: WindowedDemo, how: str, rng) -> np.ndarray:
    if how == "mean":
        return np.hstack([_encode_means(vae.agent1, d.agent1), _encode_means(vae.agent2, d.agent2)])
    parts = []
    for agent, x in ((vae.agent1, d.agent1), (vae.agent2, d.agent2)):
        mu, L = agent.encode_arrays(x)
        eps = rng.standard_normal(mu.shape)
        parts.append(mu + np.einsum("nij,nj->ni", L, eps))
    return np.hstack(parts)


def refit_hsmms(
    vae: VaePair,
    demos: Sequence[WindowedDemo],
    config: TrainConfig,
    previous: dict[str, HsmmModel] | None = None,
    rng=None,
) -> tuple[dict[str, HsmmModel], dict[str, float]]:
    """Encode every demo and fit one HSMM per class on the stacked ``[z1, z2]`` sequences."""
    rng = numkit.make_rng(rng)
    split = BlockSplit.halves(vae.latent_dim)
    by_class: dict[str, list[np.ndarray]] = {}
    for d in demos:
        by_class.setdefault(d.class_label, []).append(_latent_demo(vae, d, config.refit_with, rng))
    out, ll = {}, {}
    for label in sorted(by_class):
        Z = by_class[label]
        if config.warm_start and previous and label in previous:
            model = fit_em(previous[label], Z, config.em_max_iters, config.em_tol, dmax_factor=config.dmax_factor)
        else:
            model = fit_hsmm(
                Z,
                config.components,
                split,
                config.em_max_iters,
                config.em_tol,
                config.duration_floor,
                config.dmax_factor,
            )
        out[label] = model
        ll[label] = em_objective(model, Z)
    return out, ll


def build_vae(config: TrainConfig, input_dims: tuple[int, int], seeds=None) -> VaePair:
    if seeds is None:
        seeds = np.random.SeedSequence(config.seed).spawn(2)
    a1 = VaeAgent(input_dims[0], config.latent_dim, config.hidden, np.random.Generator(np.random.PCG64(seeds[0])))
    if config.share_weights and input_dims[0] == input_dims[1]:
        return VaePair(a1, a1)
    a2 = VaeAgent(input_dims[1], config.latent_dim, config.hidden, np.random.Generator(np.random.PCG64(seeds[1])))
    return VaePair(a1, a2)


def train(
    demos: Sequence[WindowedDemo],
    config: TrainConfig | None = None,
    pretrained: VaeAgent | None = None,
    callback: Callable[..., None] | None = None,
) -> tuple[TrainedModel, TrainLog]:
    """Alternate one VAE epoch (priors from the previous epoch's HSMMs) with per-class HSMM refits.

    ``pretrained`` copies shape-compatible layers from an existing agent into
    both agents before training. ``callback(event, **info)`` is invoked with
    events ``"step"`` (after every gradient step) and ``"refit"`` (after the
    HSMMs are replaced), for instrumentation. Calls
    :func:`mild.nnet.retain_heap` once, which changes glibc's allocator
    settings for the whole process.
    """
    config = config or TrainConfig()
    demos = list(demos)
    if not demos:
        raise EmptyDataset("no demonstrations to train on")
    for d in demos:
        if d.agent1.shape[0] != d.agent2.shape[0]:
            raise DimensionMismatch(f"demo of class {d.class_label!r} has unequal window counts")
        if d.n_windows < config.components:
            raise DimensionMismatch(f"demo of class {d.class_label!r} has fewer windows than components")
    first = demos[0]
    dims = (first.agent1.shape[1], first.agent2.shape[1])
    frame_dims = (first.d1, first.d2)
    if any((d.agent1.shape[1], d.agent2.shape[1]) != dims for d in demos):
        raise DimensionMismatch("all demos must share window dimensions")

    retain_heap()
    ss = np.random.SeedSequence(config.seed).spawn(4)
    vae = build_vae(config, dims, ss[:2])
    if pretrained is not None:
        transfer_hidden(pretrained, vae.agent1)
        if vae.agent2 is not vae.agent1:
            transfer_hidden(pretrained, vae.agent2)
    noise_rng = np.random.Generator(np.random.PCG64(ss[2]))
    order_rng = np.random.Generator(np.random.PCG64(ss[3]))

    if config.early_stopping:
        train_set, val_set = _split_validation(demos, config.val_fraction, order_rng)
    else:
        train_set, val_set = demos, []
    labels = sorted({d.class_label for d in demos})
    for label in labels:
        if not any(d.class_label == label for d in train_set):
            raise EmptyClass(f"class {label!r} has no training demos")

    hyper = dict(
        learning_rate=config.lr,
        weight_decay=config.weight_decay,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
    )
    agents = [vae.agent1] if vae.agent2 is vae.agent1 else [vae.agent1, vae.agent2]
    opts = [AdamW(a.parameters(), **hyper) for a in agents]
    std = MultivariateGaussian.standard(config.latent_dim)
    t_max = max(d.n_windows for d in demos)
    hsmms: dict[str, HsmmModel] = {}
    tlog = TrainLog()
    start = time.perf_counter()
    best = np.inf
    best_state = None
    stale = 0

    for epoch in range(config.epochs):
        schedules = {label: prior_schedule(h, t_max) for label, h in hsmms.items()}
        stats: dict[str, list] = {label: [] for label in labels}
        order = order_rng.permutation(len(train_set)) if config.shuffle else np.arange(len(train_set))
        for i in order:
            d = train_set[i]
            h = hsmms.get(d.class_label)
            row = []
            for s, x in ((1, d.agent1), (2, d.agent2)):
                agent = vae.agent(s)
                priors = _priors(h, schedules.get(d.class_label), s, x.shape[0], config.latent_dim, std)
                res = agent.elbo_loss(x, priors, config.n_samples, config.kl_scale, noise_rng)
                if not np.isfinite(res.loss):
                    raise NonFiniteLoss(epoch, f"non-finite loss at epoch {epoch} (class {d.class_label}, agent {s})")
                opts[0 if agent is vae.agent1 else 1].step(res.grads)
                row.extend((res.recon, res.kl))
                if callback:
                    callback("step", epoch=epoch, agent=s, hsmms=hsmms)
            stats[d.class_label].append(row)

        hsmms, lls = refit_hsmms(vae, train_set, config, hsmms, noise_rng)
        if callback:
            callback("refit", epoch=epoch, hsmms=hsmms, vae=vae)
        val_loss = _validation_loss(vae, val_set, hsmms, config, t_max, std) if val_set else None
        now = time.perf_counter() - start
        for label in labels:
            m = np.mean(stats[label], axis=0)
            tlog.append(EpochRecord(epoch, label, m[0], m[1], m[2], m[3], lls[label], val_loss, now))
        log.info("epoch %d recon %.6f", epoch, tlog.recon(epoch))

        if val_loss is not None:
            if val_loss < best:
                best, stale = val_loss, 0
                best_state = ([p.copy() for a in agents for p in a.parameters()], dict(hsmms))
            else:
                stale += 1
                if stale >= config.patience:
                    tlog.stopped_early = True
                    break

    if best_state is not None and tlog.stopped_early:
        params, hsmms = best_state
        for dst, src in zip([p for a in agents for p in a.parameters()], params):
            dst[...] = src
    return TrainedModel(vae, hsmms, config, frame_dims), tlog


def _validation_loss(vae, demos, hsmms, config, t_max, std) -> float:
    rng = np.random.Generator(np.random.PCG64(config.seed))
    schedules = {label: prior_schedule(h, t_max) for label, h in hsmms.items()}
    total = []
    for d in demos:
        h = hsmms.get(d.class_label)
        for s, x in ((1, d.agent1), (2, d.agent2)):
            priors = _priors(h, schedules.get(d.class_label), s, x.shape[0], config.latent_dim, std)
            total.append(vae.agent(s).elbo_loss(x, priors, config.n_samples, config.kl_scale, rng).loss)
    return float(np.mean(total))


class ConditionStream:
    """Observe agent-1 windows one at a time and emit agent-2 predictions immediately."""

    def __init__(self, model: TrainedModel, label: str):
        self.model = model
        self.gmr = GmrStream(model.hsmm(label))
        self.agent1 = model.vae.agent1
        self.agent2 = model.vae.agent2

    def step(self, x1_window) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns ``(predicted agent-2 window, latent mean, latent covariance)``."""
        x = np.asarray(x1_window, dtype=float).reshape(1, -1)
        if x.shape[1] != self.agent1.input_dim:
            raise DimensionMismatch(f"window has {x.shape[1]} dims, agent-1 VAE expects {self.agent1.input_dim}")
        z1 = self.agent1.encode_arrays(x)[0][0]
        z2, cov, _ = self.gmr.step(z1)
        return self.agent2.decode(z2[None])[0], z2, cov


def condition_detailed(model: TrainedModel, label: str, x1_windows):
    x = np.atleast_2d(np.asarray(x1_windows, dtype=float))
    stream = ConditionStream(model, label)
    out = [stream.step(row) for row in x]
    return np.stack([o[0] for o in out]), np.stack([o[1] for o in out]), np.stack([o[2] for o in out])


def condition(model: TrainedModel, label: str, x1_windows) -> np.ndarray:
    """Predicted agent-2 windows, one per observed agent-1 window (causal)."""
    return condition_detailed(model, label, x1_windows)[0]
