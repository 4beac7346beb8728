"""Dataset schema, text format, preprocessing and the synthetic interaction generator.

Text format (UTF-8, whitespace separated, ``#`` starts a comment)::

    demo <class> <T> <d1> <d2> <frame_rate>
    <d1 agent-1 values> <d2 agent-2 values>     # repeated T times
    demo ...

Class labels may not contain whitespace. Values are written with ``repr``
so a write/load round trip is exact.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from mild.errors import DimensionMismatch, EmptyDataset, IoFailure, ParseError, WindowTooLong
from mild.numkit import make_rng


@dataclass
class RawDemo:
    class_label: str
    agent1: np.ndarray  # (T, d1)
    agent2: np.ndarray  # (T, d2)
    frame_rate: float = 40.0

    def __post_init__(self):
        self.agent1 = np.atleast_2d(np.asarray(self.agent1, dtype=float))
        self.agent2 = np.atleast_2d(np.asarray(self.agent2, dtype=float))
        if self.agent1.shape[0] != self.agent2.shape[0]:
            raise DimensionMismatch(
                f"agents have {self.agent1.shape[0]} and {self.agent2.shape[0]} frames; align them first"
            )
        if not (np.all(np.isfinite(self.agent1)) and np.all(np.isfinite(self.agent2))):
            raise ValueError("demo contains non-finite values")
        if any(c.isspace() for c in self.class_label) or not self.class_label:
            raise ValueError(f"invalid class label {self.class_label!r}")

    @property
    def T(self) -> int:
        return self.agent1.shape[0]


@dataclass
class WindowedDemo:
    class_label: str
    agent1: np.ndarray  # (T - w + 1, w * d1)
    agent2: np.ndarray  # (T - w + 1, w * d2)
    window: int
    d1: int
    d2: int

    @property
    def n_windows(self) -> int:
        return self.agent1.shape[0]


def class_histogram(demos: Iterable) -> dict[str, int]:
    return dict(sorted(Counter(d.class_label for d in demos).items()))


def write_dataset(path, demos: Sequence[RawDemo]) -> None:
    lines = []
    for d in demos:
        lines.append(f"demo {d.class_label} {d.T} {d.agent1.shape[1]} {d.agent2.shape[1]} {d.frame_rate!r}")
        for row in np.hstack([d.agent1, d.agent2]):
            lines.append(" ".join(repr(float(v)) for v in row))
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _records(text: str):
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if body:
            yield lineno, body.split()


def parse_dataset(text: str) -> list[RawDemo]:
    demos = []
    it = _records(text)
    record = 0
    for lineno, tokens in it:
        if tokens[0] != "demo" or len(tokens) != 6:
            raise ParseError("expected 'demo <class> <T> <d1> <d2> <frame_rate>'", line=lineno, record=record)
        label = tokens[1]
        try:
            T, d1, d2 = (int(v) for v in tokens[2:5])
            rate = float(tokens[5])
        except ValueError:
            raise ParseError("malformed demo header", line=lineno, record=record) from None
        if T < 1 or d1 < 1 or d2 < 1:
            raise ParseError("T, d1 and d2 must be positive", line=lineno, record=record)
        rows = np.empty((T, d1 + d2))
        for t in range(T):
            try:
                row_line, row = next(it)
            except StopIteration:
                raise ParseError(f"demo {label!r} ends after {t} of {T} frames", line=lineno, record=record) from None
            if len(row) != d1 + d2:
                raise ParseError(f"expected {d1 + d2} values, got {len(row)}", line=row_line, record=record)
            try:
                rows[t] = [float(v) for v in row]
            except ValueError:
                raise ParseError("non-numeric value", line=row_line, record=record) from None
            if not np.all(np.isfinite(rows[t])):
                raise ParseError(f"non-finite value in demo {label!r}", line=row_line, record=record)
        demos.append(RawDemo(label, rows[:, :d1], rows[:, d1:], rate))
        record += 1
    return demos


def load_dataset(path, reference_columns: Sequence[int] | None = None) -> list[RawDemo]:
    """Read a dataset file; optionally subtract reference columns (e.g. a shoulder joint) from both agents."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    demos = parse_dataset(text)
    if not demos:
        raise EmptyDataset(f"no demos in {path}")
    if reference_columns:
        demos = [
            RawDemo(
                d.class_label,
                subtract_reference(d.agent1, reference_columns),
                subtract_reference(d.agent2, reference_columns),
                d.frame_rate,
            )
            for d in demos
        ]
    return demos


def subtract_reference(x, reference_columns: Sequence[int]) -> np.ndarray:
    """Express every coordinate group relative to the group at ``reference_columns``.

    With ``reference_columns=(0, 1, 2)`` a ``(T, 12)`` array of four 3-D
    joints becomes offsets from joint 0.
    """
    x = np.asarray(x, dtype=float)
    ref = np.asarray(reference_columns, dtype=int)
    if x.shape[1] % ref.size:
        return x.copy()
    groups = x.shape[1] // ref.size
    return x - np.tile(x[:, ref], groups)


def window_stack(demo: RawDemo, w: int) -> WindowedDemo:
    """Stride-1 windows; row ``t`` flattens frames ``t..t+w-1`` in time-major order."""
    if w < 1:
        raise ValueError("window must be >= 1")
    if w > demo.T:
        raise WindowTooLong(f"window {w} exceeds demo length {demo.T}")
    return WindowedDemo(
        demo.class_label,
        stack_windows(demo.agent1, w),
        stack_windows(demo.agent2, w),
        w,
        demo.agent1.shape[1],
        demo.agent2.shape[1],
    )


def stack_windows(x, w: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if w > x.shape[0]:
        raise WindowTooLong(f"window {w} exceeds sequence length {x.shape[0]}")
    n = x.shape[0] - w + 1
    return np.stack([x[t : t + w].reshape(-1) for t in range(n)])


def first_frames(windows, d: int) -> np.ndarray:
    return np.asarray(windows)[:, :d]


def unstack_windows(windows, d: int) -> np.ndarray:
    """Invert :func:`stack_windows`: first frame of each window plus the tail of the last."""
    windows = np.asarray(windows)
    w = windows.shape[1] // d
    return np.vstack([windows[:, :d], windows[-1].reshape(w, d)[1:]])


def align_and_downsample(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Linearly resample the longer sequence onto the shorter one's length."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("sequences must be nonempty")
    if len(a) == len(b):
        return a, b
    if len(a) > len(b):
        return _resample(a, len(b)), b
    return a, _resample(b, len(a))


def _resample(x: np.ndarray, n: int) -> np.ndarray:
    src = np.arange(len(x), dtype=float)
    at = np.linspace(0.0, len(x) - 1.0, n)
    if x.ndim == 1:
        return np.interp(at, src, x)
    return np.column_stack([np.interp(at, src, x[:, j]) for j in range(x.shape[1])])


def moving_average(x, window: int) -> np.ndarray:
    """Centered moving average; the window shrinks near the ends so length is preserved."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    x = np.asarray(x, dtype=float)
    half = window // 2
    out = np.empty_like(x)
    for t in range(len(x)):
        lo, hi = max(0, t - half), min(len(x), t + half + 1)
        out[t] = x[lo:hi].mean(axis=0)
    return out


@dataclass
class SynthConfig:
    classes: int = 2
    modes: int = 3
    T: int = 120
    demos: int = 20
    sigma: float = 0.01
    seed: int = 1
    dim: int = 2
    frame_rate: float = 40.0

    @classmethod
    def from_file(cls, path) -> "SynthConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParseError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ModeParams:
    center: np.ndarray  # agent-1 oscillation center (dim,)
    radius: float
    freq: float  # rad / step
    coupling: np.ndarray  # agent2 = coupling @ agent1 + offset
    offset: np.ndarray


@dataclass
class SynthTruth:
    """Generator parameters, for checking learned models against what was planted."""

    config: SynthConfig
    mode_params: dict[str, list[ModeParams]]
    boundaries: list[int]  # first frame of every mode after the first
    demo_phase: list[float] = field(default_factory=list)
    demo_scale: list[float] = field(default_factory=list)

    def mode_at(self, t: int) -> int:
        return int(np.searchsorted(self.boundaries, t, side="right"))

    def couple(self, label: str, t: int, x1) -> np.ndarray:
        p = self.mode_params[label][self.mode_at(t)]
        return p.coupling @ np.asarray(x1) + p.offset


def class_name(c: int) -> str:
    return f"class{c}"


def synth_interactions(config: SynthConfig | None = None, **overrides) -> tuple[list[RawDemo], SynthTruth]:
    """Two-agent demos with a known phase-dependent coupling.

    Each class runs through ``modes`` phases of equal length. In phase ``m``
    agent 1 circles ``center_m`` at ``freq_m`` with a per-demo radius scale
    and phase offset; agent 2 is ``coupling_m @ agent1 + offset_m``, a
    rotation-and-scale of agent 1's noise-free position. Independent
    ``N(0, sigma^2)`` noise is then added to both agents.
    """
    cfg = config or SynthConfig()
    if overrides:
        cfg = SynthConfig(**{**cfg.__dict__, **overrides})
    if min(cfg.classes, cfg.modes, cfg.T, cfg.demos, cfg.dim) < 1:
        raise ValueError("all synth counts must be >= 1")
    rng = make_rng(cfg.seed)
    boundaries = [m * cfg.T // cfg.modes for m in range(1, cfg.modes)]
    params: dict[str, list[ModeParams]] = {}
    for c in range(cfg.classes):
        modes = []
        for _ in range(cfg.modes):
            angle = rng.uniform(-np.pi, np.pi)
            rot = _rotation(cfg.dim, angle)
            modes.append(
                ModeParams(
                    center=rng.uniform(-1.0, 1.0, cfg.dim),
                    radius=float(rng.uniform(0.3, 0.6)),
                    freq=float(rng.uniform(0.1, 0.3)),
                    coupling=rot * rng.uniform(0.6, 1.2),
                    offset=rng.uniform(-0.5, 0.5, cfg.dim),
                )
            )
        params[class_name(c)] = modes
    truth = SynthTruth(cfg, params, boundaries)
    demos = []
    starts = [0, *boundaries]
    for c in range(cfg.classes):
        label = class_name(c)
        for _ in range(cfg.demos):
            phase = float(rng.uniform(-0.3, 0.3))
            scale = float(rng.uniform(0.9, 1.1))
            truth.demo_phase.append(phase)
            truth.demo_scale.append(scale)
            x1 = np.empty((cfg.T, cfg.dim))
            x2 = np.empty((cfg.T, cfg.dim))
            for t in range(cfg.T):
                m = truth.mode_at(t)
                p = params[label][m]
                tau = t - starts[m]
                x1[t] = p.center + scale * p.radius * _circle(cfg.dim, p.freq * tau + phase)
                x2[t] = p.coupling @ x1[t] + p.offset
            # always drawn, so the clean trajectories do not depend on sigma
            n1 = rng.standard_normal(x1.shape)
            n2 = rng.standard_normal(x2.shape)
            if cfg.sigma > 0:
                x1 = x1 + cfg.sigma * n1
                x2 = x2 + cfg.sigma * n2
            demos.append(RawDemo(label, x1, x2, cfg.frame_rate))
    return demos, truth


def _circle(dim: int, angle: float) -> np.ndarray:
    v = np.zeros(dim)
    v[0] = np.cos(angle)
    if dim > 1:
        v[1] = np.sin(angle)
    return v


def _rotation(dim: int, angle: float) -> np.ndarray:
    r = np.eye(dim)
    if dim > 1:
        c, s = np.cos(angle), np.sin(angle)
        r[:2, :2] = [[c, -s], [s, c]]
    return r
