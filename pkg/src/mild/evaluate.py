"""Per-timestep prediction error of the controlled agent.

CSV schemas (header row always present, one value per column):

``curve``   ``class,t,mse,n_demos,units``
    per-coordinate MSE at step ``t`` averaged over the demos that reach ``t``.
``summary`` ``class,aggregation,mean,std,n_demos,n_timesteps,units``
    ``aggregation`` is ``per_coordinate``, ``per_joint`` or ``windowed``;
    mean and std run over every (demo, timestep) pair of the class.

``units`` is the squared input unit, e.g. ``raw^2`` or ``cm^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from mild.dataio import RawDemo, first_frames, window_stack
from mild.errors import ClassMismatch, DimensionMismatch, IoFailure
from mild.pipeline import TrainedModel, condition

AGGREGATIONS = ("per_coordinate", "per_joint", "windowed")


@dataclass
class ClassEval:
    label: str
    n_demos: int
    stats: dict[str, tuple[float, float]]  # aggregation -> (mean, std)
    n_timesteps: int
    curve: np.ndarray  # (T_max,)
    curve_counts: np.ndarray  # (T_max,)


@dataclass
class EvalReport:
    classes: dict[str, ClassEval] = field(default_factory=dict)
    units: str = "raw"

    def mean(self, label: str, aggregation: str = "per_coordinate") -> float:
        return self.classes[label].stats[aggregation][0]

    def std(self, label: str, aggregation: str = "per_coordinate") -> float:
        return self.classes[label].stats[aggregation][1]

    def curve_csv(self) -> str:
        lines = ["class,t,mse,n_demos,units"]
        for label in sorted(self.classes):
            c = self.classes[label]
            for t, (v, n) in enumerate(zip(c.curve, c.curve_counts)):
                lines.append(f"{label},{t},{float(v)!r},{int(n)},{self.units}^2")
        return "\n".join(lines) + "\n"

    def summary_csv(self) -> str:
        lines = ["class,aggregation,mean,std,n_demos,n_timesteps,units"]
        for label in sorted(self.classes):
            c = self.classes[label]
            for agg in AGGREGATIONS:
                m, s = c.stats[agg]
                lines.append(f"{label},{agg},{m!r},{s!r},{c.n_demos},{c.n_timesteps},{self.units}^2")
        return "\n".join(lines) + "\n"

    def write(self, curve_path, summary_path) -> None:
        try:
            Path(curve_path).write_text(self.curve_csv(), encoding="utf-8")
            Path(summary_path).write_text(self.summary_csv(), encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot write evaluation report: {exc}") from exc


def timestep_errors(pred_windows, truth_windows, d2: int, joint_size: int | None = None) -> dict[str, np.ndarray]:
    """Per-timestep squared errors between predicted and true agent-2 windows.

    Frame-level errors use the first frame of each window. ``per_joint`` sums
    each group of ``joint_size`` coordinates before averaging over joints
    (``joint_size=None`` treats every coordinate as its own joint).
    """
    p = np.atleast_2d(np.asarray(pred_windows, dtype=float))
    t = np.atleast_2d(np.asarray(truth_windows, dtype=float))
    if p.shape != t.shape:
        raise DimensionMismatch(f"prediction {p.shape} and truth {t.shape} differ")
    sq = (first_frames(p, d2) - first_frames(t, d2)) ** 2
    js = joint_size or 1
    if d2 % js:
        raise DimensionMismatch(f"joint size {js} does not divide frame dimension {d2}")
    return {
        "per_coordinate": sq.mean(axis=1),
        "per_joint": sq.reshape(sq.shape[0], d2 // js, js).sum(axis=2).mean(axis=1),
        "windowed": ((p - t) ** 2).mean(axis=1),
    }


def evaluate_predictions(
    items: Iterable[tuple[str, np.ndarray, np.ndarray]],
    d2: int,
    known_classes: Sequence[str] | None = None,
    joint_size: int | None = None,
    units: str = "raw",
) -> EvalReport:
    """Build a report from ``(class, predicted windows, true windows)`` triples."""
    per_class: dict[str, list[dict[str, np.ndarray]]] = {}
    for label, pred, truth in items:
        if known_classes is not None and label not in known_classes:
            raise ClassMismatch(f"test class {label!r} is unknown to the model (known: {', '.join(sorted(known_classes))})")
        per_class.setdefault(label, []).append(timestep_errors(pred, truth, d2, joint_size))
    report = EvalReport(units=units)
    for label in sorted(per_class):
        errs = per_class[label]
        stats = {}
        for agg in AGGREGATIONS:
            flat = np.concatenate([e[agg] for e in errs])
            stats[agg] = (float(flat.mean()), float(flat.std()))
        t_max = max(e["per_coordinate"].size for e in errs)
        total = np.zeros(t_max)
        counts = np.zeros(t_max, dtype=int)
        for e in errs:
            n = e["per_coordinate"].size
            total[:n] += e["per_coordinate"]
            counts[:n] += 1
        report.classes[label] = ClassEval(
            label,
            len(errs),
            stats,
            int(sum(e["per_coordinate"].size for e in errs)),
            total / counts,
            counts,
        )
    return report


def evaluate(
    model: TrainedModel,
    demos: Sequence[RawDemo],
    joint_size: int | None = None,
    units: str = "raw",
) -> EvalReport:
    """Condition each test demo on its agent-1 trajectory and score the agent-2 prediction."""
    known = model.classes
    for d in demos:
        if d.class_label not in known:
            raise ClassMismatch(f"test class {d.class_label!r} is unknown to the model (known: {', '.join(known)})")
    w = model.config.window
    d2 = model.frame_dims[1]

    def items():
        for d in demos:
            wd = window_stack(d, w)
            yield d.class_label, condition(model, d.class_label, wd.agent1), wd.agent2

    return evaluate_predictions(items(), d2, known, joint_size, units)
