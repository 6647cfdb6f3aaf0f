"""Training loops for the teacher and the distilled student, plus evaluation."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import (
    OptimizerState,
    Parameter,
    adam_step,
    backward,
    finalize_grads,
    no_grad,
    parameter_hash,
    unique_parameters,
    zero_grads,
)
from .autodiff.tensor import Tensor
from .config import RunConfig
from .detector import HEAD_NAMES, Detector, NetConfig, decode_detections, decode_targets, stack_targets, supervised_loss
from .distill import DistillConfig, DistillModule, distillation_losses
from .metrics import average_precision, match_detections
from .scene import GridConfig, Scene, TargetMaps, encode_targets, pillarize


class TrainingDiverged(RuntimeError):
    pass


class TeacherModified(RuntimeError):
    pass


class MetricsStream:
    """Line-delimited JSON records. Records carry no wall-clock so reruns are bitwise equal."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def emit(self, **record) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class PreparedSet:
    inputs: np.ndarray  # (n, 6, H, W)
    targets: list[TargetMaps]
    scenes: list[Scene]

    def __len__(self) -> int:
        return len(self.scenes)


def prepare(scenes: Sequence[Scene], grid: GridConfig, num_classes: int) -> PreparedSet:
    inputs = np.stack([pillarize(s, grid) for s in scenes]) if scenes else np.zeros((0, 6, grid.size, grid.size))
    return PreparedSet(inputs, [encode_targets(s, grid, num_classes) for s in scenes], list(scenes))


def init_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent streams for parameter init and batch shuffling."""
    init, shuffle = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init), np.random.default_rng(shuffle)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at {where}: {value}")


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    ap: dict[int, float | None]
    aph: dict[int, float | None]

    @property
    def macro_ap(self) -> float:
        vals = [v for v in self.ap.values() if v is not None]
        return float(np.mean(vals)) if vals else 0.0

    @property
    def macro_aph(self) -> float:
        vals = [v for v in self.aph.values() if v is not None]
        return float(np.mean(vals)) if vals else 0.0


def evaluate_detections(all_dets: Sequence[Sequence], scenes: Sequence[Scene], cfg: RunConfig) -> EvalResult:
    k = cfg.net.num_classes
    per_class = {c: [] for c in range(k)}
    for dets, scene in zip(all_dets, scenes):
        for c in range(k):
            d = [x for x in dets if x[0].class_id == c]
            g = [b for b in scene.boxes if b.class_id == c]
            per_class[c].append(match_detections(d, g, cfg.eval.iou_thresholds[c], c))
    return EvalResult(
        {c: average_precision(per_class[c], heading_weighted=False) for c in range(k)},
        {c: average_precision(per_class[c], heading_weighted=True) for c in range(k)},
    )


def predict(det: Detector, data: PreparedSet, cfg: RunConfig, batch_size: int = 8) -> list[list]:
    out = []
    with no_grad():
        for i in range(0, len(data), batch_size):
            _, heads = det(Tensor(data.inputs[i:i + batch_size]))
            for j in range(heads["hm"].shape[0]):
                out.append(decode_detections(heads, cfg.grid, cfg.eval.score_threshold,
                                             cfg.eval.max_dets, index=j))
    return out


def evaluate(det: Detector, data: PreparedSet, cfg: RunConfig) -> EvalResult:
    return evaluate_detections(predict(det, data, cfg), data.scenes, cfg)


def evaluate_oracle(data: PreparedSet, cfg: RunConfig) -> EvalResult:
    dets = [decode_targets(t, cfg.grid, cfg.eval.score_threshold, cfg.eval.max_dets) for t in data.targets]
    return evaluate_detections(dets, data.scenes, cfg)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    epoch_losses: list[dict[str, float]] = field(default_factory=list)
    epoch_eval: list[dict] = field(default_factory=list)
    final_eval: EvalResult | None = None
    wall_clock: float = 0.0
    steps: int = 0


def _optimizer(cfg: RunConfig, total_steps: int) -> OptimizerState:
    o = cfg.optim
    return OptimizerState(total_steps=max(total_steps, 1), lr_max=o.lr_max, lr_min=o.lr_min,
                          beta1=o.beta1, beta2=o.beta2, weight_decay=o.weight_decay)


def _mean_records(records: list[dict[str, float]]) -> dict[str, float]:
    keys = records[0].keys() if records else []
    return {k: float(np.mean([r[k] for r in records])) for k in keys}


def train_teacher(cfg: RunConfig, train: PreparedSet, eval_set: PreparedSet | None, seed: int,
                  stream: MetricsStream | None = None, epochs: int | None = None,
                  label: str = "teacher") -> tuple[Detector, TrainResult]:
    """Supervised training of the full-width detector."""
    stream = stream or MetricsStream()
    epochs = cfg.optim.epochs if epochs is None else epochs
    init_rng, shuffle_rng = init_rngs(seed)
    det = Detector(cfg.net, init_rng, prefix="teacher")
    params = det.parameters()
    steps_per_epoch = math.ceil(len(train) / cfg.optim.batch_size)
    state = _optimizer(cfg, epochs * steps_per_epoch)
    result = TrainResult()
    t0 = time.perf_counter()
    for epoch in range(epochs):
        records = []
        for idx in batches(len(train), cfg.optim.batch_size, shuffle_rng):
            lr = state.lr
            zero_grads(params)
            _, heads = det(Tensor(train.inputs[idx]))
            loss = supervised_loss(heads, stack_targets([train.targets[i] for i in idx]))
            value = loss.item()
            _check_finite(value, f"{label} step {state.step_count}")
            backward(loss)
            finalize_grads(params)
            adam_step(state, params)
            records.append({"sup": value, "total": value})
            stream.emit(event="step", run=label, seed=seed, epoch=epoch, step=state.step_count,
                        lr=lr, losses={"sup": value, "total": value})
        mean = _mean_records(records)
        result.epoch_losses.append(mean)
        stream.emit(event="epoch", run=label, seed=seed, epoch=epoch, losses=mean)
        if eval_set is not None and len(eval_set):
            ev = evaluate(det, eval_set, cfg)
            rec = {"epoch": epoch, "macro_ap": ev.macro_ap, "macro_aph": ev.macro_aph}
            result.epoch_eval.append(rec)
            stream.emit(event="eval", run=label, seed=seed, **rec,
                        ap={str(k): v for k, v in ev.ap.items()}, aph={str(k): v for k, v in ev.aph.items()})
    result.steps = state.step_count
    if eval_set is not None and len(eval_set):
        result.final_eval = evaluate(det, eval_set, cfg)
    result.wall_clock = time.perf_counter() - t0
    return det, result


@dataclass
class TeacherCache:
    """Frozen-teacher map-view features and head outputs for every training scene."""

    features: np.ndarray
    heads: dict[str, np.ndarray]

    def batch(self, idx) -> tuple[Tensor, dict[str, Tensor]]:
        return Tensor(self.features[idx]), {k: Tensor(v[idx]) for k, v in self.heads.items()}


def teacher_cache(teacher: Detector, data: PreparedSet, batch_size: int = 8) -> TeacherCache:
    n = len(data)
    feats, heads = None, None
    with no_grad():
        for i in range(0, n, batch_size):
            m, h = teacher(Tensor(data.inputs[i:i + batch_size]))
            if feats is None:
                feats = np.empty((n, *m.shape[1:]))
                heads = {k: np.empty((n, *v.shape[1:])) for k, v in h.items()}
            feats[i:i + m.shape[0]] = m.data
            for k in HEAD_NAMES:
                heads[k][i:i + m.shape[0]] = h[k].data
    return TeacherCache(feats, heads)


def distill_student(cfg: RunConfig, teacher: Detector, train: PreparedSet, eval_set: PreparedSet | None,
                    seed: int, distill_cfg: DistillConfig | None = None, divisor: int | None = None,
                    stream: MetricsStream | None = None, cache: TeacherCache | None = None,
                    label: str = "student", epochs: int | None = None,
                    ) -> tuple[Detector, DistillModule, TrainResult]:
    """Train a student against the frozen teacher with the configured losses.

    The teacher's parameter hash is checked before and after; any change
    raises :class:`TeacherModified`.
    """
    stream = stream or MetricsStream()
    dcfg = distill_cfg or cfg.distill
    divisor = cfg.student_divisor if divisor is None else divisor
    epochs = cfg.optim.epochs if epochs is None else epochs
    teacher.freeze()
    before = parameter_hash(teacher.parameters())
    cache = cache or teacher_cache(teacher, train)
    init_rng, shuffle_rng = init_rngs(seed)
    student = Detector(cfg.net.with_divisor(divisor), init_rng, prefix="student")
    kd = DistillModule(dcfg, student.cfg.channels, cfg.net.channels, cfg.net.num_classes, init_rng)
    params = unique_parameters(student.parameters() + kd.parameters())
    steps_per_epoch = math.ceil(len(train) / cfg.optim.batch_size)
    state = _optimizer(cfg, epochs * steps_per_epoch)
    result = TrainResult()
    t0 = time.perf_counter()
    for epoch in range(epochs):
        records = []
        for idx in batches(len(train), cfg.optim.batch_size, shuffle_rng):
            lr = state.lr
            zero_grads(params)
            tb = stack_targets([train.targets[i] for i in idx])
            m_t, out_t = cache.batch(idx)
            m_s, out_s = student(Tensor(train.inputs[idx]))
            losses = distillation_losses(supervised_loss(out_s, tb), m_t, out_t, m_s, out_s, tb, kd)
            values = losses.values()
            _check_finite(values["total"], f"{label} step {state.step_count}")
            backward(losses.total)
            finalize_grads(params)
            adam_step(state, params)
            records.append(values)
            stream.emit(event="step", run=label, seed=seed, epoch=epoch, step=state.step_count,
                        lr=lr, losses=values)
        mean = _mean_records(records)
        result.epoch_losses.append(mean)
        stream.emit(event="epoch", run=label, seed=seed, epoch=epoch, losses=mean)
    result.steps = state.step_count
    after = parameter_hash(teacher.parameters())
    if after != before:
        raise TeacherModified(f"teacher parameters changed during {label}")
    stream.emit(event="teacher_hash", run=label, seed=seed, before=before, after=after)
    if eval_set is not None and len(eval_set):
        result.final_eval = evaluate(student, eval_set, cfg)
    result.wall_clock = time.perf_counter() - t0
    return student, kd, result


def parameters_of(modules: Iterable) -> list[Parameter]:
    return unique_parameters(p for m in modules for p in m.parameters())
