"""Orchestration behind the command line: datasets, checkpoints, reports, the ablation matrix."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import load_parameters, parameter_hash, save_parameters
from .autodiff.checkpoint import assign_parameters
from .config import RunConfig
from .detector import Detector, NetConfig
from .distill import DistillConfig
from .scene import generate_scene, read_scenes, write_scenes
from .train import (
    EvalResult,
    MetricsStream,
    PreparedSet,
    TrainResult,
    distill_student,
    evaluate,
    evaluate_oracle,
    prepare,
    teacher_cache,
    train_teacher,
)

TRAIN_FILE = "train.itkd"
EVAL_FILE = "eval.itkd"
DATASET_INFO = "dataset.json"
MANIFEST_SUFFIX = ".manifest.json"
MANIFEST_VERSION = 1


class ManifestMismatch(ValueError):
    pass


class HarnessError(RuntimeError):
    pass


# ---------------------------------------------------------------- datasets

def seed_ranges(cfg: RunConfig) -> tuple[range, range]:
    d = cfg.data
    train = range(d.train_seed_start, d.train_seed_start + d.train_scenes)
    ev = range(d.eval_seed_start, d.eval_seed_start + d.eval_scenes)
    if train and ev and max(train.start, ev.start) < min(train.stop, ev.stop):
        raise ValueError(f"train seeds {train.start}..{train.stop - 1} overlap eval seeds "
                         f"{ev.start}..{ev.stop - 1}")
    return train, ev


def cmd_gen_data(cfg: RunConfig, out: str | Path) -> dict:
    """Write train and eval splits plus a small JSON description into ``out``."""
    train_seeds, eval_seeds = seed_ranges(cfg)
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_scenes(out / TRAIN_FILE, [generate_scene(cfg.gen, s) for s in train_seeds])
        write_scenes(out / EVAL_FILE, [generate_scene(cfg.gen, s) for s in eval_seeds])
        info = {
            "train": {"file": TRAIN_FILE, "seed_start": train_seeds.start, "count": len(train_seeds)},
            "eval": {"file": EVAL_FILE, "seed_start": eval_seeds.start, "count": len(eval_seeds)},
            "gen": json.loads(json.dumps(asdict(cfg.gen))),
        }
        (out / DATASET_INFO).write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise HarnessError(f"cannot write dataset to {out}: {exc}") from exc
    return info


@dataclass
class Dataset:
    train: PreparedSet
    eval: PreparedSet


def load_dataset(path: str | Path, cfg: RunConfig) -> Dataset:
    """``path`` is the directory written by :func:`cmd_gen_data`."""
    path = Path(path)
    if path.is_file():
        path = path.parent
    k = cfg.net.num_classes
    return Dataset(prepare(read_scenes(path / TRAIN_FILE), cfg.grid, k),
                   prepare(read_scenes(path / EVAL_FILE), cfg.grid, k))


# ---------------------------------------------------------------- checkpoints

def manifest_path(checkpoint: str | Path) -> Path:
    return Path(str(checkpoint) + MANIFEST_SUFFIX)


def save_checkpoint(path: str | Path, det: Detector, cfg: RunConfig, role: str, seed: int,
                    extra: dict | None = None) -> dict:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = det.parameters()
    save_parameters(path, params)
    manifest = {
        "version": MANIFEST_VERSION,
        "role": role,
        "prefix": det.prefix,
        "seed": seed,
        "net": det.cfg.to_dict(),
        "grid": asdict(cfg.grid),
        "parameter_hash": parameter_hash(params),
        "parameter_count": int(sum(p.data.size for p in params)),
    }
    if extra:
        manifest.update(extra)
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(checkpoint: str | Path) -> dict:
    mp = manifest_path(checkpoint)
    if not mp.exists():
        raise ManifestMismatch(f"missing manifest {mp}")
    manifest = json.loads(mp.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ManifestMismatch(f"unsupported manifest version {manifest.get('version')!r}")
    return manifest


def _net_from_manifest(manifest: dict) -> NetConfig:
    net = dict(manifest["net"])
    net["blocks"] = tuple(net["blocks"])
    return NetConfig(**net)


def load_detector(checkpoint: str | Path) -> tuple[Detector, dict]:
    manifest = read_manifest(checkpoint)
    det = Detector(_net_from_manifest(manifest), np.random.default_rng(0), prefix=manifest["prefix"])
    assign_parameters(det.parameters(), load_parameters(checkpoint))
    if parameter_hash(det.parameters()) != manifest["parameter_hash"]:
        raise ManifestMismatch("checkpoint contents do not match the manifest hash")
    return det, manifest


def load_teacher(checkpoint: str | Path, cfg: RunConfig) -> Detector:
    """Load a teacher and check its manifest agrees with the run config."""
    det, manifest = load_detector(checkpoint)
    if manifest["role"] != "teacher":
        raise ManifestMismatch(f"{checkpoint} holds a {manifest['role']}, not a teacher")
    if det.cfg != cfg.net:
        raise ManifestMismatch(f"teacher net {det.cfg} != config net {cfg.net}")
    if manifest["grid"] != asdict(cfg.grid):
        raise ManifestMismatch("teacher grid differs from config grid")
    det.freeze()
    return det


# ---------------------------------------------------------------- reports

@dataclass
class ReportRow:
    label: str
    seed: int | str  # "mean" for seed-mean rows
    ap: dict[str, float | None] = field(default_factory=dict)
    aph: dict[str, float | None] = field(default_factory=dict)
    macro_ap: float = 0.0
    macro_aph: float = 0.0
    losses: dict[str, list[float]] = field(default_factory=dict)
    wall_clock: float = 0.0
    table: str = ""
    status: str = "ok"
    error: str = ""

    @classmethod
    def from_eval(cls, label: str, seed, ev: EvalResult, result: TrainResult | None = None,
                  table: str = "") -> "ReportRow":
        losses = {}
        if result is not None:
            for rec in result.epoch_losses:
                for k, v in rec.items():
                    losses.setdefault(k, []).append(v)
        return cls(label, seed, {str(k): v for k, v in ev.ap.items()},
                   {str(k): v for k, v in ev.aph.items()}, ev.macro_ap, ev.macro_aph, losses,
                   result.wall_clock if result else 0.0, table)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ReportRow":
        return cls(**d)


def seed_mean(rows: Sequence[ReportRow], label: str | None = None, table: str = "") -> ReportRow:
    """Arithmetic mean over the successful seed rows of one cell."""
    ok = [r for r in rows if r.status == "ok"]
    label = label or rows[0].label
    if not ok:
        return ReportRow(label, "mean", table=table, status="failed",
                         error="; ".join(r.error for r in rows))

    classes = ok[0].ap.keys()

    def mean_of(getter):
        vals = [getter(r) for r in ok]
        if any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    ap = {c: mean_of(lambda r, c=c: r.ap[c]) for c in classes}
    aph = {c: mean_of(lambda r, c=c: r.aph[c]) for c in classes}
    losses = {}
    for k in ok[0].losses:
        traces = [r.losses[k] for r in ok if k in r.losses]
        losses[k] = [float(v) for v in np.mean(np.array(traces), axis=0)]
    return ReportRow(label, "mean", ap, aph,
                     float(np.mean([r.macro_ap for r in ok])), float(np.mean([r.macro_aph for r in ok])),
                     losses, float(np.mean([r.wall_clock for r in ok])), table,
                     "ok" if len(ok) == len(rows) else "partial")


def _fmt(v) -> str:
    return "-" if v is None else f"{100 * v:6.2f}"


def render_table(title: str, rows: Sequence[ReportRow], class_names: Sequence[str]) -> str:
    """Aligned text table; AP values shown in points (x100)."""
    head = ["config", "seed"] + [f"{n} AP" for n in class_names] + [f"{n} APH" for n in class_names]
    head += ["mAP", "mAPH", "status"]
    body = []
    for r in rows:
        keys = list(r.ap.keys()) or [str(i) for i in range(len(class_names))]
        body.append([r.label, str(r.seed)] + [_fmt(r.ap.get(k)) for k in keys]
                    + [_fmt(r.aph.get(k)) for k in keys]
                    + ([_fmt(r.macro_ap), _fmt(r.macro_aph)] if r.status != "failed" else ["-", "-"])
                    + [r.status])
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [title, line(head), line(["-" * w for w in widths])]
    out += [line(b) for b in body]
    return "\n".join(out)


def class_names(cfg: RunConfig) -> list[str]:
    return [c.name for c in cfg.gen.classes]


def write_report(out: str | Path, rows: Sequence[ReportRow], cfg: RunConfig, title: str,
                 name: str = "report", tables: dict[str, list[ReportRow]] | None = None) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.json").write_text(json.dumps(
        {"config": cfg.to_dict(), "rows": [r.to_dict() for r in rows]}, indent=2, sort_keys=True) + "\n")
    names = class_names(cfg)
    if tables:
        text = "\n\n".join(render_table(t, rs, names) for t, rs in tables.items())
    else:
        text = render_table(title, rows, names)
    (out / f"{name}.txt").write_text(text + "\n")


def read_report(path: str | Path) -> tuple[dict, list[ReportRow]]:
    data = json.loads(Path(path).read_text())
    return data["config"], [ReportRow.from_dict(r) for r in data["rows"]]


# ---------------------------------------------------------------- commands

def cmd_train_teacher(cfg: RunConfig, dataset: str | Path, out: str | Path, seed: int | None = None) -> ReportRow:
    seed = cfg.seeds[0] if seed is None else seed
    data = load_dataset(dataset, cfg)
    out = Path(out)
    stream = MetricsStream(out / "teacher_metrics.jsonl")
    det, result = train_teacher(cfg, data.train, data.eval, seed, stream)
    save_checkpoint(out / "teacher.ckpt", det, cfg, "teacher", seed,
                    {"epochs": cfg.optim.epochs, "final_losses": result.epoch_losses[-1] if result.epoch_losses else {}})
    ev = result.final_eval or evaluate(det, data.eval, cfg)
    row = ReportRow.from_eval("teacher", seed, ev, result)
    write_report(out, [row], cfg, "Teacher", name="teacher_report")
    return row


def _run_student(cfg: RunConfig, teacher: Detector, data: Dataset, seed: int, dcfg: DistillConfig,
                 divisor: int, out: Path, label: str, cache=None) -> tuple[ReportRow, Detector]:
    stream = MetricsStream(out / f"{label}_seed{seed}_metrics.jsonl")
    student, _, result = distill_student(cfg, teacher, data.train, data.eval, seed, dcfg, divisor,
                                         stream, cache, label=label)
    save_checkpoint(out / f"{label}_seed{seed}.ckpt", student, cfg, "student", seed,
                    {"distill": _distill_dict(dcfg), "teacher_hash": parameter_hash(teacher.parameters())})
    return ReportRow.from_eval(label, seed, result.final_eval, result), student


def _distill_dict(d: DistillConfig) -> dict:
    out = asdict(d)
    out["losses"] = sorted(d.losses)
    return out


def cmd_distill(cfg: RunConfig, teacher_path: str | Path, dataset: str | Path, out: str | Path,
                seed: int | None = None, self_distill: bool = False) -> ReportRow:
    seed = cfg.seeds[0] if seed is None else seed
    teacher = load_teacher(teacher_path, cfg)
    data = load_dataset(dataset, cfg)
    label = "self-distill" if self_distill else "distill"
    row, _ = _run_student(cfg, teacher, data, seed, cfg.distill, 1 if self_distill else cfg.student_divisor,
                          Path(out), label)
    write_report(out, [row], cfg, label, name=f"{label}_report")
    return row


def cmd_self_distill(cfg: RunConfig, teacher_path, dataset, out, seed: int | None = None) -> ReportRow:
    """Distill into a fresh network with the teacher's own architecture."""
    return cmd_distill(cfg, teacher_path, dataset, out, seed, self_distill=True)


def cmd_evaluate(cfg: RunConfig, checkpoint: str | Path | None, dataset: str | Path,
                 out: str | Path | None = None, oracle: bool = False) -> ReportRow:
    """Evaluate a checkpoint (or the ground-truth oracle) on the eval split."""
    data = load_dataset(dataset, cfg)
    if oracle:
        row = ReportRow.from_eval("oracle", "-", evaluate_oracle(data.eval, cfg))
    else:
        if checkpoint is None:
            raise HarnessError("eval needs --teacher/--checkpoint or --oracle")
        det, manifest = load_detector(checkpoint)
        if manifest["grid"] != asdict(cfg.grid):
            raise ManifestMismatch("checkpoint grid differs from config grid")
        row = ReportRow.from_eval(Path(checkpoint).stem, manifest["seed"], evaluate(det, data.eval, cfg))
    if out is not None:
        write_report(out, [row], cfg, "Evaluation", name="eval_report")
    return row


# ---------------------------------------------------------------- ablation matrix

@dataclass(frozen=True)
class Cell:
    table: str
    label: str
    distill: DistillConfig


FULL = frozenset({"it", "cr", "attn"})


def ablation_matrix(base: DistillConfig) -> list[Cell]:
    """Every (table, cell) pair. Cells with identical configs share one training run."""
    full = base.with_(losses=FULL)
    return [
        Cell("loss components", "sup", base.with_(losses=frozenset())),
        Cell("loss components", "sup+it", base.with_(losses=frozenset({"it"}))),
        Cell("loss components", "sup+it+cr", base.with_(losses=frozenset({"it", "cr"}))),
        Cell("loss components", "sup+it+cr+attn", full),
        Cell("autoencoder sharing", "shared", full.with_(shared=True)),
        Cell("autoencoder sharing", "non-shared", full.with_(shared=False)),
        Cell("reconstruction", "interchange", full.with_(reconstruction="interchange")),
        Cell("reconstruction", "self", full.with_(reconstruction="self")),
        Cell("buffer direction", "S->T", full.with_(buffer="s2t")),
        Cell("buffer direction", "T->S", full.with_(buffer="t2s")),
        Cell("buffer direction", "(S+T)/2", full.with_(buffer="mid")),
        Cell("head KD", "hinton-kl", base.with_(losses=frozenset({"hinton-kl"}))),
        Cell("head KD", "plain-l1", base.with_(losses=frozenset({"plain-l1"}))),
        Cell("head KD", "attn", base.with_(losses=frozenset({"attn"}))),
    ]


TABLE_ORDER = ("buffer direction", "autoencoder sharing", "reconstruction", "head KD", "loss components")


def _run_key(d: DistillConfig) -> str:
    return json.dumps(_distill_dict(d), sort_keys=True)


def _run_name(d: DistillConfig) -> str:
    losses = "+".join(sorted(d.losses)) or "sup"
    return f"{losses}_{d.buffer}_{'shared' if d.shared else 'split'}_{d.reconstruction}"


def cmd_ablate(cfg: RunConfig, teacher_path: str | Path, dataset: str | Path, out: str | Path,
               seeds: Sequence[int] | None = None, cells: Sequence[Cell] | None = None) -> list[ReportRow]:
    """Run the full ablation matrix; finished runs under ``out/runs`` are reused.

    A failing run is recorded as a failed row; the remaining cells still run.
    """
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    teacher = load_teacher(teacher_path, cfg)
    before = parameter_hash(teacher.parameters())
    data = load_dataset(dataset, cfg)
    cells = list(ablation_matrix(cfg.distill) if cells is None else cells)
    out = Path(out)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    cache = None
    results: dict[tuple[str, int], ReportRow] = {}
    fingerprint = json.dumps({"run": cfg.fingerprint(), "teacher": before}, sort_keys=True)
    for cell in cells:
        key = _run_key(cell.distill)
        for seed in seeds:
            if (key, seed) in results:
                continue
            name = _run_name(cell.distill)
            record = runs_dir / f"{name}_seed{seed}.json"
            if record.exists():
                saved = json.loads(record.read_text())
                if saved.get("fingerprint") == fingerprint and saved.get("key") == key:
                    results[(key, seed)] = ReportRow.from_dict(saved["row"])
                    continue
            if cache is None:
                cache = teacher_cache(teacher, data.train)
            try:
                row, _ = _run_student(cfg, teacher, data, seed, cell.distill, cfg.student_divisor,
                                      runs_dir, name, cache)
            except Exception as exc:  # recorded, the matrix goes on
                row = ReportRow(name, seed, status="failed", error=f"{type(exc).__name__}: {exc}")
            results[(key, seed)] = row
            if row.status == "ok":
                record.write_text(json.dumps({"fingerprint": fingerprint, "key": key, "row": row.to_dict()},
                                             indent=2, sort_keys=True) + "\n")
    if parameter_hash(teacher.parameters()) != before:
        raise HarnessError("teacher parameters changed during the ablation")
    rows, tables = [], {}
    for cell in cells:
        key = _run_key(cell.distill)
        seed_rows = [replace(results[(key, s)], label=cell.label, table=cell.table) for s in seeds]
        cell_rows = seed_rows + [seed_mean(seed_rows, cell.label, cell.table)]
        rows += cell_rows
        tables.setdefault(cell.table, []).extend(cell_rows)
    ordered = {t: tables[t] for t in TABLE_ORDER if t in tables}
    write_report(out, rows, cfg, "Ablation", name="ablation_report", tables=ordered)
    return rows
