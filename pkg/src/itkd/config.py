"""Run configuration: a sectioned key-value (INI) file mapped onto dataclasses."""
from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .detector import NetConfig
from .distill import DistillConfig
from .metrics import DEFAULT_IOU_THRESHOLDS
from .scene import GenConfig, GridConfig


@dataclass(frozen=True)
class OptimConfig:
    lr_max: float = 0.003
    lr_min: float = 0.0
    epochs: int = 20
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0


@dataclass(frozen=True)
class DataConfig:
    train_scenes: int = 500
    eval_scenes: int = 100
    train_seed_start: int = 0
    eval_seed_start: int = 1_000_000


@dataclass(frozen=True)
class EvalConfig:
    score_threshold: float = 0.1
    max_dets: int = 100
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS


@dataclass(frozen=True)
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    net: NetConfig = field(default_factory=NetConfig)
    student_divisor: int = 4
    distill: DistillConfig = field(default_factory=DistillConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if self.net.width_divisor != 1:
            raise ValueError("[net] describes the teacher; set student_divisor for the student")
        self.net.with_divisor(self.student_divisor)  # validates divisibility
        if self.gen.num_classes != self.net.num_classes:
            raise ValueError("class templates and net.num_classes disagree")
        if len(self.eval.iou_thresholds) != self.net.num_classes:
            raise ValueError("need one IoU threshold per class")
        if self.gen.cell_size != self.grid.cell_size:
            raise ValueError("gen.cell_size must equal grid.cell_size")
        if self.gen.range != -self.grid.origin:
            raise ValueError("gen.range must equal half the grid extent")

    @property
    def student_net(self) -> NetConfig:
        return self.net.with_divisor(self.student_divisor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distill"]["losses"] = sorted(self.distill.losses)
        return d

    def fingerprint(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# scalar fields that may appear in each INI section
_SECTIONS = {
    "gen": GenConfig,
    "grid": GridConfig,
    "net": NetConfig,
    "distill": DistillConfig,
    "optim": OptimConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


def _parse_value(text: str, current):
    text = text.strip()
    if isinstance(current, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, (tuple, frozenset)) or current is None:
        if not text or text.lower() == "none":
            return None if current is None else type(current)()
        items = [t.strip() for t in text.split(",") if t.strip()]
        sample = next(iter(current), None) if current else None
        if isinstance(sample, int) or (sample is None and all(i.lstrip("-").isdigit() for i in items)):
            vals = [int(i) for i in items]
        elif isinstance(sample, float):
            vals = [float(i) for i in items]
        else:
            vals = items
        return frozenset(vals) if isinstance(current, frozenset) else tuple(vals)
    return text


def _format_value(value) -> str:
    if isinstance(value, (tuple, list, frozenset, set)):
        items = sorted(value) if isinstance(value, (frozenset, set)) else value
        return ", ".join(str(v) for v in items)
    return str(value)


def apply_overrides(cfg: RunConfig, parser: configparser.ConfigParser) -> RunConfig:
    updates = {}
    for section, cls in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        base = getattr(cfg, section)
        known = {f.name for f in fields(cls)}
        kw = {}
        for key, text in parser.items(section):
            if key not in known or key == "classes":
                raise ValueError(f"unknown or unsupported key [{section}] {key}")
            kw[key] = _parse_value(text, getattr(base, key))
        updates[section] = replace(base, **kw)
    if parser.has_section("run"):
        for key, text in parser.items("run"):
            if key == "seeds":
                updates["seeds"] = tuple(int(s) for s in text.split(","))
            elif key == "student_divisor":
                updates["student_divisor"] = int(text)
            elif key == "profile":
                continue
            else:
                raise ValueError(f"unknown key [run] {key}")
    return replace(cfg, **updates)


def load_config(path: str | Path | None) -> RunConfig:
    """Read an INI run config; missing keys keep their defaults.

    ``[run] profile = paper-scale`` starts from the paper-scale profile.
    """
    if path is None:
        return RunConfig()
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    base = RunConfig()
    if parser.has_option("run", "profile"):
        base = PROFILES[parser.get("run", "profile").strip()]()
    return apply_overrides(base, parser)


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    parser["run"] = {"seeds": _format_value(cfg.seeds), "student_divisor": str(cfg.student_divisor)}
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: _format_value(getattr(obj, f.name))
                           for f in fields(obj) if f.name != "classes" and getattr(obj, f.name) is not None}
    import io
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def desk_profile() -> RunConfig:
    return RunConfig()


def paper_scale_profile() -> RunConfig:
    """Published-scale settings, kept for reference; not exercised by the tests."""
    grid = GridConfig(size=468, cell_size=0.32)
    return RunConfig(
        gen=GenConfig(range=74.88, cell_size=0.32, min_boxes=20, max_boxes=60),
        grid=grid,
        net=NetConfig(blocks=(64, 128, 256), map_channels=384, head_hidden=64),
        student_divisor=4,
        distill=DistillConfig(enc_filters=(128, 64, 32), dec_filters=(64, 128, 384)),
        optim=OptimConfig(epochs=36, batch_size=32, beta1=0.95, weight_decay=0.01),
    )


def smoke_profile() -> RunConfig:
    """A tiny configuration for quick end-to-end runs."""
    return RunConfig(
        gen=GenConfig(range=8.0, min_boxes=2, max_boxes=4),
        grid=GridConfig(size=32),
        net=NetConfig(blocks=(8, 16, 16), map_channels=16, head_hidden=8),
        optim=OptimConfig(epochs=2, batch_size=4),
        data=DataConfig(train_scenes=8, eval_scenes=4),
        seeds=(0,),
    )


PROFILES = {"desk": desk_profile, "paper-scale": paper_scale_profile, "smoke": smoke_profile}
