"""Width-configurable BEV detector: backbone, five heads, supervised loss, decoding."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Parameter, ShapeError, ops
from .autodiff.tensor import Tensor
from .nn import Conv, to_rows
from .scene import Box3D, GridConfig, TargetMaps

HEAD_NAMES = ("hm", "offset", "height", "size", "rot")
FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
HEATMAP_PRIOR_BIAS = -2.19  # sigmoid(-2.19) ~= 0.1


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 6
    blocks: tuple[int, int, int] = (16, 32, 64)
    map_channels: int = 32  # C_t, the teacher's map-view width
    width_divisor: int = 1
    num_classes: int = 3
    head_hidden: int = 16

    def __post_init__(self):
        if self.width_divisor not in (1, 2, 4):
            raise ValueError("width_divisor must be 1, 2 or 4")
        for w in (*self.blocks, self.map_channels, self.head_hidden):
            if w % self.width_divisor:
                raise ValueError(f"layer width {w} is not divisible by {self.width_divisor}")

    @property
    def channels(self) -> int:
        """Map-view width of this network (C_t / divisor)."""
        return self.map_channels // self.width_divisor

    def scaled_blocks(self) -> tuple[int, ...]:
        return tuple(b // self.width_divisor for b in self.blocks)

    @property
    def hidden(self) -> int:
        return self.head_hidden // self.width_divisor

    def head_channels(self) -> dict[str, int]:
        return {"hm": self.num_classes, "offset": 2, "height": 1, "size": 3, "rot": 2}

    def with_divisor(self, divisor: int) -> "NetConfig":
        return NetConfig(self.in_channels, self.blocks, self.map_channels, divisor,
                         self.num_classes, self.head_hidden)

    def to_dict(self) -> dict:
        return asdict(self)


class Detector:
    """Backbone + heads. ``prefix`` namespaces every parameter id."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator, prefix: str = "det"):
        self.cfg = cfg
        self.prefix = prefix
        b1, b2, b3 = cfg.scaled_blocks()
        c = cfg.channels
        p = f"{prefix}/backbone"
        self.block1 = Conv(f"{p}/block1", cfg.in_channels, b1, 3, rng, stride=1)
        self.block2 = Conv(f"{p}/block2", b1, b2, 3, rng, stride=2)
        self.block3 = Conv(f"{p}/block3", b2, b3, 3, rng, stride=2)
        self.mix1 = Conv(f"{p}/mix1", b3 + b2, b2, 1, rng)
        self.mix2 = Conv(f"{p}/mix2", b2 + b1, c, 1, rng)
        hid = cfg.hidden
        self.head_hidden = {}
        self.head_out = {}
        for name, n_out in cfg.head_channels().items():
            self.head_hidden[name] = Conv(f"{prefix}/head/{name}/conv3", c, hid, 3, rng)
            bias = HEATMAP_PRIOR_BIAS if name == "hm" else 0.0
            self.head_out[name] = Conv(f"{prefix}/head/{name}/conv1", hid, n_out, 1, rng,
                                       bias_init=bias, gain=1.0)

    def parameters(self) -> list[Parameter]:
        return self.backbone_parameters() + self.head_parameters()

    def backbone_parameters(self) -> list[Parameter]:
        out = []
        for layer in (self.block1, self.block2, self.block3, self.mix1, self.mix2):
            out += layer.parameters()
        return out

    def head_parameters(self) -> list[Parameter]:
        out = []
        for name in HEAD_NAMES:
            out += self.head_hidden[name].parameters() + self.head_out[name].parameters()
        return out

    def freeze(self) -> None:
        for p in self.parameters():
            p.frozen = True

    def zero_biases(self) -> None:
        for p in self.parameters():
            if p.id.endswith("/b"):
                p.data = np.zeros_like(p.data)

    def backbone(self, x: Tensor) -> Tensor:
        return backbone_forward(self, x)

    def heads(self, m: Tensor) -> dict[str, Tensor]:
        return heads_forward(self, m)

    def __call__(self, x: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
        m = self.backbone(x)
        return m, self.heads(m)


def backbone_forward(det: Detector, x: Tensor) -> Tensor:
    """Pillar map (N, C_in, H, W) -> map-view feature M (N, C, H, W)."""
    cfg = det.cfg
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError("backbone", f"expected (N, {cfg.in_channels}, H, W) input", [x.shape])
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise ShapeError("backbone", "spatial size must be divisible by 4", [x.shape])
    x1 = ops.relu(det.block1(x))
    x2 = ops.relu(det.block2(x1))
    x3 = ops.relu(det.block3(x2))
    u1 = ops.relu(det.mix1(ops.concat([ops.upsample2x(x3), x2], axis=1)))
    return ops.relu(det.mix2(ops.concat([ops.upsample2x(u1), x1], axis=1)))


def heads_forward(det: Detector, m: Tensor) -> dict[str, Tensor]:
    """Five independent 3x3 -> relu -> 1x1 heads.

    The five 3x3 kernels are stacked into one convolution; this is
    numerically the same as running them separately.
    """
    cfg = det.cfg
    if m.ndim != 4 or m.shape[1] != cfg.channels:
        raise ShapeError("heads", f"expected {cfg.channels} input channels", [m.shape])
    hidden = [det.head_hidden[n] for n in HEAD_NAMES]
    w = ops.concat([h.weight for h in hidden], axis=0)
    b = ops.concat([h.bias for h in hidden], axis=0)
    h = ops.relu(ops.conv2d(m, w, b))
    parts = ops.split(h, [cfg.hidden] * len(HEAD_NAMES), axis=1)
    return {name: det.head_out[name](part) for name, part in zip(HEAD_NAMES, parts)}


# ---------------------------------------------------------------- supervision

@dataclass
class TargetBatch:
    """Stacked targets for N scenes, with the per-element loss weights precomputed."""

    heatmap: np.ndarray  # (N, K, H, W)
    pos_weight: np.ndarray  # -(center) / (N * max(L_n, 1))
    neg_weight: np.ndarray  # -(1 - y)^beta * (not center) / (N * max(L_n, 1))
    rows: np.ndarray  # global (n * H * W + cell) index per object, scene-major
    regression: np.ndarray  # (L_total, 8) offset(2), height(1), size(3), rot(2)
    row_scale: np.ndarray  # (L_total,) 1 / (N * L_n)
    counts: list[int] = field(default_factory=list)
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def num_scenes(self) -> int:
        return self.heatmap.shape[0]


def stack_targets(targets: Sequence[TargetMaps]) -> TargetBatch:
    n = len(targets)
    heat = np.stack([t.heatmap for t in targets])
    _, k, h, w = heat.shape
    counts = [t.num_objects for t in targets]
    scale = np.array([1.0 / (n * max(c, 1)) for c in counts]).reshape(n, 1, 1, 1)
    center = heat == 1.0
    pos_w = -(center * scale)
    neg_w = -((1.0 - heat) ** FOCAL_BETA) * (~center) * scale
    rows, regs, rscale, classes = [], [], [], []
    for i, t in enumerate(targets):
        rows.append(i * h * w + t.indices)
        regs.append(t.regression_rows())
        rscale.append(np.full(t.num_objects, 1.0 / (n * max(t.num_objects, 1))))
        classes.append(t.classes)
    return TargetBatch(
        heat, pos_w, neg_w,
        np.concatenate(rows).astype(np.int64),
        np.concatenate(regs).reshape(-1, 8),
        np.concatenate(rscale),
        counts,
        np.concatenate(classes).astype(np.int64),
    )


REGRESSION_SLICES = {"offset": (0, 2), "height": (2, 3), "size": (3, 6), "rot": (6, 8)}


def focal_loss(hm_logits: Tensor, batch: TargetBatch) -> Tensor:
    """Penalty-reduced focal loss, summed and normalized per scene by its object count."""
    if hm_logits.shape != batch.heatmap.shape:
        raise ShapeError("focal_loss", "logits and heatmap differ", [hm_logits.shape, batch.heatmap.shape])
    p = ops.clamp(ops.sigmoid(hm_logits), 1e-4, 1.0 - 1e-4)
    one = Tensor(np.ones(p.shape))
    q = ops.sub(one, p)
    pos = ops.mul(ops.mul(q, q), ops.log(p))
    neg = ops.mul(ops.mul(p, p), ops.log(q))
    return ops.add(ops.sum(ops.mul(pos, Tensor(batch.pos_weight))),
                   ops.sum(ops.mul(neg, Tensor(batch.neg_weight))))


def gather_head_rows(out: Tensor, rows: np.ndarray) -> Tensor:
    return ops.gather_rows(to_rows(out), rows)


def regression_loss(outputs: dict[str, Tensor], batch: TargetBatch) -> Tensor:
    if batch.rows.size == 0:
        return Tensor(0.0)
    total = None
    for name, (a, b) in REGRESSION_SLICES.items():
        pred = gather_head_rows(outputs[name], batch.rows)
        target = Tensor(batch.regression[:, a:b])
        w = Tensor(np.repeat(batch.row_scale[:, None] / (b - a), b - a, axis=1))
        term = ops.sum(ops.mul(ops.abs(ops.sub(pred, target)), w))
        total = term if total is None else ops.add(total, term)
    return total


def supervised_loss(outputs: dict[str, Tensor], batch: TargetBatch) -> Tensor:
    """Focal heatmap loss plus masked mean-l1 regression, batch-averaged per scene."""
    for name in HEAD_NAMES:
        if outputs[name].shape[0] != batch.num_scenes or outputs[name].shape[2:] != batch.heatmap.shape[2:]:
            raise ShapeError("supervised_loss", f"head {name} does not match targets",
                             [outputs[name].shape, batch.heatmap.shape])
    return ops.add(focal_loss(outputs["hm"], batch), regression_loss(outputs, batch))


# ---------------------------------------------------------------- decoding

def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def decode_maps(
    heat: np.ndarray,
    offset: np.ndarray,
    height: np.ndarray,
    size: np.ndarray,
    rot: np.ndarray,
    grid: GridConfig = GridConfig(),
    score_threshold: float = 0.1,
    max_dets: int = 100,
) -> list[tuple[Box3D, float]]:
    """Decode one scene's probability heatmap (K, H, W) and regression maps into boxes."""
    score = heat.max(axis=0)
    cls = heat.argmax(axis=0)
    padded = np.pad(score, 1, constant_values=-np.inf)
    local_max = sliding_window_view(padded, (3, 3)).max(axis=(2, 3))
    peak = (score == local_max) & (score > score_threshold)
    rows, cols = np.nonzero(peak)
    vals = score[rows, cols]
    order = np.argsort(-vals, kind="stable")[:max_dets]
    dets = []
    for i in order:
        r, c = int(rows[i]), int(cols[i])
        x = (c + offset[0, r, c]) * grid.cell_size + grid.origin
        y = (r + offset[1, r, c]) * grid.cell_size + grid.origin
        l, w, h = np.exp(np.clip(size[:, r, c], -6.0, 6.0))
        yaw = math.atan2(rot[0, r, c], rot[1, r, c])
        box = Box3D(float(x), float(y), float(height[0, r, c]), float(l), float(w), float(h),
                    yaw, int(cls[r, c]))
        dets.append((box, float(vals[i])))
    return dets


def decode_detections(
    outputs: dict[str, np.ndarray | Tensor],
    grid: GridConfig = GridConfig(),
    score_threshold: float = 0.1,
    max_dets: int = 100,
    index: int = 0,
) -> list[tuple[Box3D, float]]:
    """Decode scene ``index`` of a batch of head outputs (hm given as logits)."""
    arr = {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in outputs.items()}
    if arr["hm"].ndim == 4:
        arr = {k: v[index] for k, v in arr.items()}
    return decode_maps(_sigmoid(arr["hm"]), arr["offset"], arr["height"], arr["size"], arr["rot"],
                       grid, score_threshold, max_dets)


def decode_targets(t: TargetMaps, grid: GridConfig = GridConfig(), score_threshold: float = 0.1,
                   max_dets: int = 100) -> list[tuple[Box3D, float]]:
    """Decode ground-truth targets as if they were perfect predictions."""
    return decode_maps(t.heatmap, t.offset, t.height, t.size, t.rot, grid, score_threshold, max_dets)
