"""Synthetic LiDAR-like scenes, pillar rasterization, and CenterPoint-style targets."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


def normalize_yaw(yaw: float) -> float:
    """Map an angle to (-pi, pi]."""
    y = math.fmod(yaw, 2.0 * math.pi)
    if y <= -math.pi:
        y += 2.0 * math.pi
    elif y > math.pi:
        y -= 2.0 * math.pi
    return y


@dataclass(frozen=True)
class Box3D:
    center_x: float
    center_y: float
    center_z: float
    length: float
    width: float
    height: float
    yaw: float
    class_id: int

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError(f"box sizes must be positive, got {self.length, self.width, self.height}")
        if not -math.pi < self.yaw <= math.pi:
            object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([self.center_x, self.center_y, self.center_z,
                         self.length, self.width, self.height, self.yaw])


@dataclass(frozen=True)
class ClassTemplate:
    name: str
    length: float
    width: float
    height: float
    weight: float
    intensity: float


DEFAULT_CLASSES = (
    ClassTemplate("vehicle", 4.5, 2.0, 1.6, 0.4, 0.6),
    ClassTemplate("pedestrian", 0.8, 0.8, 1.7, 0.3, 0.3),
    ClassTemplate("cyclist", 1.8, 0.8, 1.6, 0.3, 0.45),
)


@dataclass(frozen=True)
class GenConfig:
    range: float = 16.0
    min_boxes: int = 4
    max_boxes: int = 10
    classes: tuple[ClassTemplate, ...] = DEFAULT_CLASSES
    size_jitter: float = 0.1
    edge_margin: float = 1.5
    # expected surface points per m^2 is density / (1 + (d / falloff)^2)
    density: float = 30.0
    falloff: float = 6.0
    ground_points: int = 300
    max_poles: int = 3
    pole_points: int = 25
    max_retries: int = 200
    # extra intensity on the front face so heading is observable (a bare box is symmetric under yaw + pi)
    front_intensity: float = 0.35
    cell_size: float = 0.5  # placement keeps center cells distinct at this resolution

    @property
    def num_classes(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class GridConfig:
    size: int = 64
    cell_size: float = 0.5
    in_channels: int = 6
    count_norm: float = 32.0

    @property
    def origin(self) -> float:
        return -0.5 * self.size * self.cell_size

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """(row, col) of the cell containing (x, y); row indexes y, col indexes x."""
        return (int(math.floor((y - self.origin) / self.cell_size)),
                int(math.floor((x - self.origin) / self.cell_size)))


@dataclass
class Scene:
    boxes: list[Box3D]
    points: np.ndarray  # (n, 4): x, y, z, intensity
    seed: int
    range: float

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.seed == other.seed and self.range == other.range
                and self.boxes == other.boxes
                and self.points.shape == other.points.shape
                and np.array_equal(self.points, other.points))


class SceneGenerationError(RuntimeError):
    pass


def _box_surface_points(box: Box3D, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform samples on the four sides and top of a box, in world frame.

    Also returns a mask of the points on the front (+length) face.
    """
    l, w, h = box.length, box.width, box.height
    faces = np.array([w * h, w * h, l * h, l * h, l * w])
    face = rng.choice(5, size=n, p=faces / faces.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(0.0, 1.0, size=n)
    local = np.zeros((n, 3))
    # +x / -x faces
    for f, sx in ((0, 0.5), (1, -0.5)):
        m = face == f
        local[m] = np.stack([np.full(m.sum(), sx * l), u[m] * w, v[m] * h], axis=1)
    for f, sy in ((2, 0.5), (3, -0.5)):
        m = face == f
        local[m] = np.stack([u[m] * l, np.full(m.sum(), sy * w), v[m] * h], axis=1)
    m = face == 4
    local[m] = np.stack([u[m] * l, (v[m] - 0.5) * w, np.full(m.sum(), h)], axis=1)
    local += rng.normal(0.0, 0.02, size=local.shape)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x = box.center_x + c * local[:, 0] - s * local[:, 1]
    y = box.center_y + s * local[:, 0] + c * local[:, 1]
    z = box.center_z - h / 2.0 + local[:, 2]
    return np.stack([x, y, z], axis=1), face == 0


def expected_point_count(box: Box3D, cfg: GenConfig) -> float:
    area = 2 * box.height * (box.length + box.width) + box.length * box.width
    dist = math.hypot(box.center_x, box.center_y)
    return cfg.density * area / (1.0 + (dist / cfg.falloff) ** 2)


def generate_scene(cfg: GenConfig, seed: int) -> Scene:
    """Sample a non-overlapping set of boxes and a point cloud, deterministically in ``seed``."""
    from .metrics import rotated_iou

    rng = np.random.default_rng(seed)
    n_boxes = int(rng.integers(cfg.min_boxes, cfg.max_boxes + 1))
    weights = np.array([c.weight for c in cfg.classes])
    weights = weights / weights.sum()
    lim = cfg.range - cfg.edge_margin
    boxes: list[Box3D] = []
    cells: set[tuple[int, int]] = set()
    for _ in range(n_boxes):
        for _attempt in range(cfg.max_retries):
            k = int(rng.choice(len(cfg.classes), p=weights))
            t = cfg.classes[k]
            jit = rng.uniform(1 - cfg.size_jitter, 1 + cfg.size_jitter, size=3)
            l, w, h = t.length * jit[0], t.width * jit[1], t.height * jit[2]
            x, y = rng.uniform(-lim, lim, size=2)
            yaw = normalize_yaw(float(rng.uniform(-math.pi, math.pi)))
            box = Box3D(float(x), float(y), float(h / 2.0), float(l), float(w), float(h), yaw, k)
            cell = (math.floor(y / cfg.cell_size), math.floor(x / cfg.cell_size))
            if cell in cells:
                continue
            if any(rotated_iou(box, other) >= 0.01 for other in boxes):
                continue
            boxes.append(box)
            cells.add(cell)
            break
        else:
            raise SceneGenerationError(
                f"could not place box {len(boxes) + 1} of {n_boxes} after {cfg.max_retries} "
                "retries; use a smaller box count"
            )

    chunks = []
    for box in boxes:
        n = int(rng.poisson(expected_point_count(box, cfg)))
        xyz, front = _box_surface_points(box, n, rng)
        inten = rng.normal(cfg.classes[box.class_id].intensity, 0.05, size=n)
        inten = np.clip(inten + cfg.front_intensity * front, 0.0, 1.0)
        chunks.append(np.column_stack([xyz, inten]))
    g = cfg.ground_points
    ground = np.column_stack([
        rng.uniform(-cfg.range, cfg.range, size=(g, 2)),
        rng.normal(0.0, 0.03, size=g),
        rng.uniform(0.0, 0.2, size=g),
    ])
    chunks.append(ground)
    for _ in range(int(rng.integers(0, cfg.max_poles + 1))):
        px, py = rng.uniform(-lim, lim, size=2)
        ph = rng.uniform(1.0, 3.0)
        n = cfg.pole_points
        pole = np.column_stack([
            px + rng.normal(0, 0.08, size=n),
            py + rng.normal(0, 0.08, size=n),
            rng.uniform(0, ph, size=n),
            np.clip(rng.normal(0.5, 0.15, size=n), 0.0, 1.0),
        ])
        chunks.append(pole)
    points = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 4))
    inside = (np.abs(points[:, 0]) < cfg.range) & (np.abs(points[:, 1]) < cfg.range)
    return Scene(boxes, np.ascontiguousarray(points[inside]), int(seed), float(cfg.range))


# ---------------------------------------------------------------- pillarization

@dataclass
class PillarStats:
    points_in: int = 0
    points_dropped: int = 0
    occupied_cells: int = 0


def pillarize(scene: Scene, grid: GridConfig = GridConfig(), stats: PillarStats | None = None) -> np.ndarray:
    """Per-cell point statistics, shape (6, H, W).

    Channels: mean x and y offset from the cell center (cell units), mean z
    (m), mean intensity, log-normalized point count, occupancy.
    Points outside the grid are dropped and counted in ``stats``.
    """
    if grid.in_channels != 6:
        raise ValueError("pillarize produces exactly 6 channels")
    n_cells = grid.size * grid.size
    out = np.zeros((6, grid.size, grid.size))
    pts = scene.points
    if pts.size == 0:
        if stats is not None:
            stats.points_in, stats.points_dropped, stats.occupied_cells = 0, 0, 0
        return out
    col = np.floor((pts[:, 0] - grid.origin) / grid.cell_size).astype(np.int64)
    row = np.floor((pts[:, 1] - grid.origin) / grid.cell_size).astype(np.int64)
    keep = (col >= 0) & (col < grid.size) & (row >= 0) & (row < grid.size)
    pts, col, row = pts[keep], col[keep], row[keep]
    cell = row * grid.size + col
    # canonical order makes the floating-point sums independent of input order
    order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], cell))
    pts, col, row, cell = pts[order], col[order], row[order], cell[order]
    dx = (pts[:, 0] - grid.origin) / grid.cell_size - col - 0.5
    dy = (pts[:, 1] - grid.origin) / grid.cell_size - row - 0.5
    count = np.bincount(cell, minlength=n_cells).astype(np.float64)
    occ = count > 0
    flat = out.reshape(6, n_cells)
    for ch, vals in enumerate((dx, dy, pts[:, 2], pts[:, 3])):
        s = np.bincount(cell, weights=vals, minlength=n_cells)
        flat[ch, occ] = s[occ] / count[occ]
    flat[4] = np.log1p(count) / math.log1p(grid.count_norm)
    flat[5] = occ.astype(np.float64)
    if stats is not None:
        stats.points_in = int(keep.sum())
        stats.points_dropped = int((~keep).sum())
        stats.occupied_cells = int(occ.sum())
    return out


# ---------------------------------------------------------------- targets

@dataclass
class TargetMaps:
    heatmap: np.ndarray  # (K, H, W)
    offset: np.ndarray  # (2, H, W)
    height: np.ndarray  # (1, H, W)
    size: np.ndarray  # (3, H, W), log scale
    rot: np.ndarray  # (2, H, W): sin, cos
    valid_mask: np.ndarray  # (1, H, W) bool
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def num_objects(self) -> int:
        return int(self.indices.size)

    def regression_rows(self) -> np.ndarray:
        """(L, 8) regression targets at the object cells, canonical order."""
        flat = np.concatenate([self.offset, self.height, self.size, self.rot]).reshape(8, -1)
        return flat[:, self.indices].T.copy()


def gaussian_sigma(box: Box3D, cell_size: float) -> float:
    return max(1.0, math.hypot(box.length, box.width) / (6.0 * cell_size))


def encode_targets(scene: Scene, grid: GridConfig = GridConfig(), num_classes: int = 3) -> TargetMaps:
    n = grid.size
    heat = np.zeros((num_classes, n, n))
    offset = np.zeros((2, n, n))
    height = np.zeros((1, n, n))
    size = np.zeros((3, n, n))
    rot = np.zeros((2, n, n))
    mask = np.zeros((1, n, n), dtype=bool)
    rr, cc = np.mgrid[0:n, 0:n]
    owners: dict[tuple[int, int, int], int] = {}
    cells, classes = [], []
    for i, box in enumerate(scene.boxes):
        fx = (box.center_x - grid.origin) / grid.cell_size
        fy = (box.center_y - grid.origin) / grid.cell_size
        col, row = int(math.floor(fx)), int(math.floor(fy))
        if not (0 <= col < n and 0 <= row < n):
            raise ValueError(f"box {i} center ({box.center_x}, {box.center_y}) lies outside the grid")
        key = (box.class_id, row, col)
        if key in owners:
            raise ValueError(f"boxes {owners[key]} and {i} of class {box.class_id} share center cell {(row, col)}")
        owners[key] = i
        sigma = gaussian_sigma(box, grid.cell_size)
        g = np.exp(-((rr - row) ** 2 + (cc - col) ** 2) / (2.0 * sigma * sigma))
        np.maximum(heat[box.class_id], g, out=heat[box.class_id])
        offset[:, row, col] = (fx - col, fy - row)
        height[0, row, col] = box.center_z
        size[:, row, col] = (math.log(box.length), math.log(box.width), math.log(box.height))
        rot[:, row, col] = (math.sin(box.yaw), math.cos(box.yaw))
        mask[0, row, col] = True
        cells.append(row * n + col)
        classes.append(box.class_id)
    cells_arr = np.asarray(cells, dtype=np.int64)
    order = np.argsort(cells_arr, kind="stable")
    return TargetMaps(heat, offset, height, size, rot, mask,
                      cells_arr[order], np.asarray(classes, dtype=np.int64)[order])


# ---------------------------------------------------------------- dataset file

DATASET_MAGIC = b"ITKDDS01"


class DatasetError(ValueError):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


def encode_scenes(scenes: Sequence[Scene]) -> bytes:
    """Serialize scenes; layout is documented in ``docs/formats.md``."""
    if not scenes:
        raise DatasetError("refusing to write an empty dataset")
    chunks = [DATASET_MAGIC, struct.pack("<I", len(scenes))]
    for sc in scenes:
        chunks.append(struct.pack("<qdI", sc.seed, sc.range, len(sc.boxes)))
        for b in sc.boxes:
            chunks.append(struct.pack("<7di", b.center_x, b.center_y, b.center_z,
                                      b.length, b.width, b.height, b.yaw, b.class_id))
        pts = np.ascontiguousarray(sc.points, dtype="<f8").reshape(-1, 4)
        chunks.append(struct.pack("<I", pts.shape[0]))
        chunks.append(pts.tobytes())
    return b"".join(chunks)


def decode_scenes(blob: bytes) -> list[Scene]:
    if len(blob) < len(DATASET_MAGIC):
        raise DatasetTruncatedError(f"dataset truncated: {len(blob)} bytes, no header")
    magic = blob[:8]
    if magic[:6] != DATASET_MAGIC[:6]:
        raise DatasetError("not an itkd dataset (bad magic)")
    if magic != DATASET_MAGIC:
        raise DatasetVersionError(f"dataset version {magic[6:].decode(errors='replace')!r} "
                                  f"!= {DATASET_MAGIC[6:].decode()!r}")
    try:
        (count,) = struct.unpack_from("<I", blob, 8)
        pos = 12
        scenes = []
        for _ in range(count):
            seed, rng_, nb = struct.unpack_from("<qdI", blob, pos)
            pos += struct.calcsize("<qdI")
            boxes = []
            for _ in range(nb):
                vals = struct.unpack_from("<7di", blob, pos)
                pos += struct.calcsize("<7di")
                boxes.append(Box3D(*vals[:7], int(vals[7])))
            (npts,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            if pos + 32 * npts > len(blob):
                raise DatasetTruncatedError(f"dataset truncated inside scene {len(scenes)}")
            pts = np.frombuffer(blob, dtype="<f8", count=4 * npts, offset=pos).reshape(npts, 4)
            pos += 32 * npts
            scenes.append(Scene(boxes, pts.astype(np.float64), int(seed), float(rng_)))
    except struct.error as exc:
        raise DatasetTruncatedError("dataset truncated") from exc
    if pos != len(blob):
        raise DatasetError("trailing bytes after last scene")
    return scenes


def write_scenes(path: str | Path, scenes: Sequence[Scene]) -> None:
    Path(path).write_bytes(encode_scenes(scenes))


def read_scenes(path: str | Path) -> list[Scene]:
    return decode_scenes(Path(path).read_bytes())
