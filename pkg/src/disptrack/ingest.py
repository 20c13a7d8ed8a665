"""Sequence loading, synthesis and training-target generation.

Covers the KITTI tracking label text format (17 whitespace-separated fields
per line) and the raw velodyne binary layout (little-endian float32 x,y,z,
intensity quadruples), a deterministic synthetic-scene generator that stands
in for real drives at desk scale, the per-object displacement augmentation
used for robustness sweeps, and per-point foreground/displacement targets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .geom import (
    DEFAULT_NUM_HEADING_BINS,
    DEFAULT_SIZE_TEMPLATES,
    Box3D,
    BoxEncoding,
    PointCloud,
    encode_box,
    points_in_box,
)

log = logging.getLogger(__name__)

KITTI_CLASS_NAMES = ("Car", "Van", "Truck", "Pedestrian", "Person_sitting",
                     "Cyclist", "Tram", "Misc")
_CLASS_TO_ID = {name: i for i, name in enumerate(KITTI_CLASS_NAMES)}
_FIELDS_PER_LINE = 17
_BYTES_PER_POINT = 16

DEFAULT_GROUND_Z = -1.4  # sensor-frame height threshold, z up


@dataclass(eq=False)
class FrameLabel:
    """Ground-truth (or hypothesis) boxes for one frame."""

    frame_index: int
    boxes: list[Box3D] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.frame_index < 0:
            raise ValueError("frame index must be non-negative")
        ids = [b.track_id for b in self.boxes if b.track_id is not None]
        if len(ids) != len(set(ids)):
            raise ValueError(f"duplicate track ids in frame {self.frame_index}")

    def box_by_track(self, track_id: int) -> Box3D | None:
        for box in self.boxes:
            if box.track_id == track_id:
                return box
        return None


@dataclass(eq=False)
class Sequence:
    """Ordered (cloud, label) frames plus naming and timing metadata."""

    frames: list[tuple[PointCloud, FrameLabel]]
    name: str = "sequence"
    frame_period: float = 0.1

    def __post_init__(self) -> None:
        indices = [label.frame_index for _, label in self.frames]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError("frame indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)

    def adjacent_pairs(self):
        for (cloud_a, label_a), (cloud_b, label_b) in zip(self.frames, self.frames[1:]):
            yield cloud_a, label_a, cloud_b, label_b


@dataclass(eq=False)
class TrainingTargets:
    """Per-point supervision for one frame pair.

    `displacement` is zero wherever `foreground_mask` is false.  Points of
    objects that vanish in the next frame keep zero displacement and are
    flagged in `excluded` so the loss can skip them.  `box_targets` holds one
    encoding per foreground point (None elsewhere), or None entirely when the
    caller skipped box-target generation.
    """

    foreground_mask: np.ndarray
    displacement: np.ndarray
    excluded: np.ndarray
    box_targets: list[BoxEncoding | None] | None = None

    def __post_init__(self) -> None:
        self.foreground_mask = np.asarray(self.foreground_mask, dtype=bool).ravel()
        self.displacement = np.asarray(self.displacement, dtype=float).reshape(-1, 3)
        self.excluded = np.asarray(self.excluded, dtype=bool).ravel()
        n = self.foreground_mask.shape[0]
        if self.displacement.shape[0] != n or self.excluded.shape[0] != n:
            raise ValueError("target arrays must have matching lengths")
        if np.any(np.linalg.norm(self.displacement[~self.foreground_mask], axis=1) > 0):
            raise ValueError("background displacement must be zero")
        if self.box_targets is not None and len(self.box_targets) != n:
            raise ValueError("box targets must match the point count")


# ---------------------------------------------------------------------------
# KITTI tracking formats
# ---------------------------------------------------------------------------

def parse_kitti_labels(text: str) -> list[FrameLabel]:
    """Parse KITTI tracking label text into per-frame box lists.

    Line layout: frame track_id type truncated occluded alpha bbox(4) h w l
    x y z rotation_y.  "DontCare" lines are dropped; unknown type strings are
    skipped with a logged warning.  Malformed lines raise with their number.
    """
    frames: dict[int, list[Box3D]] = {}
    skipped = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != _FIELDS_PER_LINE:
            raise ValueError(f"line {lineno}: expected {_FIELDS_PER_LINE} fields, "
                             f"got {len(parts)}")
        try:
            frame = int(parts[0])
            track_id = int(parts[1])
            obj_type = parts[2]
            h, w, l = (float(v) for v in parts[10:13])
            x, y, z = (float(v) for v in parts[13:16])
            yaw = float(parts[16])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        if obj_type == "DontCare":
            continue
        if obj_type not in _CLASS_TO_ID:
            skipped += 1
            log.warning("line %d: unknown object type %r skipped", lineno, obj_type)
            continue
        frames.setdefault(frame, []).append(
            Box3D((x, y, z), (l, w, h), yaw, class_id=_CLASS_TO_ID[obj_type],
                  track_id=track_id))
    if skipped:
        log.warning("skipped %d lines with unknown object types", skipped)
    return [FrameLabel(idx, frames[idx]) for idx in sorted(frames)]


def format_kitti_labels(frames: list[FrameLabel]) -> str:
    """Inverse of parse_kitti_labels; unused image fields are written as 0."""
    lines = []
    for label in frames:
        for box in label.boxes:
            name = KITTI_CLASS_NAMES[box.class_id] \
                if 0 <= box.class_id < len(KITTI_CLASS_NAMES) else "Misc"
            track = box.track_id if box.track_id is not None else -1
            l, w, h = (float(v) for v in box.size)
            x, y, z = (float(v) for v in box.center)
            lines.append(
                f"{label.frame_index} {track} {name} 0 0 0 0 0 0 0 "
                f"{h!r} {w!r} {l!r} {x!r} {y!r} {z!r} {float(box.yaw)!r}")
    return "\n".join(lines) + ("\n" if lines else "")


def read_point_cloud(data: bytes) -> PointCloud:
    """Decode little-endian float32 (x, y, z, intensity) quadruples."""
    if len(data) % _BYTES_PER_POINT != 0:
        raise ValueError(f"point cloud byte length {len(data)} is not a multiple "
                         f"of {_BYTES_PER_POINT}")
    raw = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(float)
    intensity = np.clip(raw[:, 3], 0.0, 1.0) if raw.shape[0] else None
    return PointCloud(raw[:, :3], intensity)


def write_point_cloud(cloud: PointCloud) -> bytes:
    intensity = cloud.intensity if cloud.intensity is not None \
        else np.zeros(len(cloud))
    raw = np.column_stack([cloud.points, intensity]).astype("<f4")
    return raw.tobytes()


def remove_ground(cloud: PointCloud, z_threshold: float = DEFAULT_GROUND_Z) -> PointCloud:
    """Keep points strictly above the height threshold, order preserved."""
    keep = cloud.points[:, 2] > z_threshold
    intensity = cloud.intensity[keep] if cloud.intensity is not None else None
    return PointCloud(cloud.points[keep], intensity)


# ---------------------------------------------------------------------------
# synthetic sequences
# ---------------------------------------------------------------------------

@dataclass
class SceneConfig:
    """Parameters of a synthetic drive; all distances in meters."""

    frames: int = 50
    objects: int = 5
    velocity_min: float = 0.1
    velocity_max: float = 0.6
    points_per_object: int = 120
    background_points: int = 200
    noise_sigma: float = 0.02
    length_range: tuple[float, float] = (3.6, 4.4)
    width_range: tuple[float, float] = (1.5, 1.8)
    height_range: tuple[float, float] = (1.4, 1.7)
    spawn_spacing: float = 14.0
    arena_half_extent: float = 45.0
    direction_change_every: int = 0  # 0 keeps velocities constant
    frame_period: float = 0.1
    name: str = "synthetic"

    def validate(self) -> None:
        if self.frames < 1 or self.objects < 1:
            raise ValueError("frame and object counts must be positive")
        if self.points_per_object < 1 or self.background_points < 0:
            raise ValueError("point counts must be positive")
        if self.velocity_min < 0 or self.velocity_max < self.velocity_min:
            raise ValueError("velocity range must satisfy 0 <= min <= max")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")


def _box_surface_points(rng: np.random.Generator, size: np.ndarray, count: int,
                        inset: float) -> np.ndarray:
    """Uniform samples on the box surface, pulled inward by `inset` meters."""
    half = size / 2.0 - inset
    half = np.maximum(half, 0.05)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, size=count, p=areas / areas.sum())
    side = rng.choice([-1.0, 1.0], size=count)
    pts = rng.uniform(-1.0, 1.0, size=(count, 3)) * half
    pts[np.arange(count), axis] = side * half[axis]
    return pts


def synthesize_sequence(config: SceneConfig, seed: int) -> Sequence:
    """Deterministic synthetic drive: rigid box-surface clusters moving with
    (piecewise-)constant velocities over static background clutter.

    Cluster points are sampled once per object and moved rigidly with the box;
    per-frame sensor noise is Gaussian, clipped at 3 sigma so labelled points
    always stay inside their boxes.
    """
    config.validate()
    rng = np.random.default_rng(seed)

    sizes, clusters, yaws = [], [], []
    inset = 3.0 * config.noise_sigma + 0.01
    for _ in range(config.objects):
        size = np.array([rng.uniform(*config.length_range),
                         rng.uniform(*config.width_range),
                         rng.uniform(*config.height_range)])
        sizes.append(size)
        clusters.append(_box_surface_points(rng, size, config.points_per_object, inset))

    # spawn on a jittered grid so objects start well separated
    grid = int(np.ceil(np.sqrt(config.objects)))
    spawn_idx = rng.permutation(grid * grid)[:config.objects]
    centers0 = []
    for obj, cell in enumerate(spawn_idx):
        gx, gy = divmod(int(cell), grid)
        base = (np.array([gx, gy]) - (grid - 1) / 2.0) * config.spawn_spacing
        jitter = rng.uniform(-0.15, 0.15, size=2) * config.spawn_spacing
        centers0.append(np.array([base[0] + jitter[0], base[1] + jitter[1],
                                  sizes[obj][2] / 2.0]))

    speeds = rng.uniform(config.velocity_min, config.velocity_max, size=config.objects)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=config.objects)
    velocities = np.column_stack([speeds * np.cos(angles), speeds * np.sin(angles),
                                  np.zeros(config.objects)])
    yaws = list(angles)

    # pre-draw piecewise direction changes so frame generation stays in order
    segment = max(0, config.direction_change_every)
    centers = np.zeros((config.frames, config.objects, 3))
    obj_yaws = np.zeros((config.frames, config.objects))
    cur = np.array(centers0)
    vel = velocities.copy()
    yaw_now = np.array(yaws)
    for f in range(config.frames):
        if segment and f > 0 and f % segment == 0:
            new_angles = rng.uniform(0.0, 2.0 * np.pi, size=config.objects)
            vel = np.column_stack([speeds * np.cos(new_angles),
                                   speeds * np.sin(new_angles),
                                   np.zeros(config.objects)])
            yaw_now = new_angles
        if f > 0:
            cur = cur + vel
        centers[f] = cur
        obj_yaws[f] = yaw_now

    bg_xy = rng.uniform(-config.arena_half_extent, config.arena_half_extent,
                        size=(config.background_points, 2))
    bg_z = rng.uniform(0.2, 2.5, size=config.background_points)
    background = np.column_stack([bg_xy, bg_z])

    frames = []
    for f in range(config.frames):
        pts_parts, boxes = [], []
        for obj in range(config.objects):
            yaw = float(obj_yaws[f, obj])
            c, s = np.cos(yaw), np.sin(yaw)
            rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            world = clusters[obj] @ rot.T + centers[f, obj]
            noise = rng.normal(scale=config.noise_sigma,
                               size=world.shape) if config.noise_sigma else 0.0
            if config.noise_sigma:
                noise = np.clip(noise, -3.0 * config.noise_sigma,
                                3.0 * config.noise_sigma)
            pts_parts.append(world + noise)
            boxes.append(Box3D(centers[f, obj].copy(), sizes[obj].copy(), yaw,
                               class_id=0, track_id=obj))
        bg_noise = rng.normal(scale=config.noise_sigma,
                              size=background.shape) if config.noise_sigma else 0.0
        if config.noise_sigma:
            bg_noise = np.clip(bg_noise, -3.0 * config.noise_sigma,
                               3.0 * config.noise_sigma)
        pts_parts.append(background + bg_noise)
        cloud = PointCloud(np.concatenate(pts_parts, axis=0))
        frames.append((cloud, FrameLabel(f, boxes)))
    return Sequence(frames, name=f"{config.name}-{seed}",
                    frame_period=config.frame_period)


# ---------------------------------------------------------------------------
# displacement augmentation
# ---------------------------------------------------------------------------

def apply_displacement_augmentation(seq: Sequence, magnitude: float,
                                    mode: str = "fixed", seed: int = 0,
                                    per_object: bool = True) -> Sequence:
    """Inject extra per-frame horizontal shifts into every labelled object.

    For each frame transition and each object, a horizontal displacement of
    norm `magnitude` (mode "fixed") or norm ~ U[0, magnitude] (mode
    "uniform_random") in a uniformly random direction is added to the
    object's points and its box center, accumulating over the sequence.
    With per_object=False all objects share one shift per transition.
    Background points and frame 0 are untouched.
    """
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    if mode not in ("fixed", "uniform_random"):
        raise ValueError(f"mode must be 'fixed' or 'uniform_random', got {mode!r}")
    rng = np.random.default_rng(seed)

    track_ids = sorted({box.track_id for _, label in seq.frames for box in label.boxes
                        if box.track_id is not None})
    shift = {tid: np.zeros(3) for tid in track_ids}

    frames = []
    for f, (cloud, label) in enumerate(seq.frames):
        if f > 0:
            shared = None
            if not per_object:
                shared = _draw_shift(rng, magnitude, mode)
            for tid in track_ids:
                shift[tid] = shift[tid] + (shared if shared is not None
                                           else _draw_shift(rng, magnitude, mode))
        pts = cloud.points.copy()
        boxes = []
        for box in label.boxes:
            delta = shift.get(box.track_id, np.zeros(3))
            inside = points_in_box(cloud, box)
            pts[inside] = pts[inside] + delta
            boxes.append(box.translated(delta))
        intensity = cloud.intensity.copy() if cloud.intensity is not None else None
        frames.append((PointCloud(pts, intensity), FrameLabel(label.frame_index, boxes)))
    return Sequence(frames, name=seq.name, frame_period=seq.frame_period)


def _draw_shift(rng: np.random.Generator, magnitude: float, mode: str) -> np.ndarray:
    angle = rng.uniform(0.0, 2.0 * np.pi)
    norm = magnitude if mode == "fixed" else rng.uniform(0.0, magnitude)
    return np.array([norm * np.cos(angle), norm * np.sin(angle), 0.0])


# ---------------------------------------------------------------------------
# training targets
# ---------------------------------------------------------------------------

def label_targets(cloud_prev: PointCloud, labels_prev: FrameLabel,
                  labels_curr: FrameLabel,
                  num_heading_bins: int = DEFAULT_NUM_HEADING_BINS,
                  size_templates=DEFAULT_SIZE_TEMPLATES,
                  with_box_targets: bool = True) -> TrainingTargets:
    """Per-point supervision from two adjacent frames' labels.

    A point is foreground iff it lies inside any previous-frame box (first
    matching box wins for overlaps).  Its displacement target is the track's
    box-center motion into the current frame; tracks that vanish yield zero
    displacement and an `excluded` flag.  Box targets encode the owning box
    with the point position as center reference.
    """
    n = len(cloud_prev)
    mask = np.zeros(n, dtype=bool)
    displacement = np.zeros((n, 3))
    excluded = np.zeros(n, dtype=bool)
    box_targets: list[BoxEncoding | None] | None = \
        [None] * n if with_box_targets else None

    for box in labels_prev.boxes:
        inside = points_in_box(cloud_prev, box) & ~mask
        if not np.any(inside):
            continue
        mask |= inside
        curr = labels_curr.box_by_track(box.track_id) \
            if box.track_id is not None else None
        if curr is None:
            excluded[inside] = True
        else:
            displacement[inside] = curr.center - box.center
        if with_box_targets:
            base = encode_box(box, num_heading_bins=num_heading_bins,
                              size_templates=size_templates,
                              num_classes=max(1, box.class_id + 1))
            for idx in np.flatnonzero(inside):
                box_targets[idx] = BoxEncoding(
                    base.objectness, box.center - cloud_prev.points[idx],
                    base.heading_bin_logits, base.heading_residuals,
                    base.size_bin_logits, base.size_residuals, base.class_logits)

    return TrainingTargets(mask, displacement, excluded, box_targets)


# ---------------------------------------------------------------------------
# scene config files
# ---------------------------------------------------------------------------

_SCENE_KEYS = {
    "frames": int, "objects": int, "velocity_min": float, "velocity_max": float,
    "points_per_object": int, "background_points": int, "noise_sigma": float,
    "spawn_spacing": float, "arena_half_extent": float,
    "direction_change_every": int, "frame_period": float, "name": str,
}


def parse_scene_config(text: str) -> tuple[SceneConfig, int | None]:
    """Parse `key = value` lines ('#' comments allowed) into a SceneConfig.

    Returns (config, seed) where seed is taken from an optional `seed` key.
    """
    values: dict[str, object] = {}
    seed: int | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, _, value = (part.strip() for part in line.partition("="))
        if key == "seed":
            seed = int(value)
        elif key in _SCENE_KEYS:
            values[key] = _SCENE_KEYS[key](value)
        else:
            raise ValueError(f"line {lineno}: unknown scene key {key!r}")
    config = SceneConfig(**values)
    config.validate()
    return config, seed


def format_scene_config(config: SceneConfig, seed: int | None = None) -> str:
    lines = [f"{key} = {getattr(config, key)}" for key in _SCENE_KEYS]
    if seed is not None:
        lines.append(f"seed = {seed}")
    return "\n".join(lines) + "\n"
