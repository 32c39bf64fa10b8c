"""Procedural labeled scene generator and label-preserving augmentation.

Scenes are industrial rooms built from surface-sampled primitives: floor
and wall planes, table and assembly-line boxes, an AGV with wheels, an
articulated robot arm and a simple human body model. Two domain profiles
('sim' and 'real') add sensor-style corruption so the sim-to-real gap is
reproducible with synthetic data alone.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .cloud import (AGV, ASSEMBLY_LINE, FLOOR, HUMAN, ROBOT, TABLE, UNLABELED,
                    WALL, LabeledCloud, load_cloud, save_cloud)


@dataclass(frozen=True)
class DomainProfile:
    """Corruption knobs separating simulated-style from real-style data."""

    noise_sigma: float = 0.002      # additive Gaussian, meters
    dropout: float = 0.0            # fraction of points removed uniformly
    occlusion: float = 0.0          # fraction of one random object removed
    clutter: float = 0.0            # fraction of extra Unlabeled points added

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for v in (self.dropout, self.occlusion, self.clutter):
            if not 0 <= v < 1:
                raise ValueError("fractions must be in [0, 1)")


SIM_PROFILE = DomainProfile(noise_sigma=0.002)
REAL_PROFILE = DomainProfile(noise_sigma=0.004, dropout=0.02, occlusion=0.05,
                             clutter=0.25)


@dataclass
class SceneSpec:
    room: tuple = (10.0, 8.0, 3.0)      # Lx, Ly, wall height (m)
    density: float = 150.0              # surface samples per m^2
    n_walls: int = 3
    n_tables: int = 1
    n_assembly_lines: int = 1
    n_agvs: int = 1
    n_robots: int = 1
    n_humans: int = 1
    profile: DomainProfile = field(default_factory=lambda: SIM_PROFILE)
    seed: int = 0

    def __post_init__(self):
        if min(self.room) <= 0:
            raise ValueError("room extents must be positive")
        if not 2 <= self.n_walls <= 4:
            raise ValueError("need 2 to 4 walls")
        if self.density <= 0:
            raise ValueError("density must be positive")


@dataclass(frozen=True)
class AugmentationSpec:
    flip_prob: float = 0.5              # per horizontal axis
    rotation_range: float = 2 * math.pi  # about the vertical axis
    scale_range: tuple = (0.8, 1.25)
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05

    def __post_init__(self):
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must be in [0, 1]")
        if min(self.scale_range) <= 0:
            raise ValueError("scale range must be positive")
        if self.jitter_clip < self.jitter_sigma:
            raise ValueError("jitter clip must be >= sigma")


IDENTITY_AUGMENTATION = AugmentationSpec(flip_prob=0.0, rotation_range=0.0,
                                         scale_range=(1.0, 1.0),
                                         jitter_sigma=0.0, jitter_clip=0.0)


# --------------------------------------------------------------------------
# surface samplers; each returns points plus the sampled area


def _sample_rect(rng, origin, u, v, n):
    a = rng.random((n, 1))
    b = rng.random((n, 1))
    return origin + a * u + b * v


def _rect_area(u, v):
    return float(np.linalg.norm(np.cross(u, v)))


def _box_faces(center, size, yaw=0.0, bottom=False):
    """Axis-aligned box faces rotated by yaw about z. Each face is
    (origin, u, v)."""
    sx, sy, sz = size
    cx, cy, cz = center
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    hx, hy = sx / 2, sy / 2
    z0 = cz - sz / 2
    faces = []

    def face(o, u, v):
        o = rot @ np.asarray(o, float) + [cx, cy, 0.0]
        faces.append((o, rot @ np.asarray(u, float), rot @ np.asarray(v, float)))

    face([-hx, -hy, z0 + sz], [sx, 0, 0], [0, sy, 0])          # top
    if bottom:
        face([-hx, -hy, z0], [sx, 0, 0], [0, sy, 0])
    face([-hx, -hy, z0], [sx, 0, 0], [0, 0, sz])               # y- side
    face([-hx, hy, z0], [sx, 0, 0], [0, 0, sz])                # y+ side
    face([-hx, -hy, z0], [0, sy, 0], [0, 0, sz])               # x- side
    face([hx, -hy, z0], [0, sy, 0], [0, 0, sz])                # x+ side
    return faces


def _sample_faces(rng, faces, density):
    pts = []
    for origin, u, v in faces:
        n = max(1, int(round(_rect_area(u, v) * density)))
        pts.append(_sample_rect(rng, origin, u, v, n))
    return np.concatenate(pts, axis=0)


def _sample_cylinder(rng, center, radius, height, density, axis="z", caps=True):
    lateral = 2 * math.pi * radius * height
    n_lat = max(1, int(round(lateral * density)))
    theta = rng.random(n_lat) * 2 * math.pi
    h = rng.random(n_lat) * height - height / 2
    pts = [np.column_stack([radius * np.cos(theta), radius * np.sin(theta), h])]
    if caps:
        cap_area = math.pi * radius ** 2
        for zc in (-height / 2, height / 2):
            n_cap = max(1, int(round(cap_area * density)))
            r = radius * np.sqrt(rng.random(n_cap))
            t = rng.random(n_cap) * 2 * math.pi
            pts.append(np.column_stack([r * np.cos(t), r * np.sin(t),
                                        np.full(n_cap, zc)]))
    out = np.concatenate(pts, axis=0)
    if axis == "x":
        out = out[:, [2, 0, 1]]
    elif axis == "y":
        out = out[:, [0, 2, 1]]
    return out + np.asarray(center, float)


def _sample_ellipsoid(rng, center, radii, density):
    a, b, c = radii
    p = 1.6075  # Thomsen surface-area approximation
    area = 4 * math.pi * ((a**p * b**p + a**p * c**p + b**p * c**p) / 3) ** (1 / p)
    n = max(1, int(round(area * density)))
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radii + np.asarray(center, float)


# --------------------------------------------------------------------------
# object builders; each returns (points, label)


def _make_floor(rng, spec):
    lx, ly, _ = spec.room
    n = max(1, int(round(lx * ly * spec.density)))
    pts = _sample_rect(rng, np.array([0.0, 0.0, 0.0]),
                       np.array([lx, 0.0, 0.0]), np.array([0.0, ly, 0.0]), n)
    return pts, FLOOR


def _make_walls(rng, spec):
    lx, ly, lz = spec.room
    walls = [
        (np.array([0.0, 0.0, 0.0]), np.array([lx, 0.0, 0.0])),   # y = 0
        (np.array([0.0, ly, 0.0]), np.array([lx, 0.0, 0.0])),    # y = ly
        (np.array([0.0, 0.0, 0.0]), np.array([0.0, ly, 0.0])),   # x = 0
        (np.array([lx, 0.0, 0.0]), np.array([0.0, ly, 0.0])),    # x = lx
    ]
    pts = []
    up = np.array([0.0, 0.0, lz])
    for origin, u in walls[:spec.n_walls]:
        n = max(1, int(round(np.linalg.norm(u) * lz * spec.density)))
        pts.append(_sample_rect(rng, origin, u, up, n))
    return np.concatenate(pts, axis=0), WALL


def _make_table(rng, spec, pos):
    size = (rng.uniform(1.2, 2.0), rng.uniform(0.6, 1.0), rng.uniform(0.7, 0.9))
    yaw = rng.uniform(0, 2 * math.pi)
    faces = _box_faces([pos[0], pos[1], size[2] / 2], size, yaw)
    return _sample_faces(rng, faces, spec.density), TABLE


def _make_assembly_line(rng, spec, pos):
    size = (rng.uniform(3.0, 4.0), rng.uniform(0.8, 1.2), rng.uniform(0.9, 1.1))
    yaw = rng.uniform(0, 2 * math.pi)
    faces = _box_faces([pos[0], pos[1], size[2] / 2], size, yaw)
    return _sample_faces(rng, faces, spec.density), ASSEMBLY_LINE


def _make_agv(rng, spec, pos):
    size = (rng.uniform(0.8, 1.2), rng.uniform(0.5, 0.8), rng.uniform(0.25, 0.4))
    z0 = 0.08  # body sits above the wheels
    faces = _box_faces([pos[0], pos[1], z0 + size[2] / 2], size, yaw=rng.uniform(0, 2 * math.pi),
                       bottom=True)
    pts = [_sample_faces(rng, faces, spec.density)]
    for dx in (-size[0] / 3, size[0] / 3):
        for dy in (-size[1] / 2, size[1] / 2):
            pts.append(_sample_cylinder(rng, [pos[0] + dx, pos[1] + dy, z0 / 2],
                                        radius=z0 / 2, height=0.04,
                                        density=spec.density, axis="y"))
    return np.concatenate(pts, axis=0), AGV


def _make_robot(rng, spec, pos):
    """Articulated arm: base cylinder plus 2-3 links with random joint angles."""
    pts = [_sample_cylinder(rng, [pos[0], pos[1], 0.15], radius=0.18,
                            height=0.3, density=spec.density)]
    joint = np.array([pos[0], pos[1], 0.3])
    direction = np.array([0.0, 0.0, 1.0])
    n_links = rng.integers(2, 4)
    for _ in range(n_links):
        length = rng.uniform(0.35, 0.6)
        # random bend: tilt the previous direction by up to 60 degrees
        tilt = rng.uniform(0, math.pi / 3)
        azim = rng.uniform(0, 2 * math.pi)
        perp = np.array([math.cos(azim), math.sin(azim), 0.0])
        direction = math.cos(tilt) * direction + math.sin(tilt) * perp
        direction /= np.linalg.norm(direction)
        seg_center = joint + direction * length / 2
        seg = _sample_cylinder(rng, [0, 0, 0], radius=0.07, height=length,
                               density=spec.density)
        # rotate the z-aligned segment onto `direction`
        z = np.array([0.0, 0.0, 1.0])
        vcross = np.cross(z, direction)
        s = np.linalg.norm(vcross)
        if s > 1e-9:
            vx = np.array([[0, -vcross[2], vcross[1]],
                           [vcross[2], 0, -vcross[0]],
                           [-vcross[1], vcross[0], 0]])
            rot = np.eye(3) + vx + vx @ vx * ((1 - direction @ z) / s**2)
            seg = seg @ rot.T
        pts.append(seg + seg_center)
        joint = joint + direction * length
    return np.concatenate(pts, axis=0), ROBOT


def _make_human(rng, spec, pos):
    height = rng.uniform(1.5, 1.95)
    leg_h = 0.45 * height
    torso_h = 0.35 * height
    head_r = 0.055 * height
    pts = [
        _sample_cylinder(rng, [pos[0] - 0.09, pos[1], leg_h / 2], 0.07, leg_h,
                         spec.density, caps=False),
        _sample_cylinder(rng, [pos[0] + 0.09, pos[1], leg_h / 2], 0.07, leg_h,
                         spec.density, caps=False),
        _sample_cylinder(rng, [pos[0], pos[1], leg_h + torso_h / 2], 0.16,
                         torso_h, spec.density),
        _sample_ellipsoid(rng, [pos[0], pos[1], leg_h + torso_h + head_r * 1.3],
                          (head_r, head_r, head_r * 1.3), spec.density),
    ]
    # arms hang beside the torso, slightly randomized
    for side in (-1, 1):
        sway = rng.uniform(-0.1, 0.25)
        pts.append(_sample_cylinder(
            rng, [pos[0] + side * 0.24, pos[1] + sway, leg_h + torso_h / 2],
            0.05, torso_h * 0.9, spec.density, caps=False))
    return np.concatenate(pts, axis=0), HUMAN


# conservative horizontal footprint radius per object builder
_FOOTPRINT = {"table": 1.2, "assembly": 2.1, "agv": 0.8, "robot": 1.6,
              "human": 0.7}


def _place_positions(rng, spec, radii):
    """Non-overlapping object anchor positions honoring footprint radii."""
    lx, ly, _ = spec.room
    order = sorted(range(len(radii)), key=lambda i: -radii[i])  # big first
    for _restart in range(50):
        placed: dict[int, np.ndarray] = {}
        for i in order:
            r = radii[i]
            margin = r + 0.3
            if lx - 2 * margin <= 0 or ly - 2 * margin <= 0:
                raise RuntimeError("room too small for object footprint")
            for _attempt in range(200):
                p = np.array([rng.uniform(margin, lx - margin),
                              rng.uniform(margin, ly - margin)])
                if all(np.linalg.norm(p - placed[j]) > r + radii[j] + 0.15
                       for j in placed):
                    placed[i] = p
                    break
            else:
                break  # greedy dead end; retry the whole layout
        if len(placed) == len(radii):
            return [placed[i] for i in range(len(radii))]
    raise RuntimeError("could not place objects without overlap; "
                       "room too small for requested object counts")


def generate_scene(spec: SceneSpec) -> LabeledCloud:
    """One labeled room scene, deterministic in spec.seed."""
    rng = np.random.default_rng(spec.seed)
    parts = [_make_floor(rng, spec), _make_walls(rng, spec)]
    builders = ([(_make_table, "table", spec.n_tables),
                 (_make_assembly_line, "assembly", spec.n_assembly_lines),
                 (_make_agv, "agv", spec.n_agvs),
                 (_make_robot, "robot", spec.n_robots),
                 (_make_human, "human", spec.n_humans)])
    radii = [_FOOTPRINT[kind] for _, kind, count in builders
             for _ in range(count)]
    positions = iter(_place_positions(rng, spec, radii))
    movable_slices = []  # (start, stop) of object point ranges, for occlusion
    offset = sum(p.shape[0] for p, _ in parts)
    for builder, _kind, count in builders:
        for _ in range(count):
            pts, label = builder(rng, spec, next(positions))
            movable_slices.append((offset, offset + pts.shape[0]))
            offset += pts.shape[0]
            parts.append((pts, label))

    points = np.concatenate([p for p, _ in parts], axis=0)
    labels = np.concatenate([np.full(p.shape[0], lab, dtype=np.int64)
                             for p, lab in parts])

    prof = spec.profile
    keep = np.ones(points.shape[0], dtype=bool)
    if prof.occlusion > 0 and movable_slices:
        start, stop = movable_slices[rng.integers(len(movable_slices))]
        seg = points[start:stop]
        # cut away one side of the object along a random horizontal direction
        direction = rng.normal(size=2)
        direction /= np.linalg.norm(direction)
        proj = seg[:, :2] @ direction
        cutoff = np.quantile(proj, 1.0 - prof.occlusion)
        keep[start:stop] = proj <= cutoff
    if prof.dropout > 0:
        keep &= rng.random(points.shape[0]) >= prof.dropout
    if not keep.any():
        keep[0] = True
    points, labels = points[keep], labels[keep]

    if prof.noise_sigma > 0:
        points = points + rng.normal(scale=prof.noise_sigma, size=points.shape)
    if prof.clutter > 0:
        lx, ly, lz = spec.room
        n_clutter = int(round(points.shape[0] * prof.clutter))
        if n_clutter:
            # airborne dust/steam puffs: tight point blobs drifting above
            # the furniture, clear of the walls
            z_lo, z_hi = 0.7 * lz, 0.95 * lz
            margin = min(0.6, 0.2 * min(lx, ly))
            blob_size = 40
            n_blobs = max(1, round(n_clutter / blob_size))
            centers = np.column_stack([
                rng.uniform(margin, lx - margin, n_blobs),
                rng.uniform(margin, ly - margin, n_blobs),
                rng.uniform(z_lo, z_hi, n_blobs)])
            which = rng.integers(n_blobs, size=n_clutter)
            clutter = centers[which] + rng.normal(scale=0.05,
                                                  size=(n_clutter, 3))
            clutter = np.clip(clutter, 0.0, [lx, ly, lz])
            points = np.concatenate([points, clutter], axis=0)
            labels = np.concatenate([labels,
                                     np.full(n_clutter, UNLABELED, np.int64)])
    return LabeledCloud(points, labels, frame_id=f"scene-{spec.seed}")


def make_dataset(n_scenes: int, profile: DomainProfile,
                 base_spec: SceneSpec | None = None, seed: int = 0,
                 ) -> list[LabeledCloud]:
    """n seed-derived scenes with jittered object counts, all on `profile`."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    base = base_spec or SceneSpec()
    ss = np.random.SeedSequence(seed)
    scene_seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n_scenes)]
    scenes = []
    for sseed in scene_seeds:
        jit = np.random.default_rng(sseed + 1)
        spec = SceneSpec(
            room=base.room, density=base.density,
            n_walls=int(jit.integers(2, 5)),
            n_tables=max(0, base.n_tables + int(jit.integers(-1, 2))),
            n_assembly_lines=base.n_assembly_lines,
            n_agvs=base.n_agvs, n_robots=base.n_robots, n_humans=base.n_humans,
            profile=profile, seed=sseed)
        scenes.append(generate_scene(spec))
    return scenes


def augment(cloud: LabeledCloud, spec: AugmentationSpec, seed: int) -> LabeledCloud:
    """Flips, vertical-axis rotation, uniform scale, clipped jitter; labels kept."""
    rng = np.random.default_rng(seed)
    pts = cloud.points.copy()
    for axis in (0, 1):
        if rng.random() < spec.flip_prob:
            pts[:, axis] = -pts[:, axis]
    angle = rng.uniform(0.0, spec.rotation_range) if spec.rotation_range > 0 else 0.0
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    pts = pts @ rot.T
    lo, hi = spec.scale_range
    pts = pts * rng.uniform(lo, hi)
    if spec.jitter_sigma > 0:
        jit = np.clip(rng.normal(scale=spec.jitter_sigma, size=pts.shape),
                      -spec.jitter_clip, spec.jitter_clip)
        pts = pts + jit
    return cloud.with_points(pts)


# --------------------------------------------------------------------------
# dataset persistence: directory of PCSB files plus a JSON manifest


def save_dataset(directory, scenes: list[LabeledCloud], profile: DomainProfile,
                 seed: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:04d}.pcsb"
        save_cloud(scene, directory / name, format="binary")
        entries.append({"file": name, "frame_id": scene.frame_id,
                        "points": len(scene)})
    manifest = {"seed": seed, "profile": asdict(profile), "scenes": entries}
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_dataset(directory) -> list[LabeledCloud]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path) as f:
            manifest = json.load(f)
        files = [e["file"] for e in manifest["scenes"]]
    else:
        files = sorted(p.name for p in directory.glob("*.pcsb"))
    return [load_cloud(directory / name) for name in files]
