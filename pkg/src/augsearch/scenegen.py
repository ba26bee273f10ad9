"""Analytic depth renderer, scene sampling, and expert demonstrations.

The world is a table plane with two walls, a cube resting on the table, and
an optional spherical end-effector marker. Scenes render through a pinhole
camera into depth/segmentation frames; labels (cube position) are expressed
in the world frame so all viewpoints of one scene share one label.

The pseudo-real domain is produced by passing rendered frames through a
fixed distortion pipeline whose default parameters live in a module-private
constant; the search side of the pipeline never imports it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .depth_core import (
    Dataset,
    DepthFrame,
    DomainTag,
    LabeledFrame,
    SegClass,
    Z_MAX,
    make_frame,
)
from .rng import Rng
from .transforms import _dilate_chebyshev

__all__ = [
    "WORKSPACE_HALF",
    "CUBE_SIZE_RANGE",
    "CAMERA_YAW_RANGE",
    "CAMERA_PITCH_RANGE",
    "CAMERA_DISTANCE_RANGE",
    "WALL_BACK_Y",
    "WALL_SIDE_X",
    "EFFECTOR_RADIUS",
    "VFOV_DEG",
    "CONTROL_DT",
    "MAX_SPEED",
    "GRASP_RADIUS",
    "MAX_EPISODE_STEPS",
    "CameraPose",
    "Scene",
    "Action",
    "Demonstration",
    "DistortionProfile",
    "sample_scene",
    "sample_camera",
    "render",
    "distort_pseudo_real",
    "make_dataset",
    "observe",
    "scripted_expert",
    "expert_action",
    "run_episode",
    "sample_episode_scene",
]

# Workspace: objects allocated within a 0.60 x 0.60 m square around the
# origin, on a table at z = table_height. Cube edge between 3 and 9 cm.
WORKSPACE_HALF = 0.30
CUBE_SIZE_RANGE = (0.03, 0.09)

# Camera viewpoint randomization around the frontal view.
CAMERA_YAW_RANGE = (-15.0, 15.0)
CAMERA_PITCH_RANGE = (15.0, 30.0)
CAMERA_DISTANCE_RANGE = (1.35, 1.50)
VFOV_DEG = 60.0

# Room geometry: back wall faces the camera, side wall on the left.
WALL_BACK_Y = 0.45
WALL_SIDE_X = -0.45
# Effector marker, sized like the bulk of a multi-finger gripper. A 2 cm
# sphere subtends under two pixels at the default 64 px resolution, leaving
# policy observations blind to the hand; 6 cm is reliably visible (~5 px).
EFFECTOR_RADIUS = 0.06

# Control loop: 10 Hz, end-effector speed cap, grasp trigger distance.
CONTROL_DT = 0.1
MAX_SPEED = 0.10
EXPERT_GAIN = 2.0
GRASP_RADIUS = 0.03
MAX_EPISODE_STEPS = 100

# The effector cannot pass through the table or leave the reachable box;
# rollouts clamp positions the same way a real arm controller would.
EFFECTOR_XY_LIMIT = 0.45
EFFECTOR_Z_RANGE = (0.01, 0.60)


@dataclass(frozen=True)
class CameraPose:
    yaw_deg: float
    pitch_deg: float
    distance: float


@dataclass(frozen=True)
class Scene:
    cube_center: np.ndarray  # 3-vector, meters, world frame
    cube_size: float
    camera: CameraPose
    table_height: float = 0.0
    effector_pos: np.ndarray | None = None


@dataclass(frozen=True)
class Action:
    linear_velocity: np.ndarray  # m/s
    angular_velocity: np.ndarray  # rad/s
    gripper: int  # 0 open, 1 closed


@dataclass(frozen=True)
class Demonstration:
    """Expert trajectory: (3-frame observation stack, action) per step."""

    steps: list[tuple[tuple[DepthFrame, DepthFrame, DepthFrame], Action]]


def sample_camera(rng: Rng) -> CameraPose:
    return CameraPose(
        yaw_deg=rng.uniform(*CAMERA_YAW_RANGE),
        pitch_deg=rng.uniform(*CAMERA_PITCH_RANGE),
        distance=rng.uniform(*CAMERA_DISTANCE_RANGE),
    )


def sample_scene(rng: Rng, with_effector: bool = False, table_height: float = 0.0) -> Scene:
    """Draw a scene uniformly from the invariant ranges.

    Draw order: cube x, cube y, cube size, camera yaw, pitch, distance, then
    (when requested) effector x, y, height.
    """
    cx = rng.uniform(-WORKSPACE_HALF, WORKSPACE_HALF)
    cy = rng.uniform(-WORKSPACE_HALF, WORKSPACE_HALF)
    size = rng.uniform(*CUBE_SIZE_RANGE)
    camera = sample_camera(rng)
    effector = None
    if with_effector:
        ex = rng.uniform(-WORKSPACE_HALF, WORKSPACE_HALF)
        ey = rng.uniform(-WORKSPACE_HALF, WORKSPACE_HALF)
        ez = table_height + rng.uniform(0.05, 0.30)
        effector = np.array([ex, ey, ez])
    center = np.array([cx, cy, table_height + size / 2.0])
    return Scene(
        cube_center=center,
        cube_size=size,
        camera=camera,
        table_height=table_height,
        effector_pos=effector,
    )


def _camera_frame(scene: Scene):
    """Eye position and orthonormal (forward, right, up) basis."""
    yaw = math.radians(scene.camera.yaw_deg)
    pitch = math.radians(scene.camera.pitch_deg)
    d = scene.camera.distance
    target = np.array([0.0, 0.0, scene.table_height])
    eye = target + d * np.array(
        [math.cos(pitch) * math.sin(yaw), -math.cos(pitch) * math.cos(yaw), math.sin(pitch)]
    )
    forward = target - eye
    forward /= np.linalg.norm(forward)
    world_up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, world_up)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return eye, forward, right, up


def _pixel_rays(scene: Scene, width: int, height: int):
    """Unit ray directions through pixel centers, shape (H, W, 3)."""
    eye, forward, right, up = _camera_frame(scene)
    focal = (height / 2.0) / math.tan(math.radians(VFOV_DEG) / 2.0)
    cols = (np.arange(width) + 0.5 - width / 2.0) / focal
    rows = (np.arange(height) + 0.5 - height / 2.0) / focal
    u, v = np.meshgrid(cols, rows)
    dirs = forward[None, None, :] + u[..., None] * right[None, None, :] - v[..., None] * up[None, None, :]
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return eye, dirs


_EPS = 1e-9


def _plane_hits(eye, dirs, axis: int, value: float) -> np.ndarray:
    denom = dirs[..., axis]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (value - eye[axis]) / denom
    t = np.where((np.abs(denom) > _EPS) & (t > _EPS), t, np.inf)
    return t


def _box_hits(eye, dirs, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slab-method entry distance into an axis-aligned box, inf on miss."""
    t_near = np.full(dirs.shape[:-1], -np.inf)
    t_far = np.full(dirs.shape[:-1], np.inf)
    for ax in range(3):
        d = dirs[..., ax]
        parallel = np.abs(d) <= _EPS
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[ax] - eye[ax]) / d
            t2 = (hi[ax] - eye[ax]) / d
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        inside_slab = (eye[ax] >= lo[ax]) & (eye[ax] <= hi[ax])
        tmin = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), tmin)
        tmax = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), tmax)
        t_near = np.maximum(t_near, tmin)
        t_far = np.minimum(t_far, tmax)
    hit = (t_near <= t_far) & (t_far > _EPS) & (t_near > _EPS)
    return np.where(hit, t_near, np.inf)


def _sphere_hits(eye, dirs, center: np.ndarray, radius: float) -> np.ndarray:
    oc = eye - center
    b = np.einsum("...k,k->...", dirs, oc)
    c = float(oc @ oc - radius * radius)
    disc = b * b - c
    sqrt_disc = np.sqrt(np.maximum(disc, 0.0))
    t = -b - sqrt_disc
    return np.where((disc >= 0.0) & (t > _EPS), t, np.inf)


def render(scene: Scene, width: int, height: int) -> LabeledFrame:
    """Render per-pixel nearest analytic intersections into a labeled frame.

    Misses get depth 1.0 / Background; hits get distance / Z_MAX clamped to
    [0, 1] and the class of the nearest surface.
    """
    eye, dirs = _pixel_rays(scene, width, height)
    half = scene.cube_size / 2.0
    lo = scene.cube_center - half
    hi = scene.cube_center + half
    candidates = [
        (_plane_hits(eye, dirs, 2, scene.table_height), SegClass.Table),
        (_plane_hits(eye, dirs, 1, WALL_BACK_Y), SegClass.Wall),
        (_plane_hits(eye, dirs, 0, WALL_SIDE_X), SegClass.Wall),
        (_box_hits(eye, dirs, lo, hi), SegClass.Cube),
    ]
    if scene.effector_pos is not None:
        candidates.append(
            (_sphere_hits(eye, dirs, scene.effector_pos, EFFECTOR_RADIUS), SegClass.Effector)
        )
    ts = np.stack([t for t, _ in candidates])
    classes = np.array([int(c) for _, c in candidates], dtype=np.uint8)
    nearest = np.argmin(ts, axis=0)
    t_best = np.take_along_axis(ts, nearest[None, ...], axis=0)[0]
    mask = classes[nearest]
    missed = ~np.isfinite(t_best)
    mask[missed] = np.uint8(SegClass.Background)
    depth = np.where(missed, 1.0, np.clip(t_best / Z_MAX, 0.0, 1.0))
    frame = make_frame(depth.astype(np.float32), mask)
    return LabeledFrame(frame=frame, cube_position=scene.cube_center.copy())


# ---------------------------------------------------------------------------
# Pseudo-real distortion.


@dataclass(frozen=True)
class DistortionProfile:
    """Parameters of the sim-to-pseudo-real distortion pipeline.

    A zero value disables the corresponding stage, so the all-zero profile
    is the identity.
    """

    edge_shadow_radius: int
    quantization_bits: int
    bias_amplitude: float
    gaussian_sigma: float
    dead_pixel_rate: float


_DEPTH_EDGE_THRESHOLD = 0.05


def _bilinear_field(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    g = grid.shape[0]
    r = np.linspace(0.0, g - 1.0, height)
    c = np.linspace(0.0, g - 1.0, width)
    r0 = np.clip(np.floor(r).astype(int), 0, g - 2)
    c0 = np.clip(np.floor(c).astype(int), 0, g - 2)
    fr = (r - r0)[:, None]
    fc = (c - c0)[None, :]
    tl = grid[np.ix_(r0, c0)]
    tr = grid[np.ix_(r0, c0 + 1)]
    bl = grid[np.ix_(r0 + 1, c0)]
    br = grid[np.ix_(r0 + 1, c0 + 1)]
    return (1 - fr) * ((1 - fc) * tl + fc * tr) + fr * ((1 - fc) * bl + fc * br)


def distort_pseudo_real(item: LabeledFrame, profile: DistortionProfile, rng: Rng) -> LabeledFrame:
    """Apply the distortion stages in order: edge shadows, quantization,
    bias field, Gaussian noise, dead pixels.

    Draws (each only when its stage is enabled): 4x4 bias grid, Gaussian
    noise array, dead-pixel uniform array. The mask is carried through
    untouched for bookkeeping; consumers of pseudo-real data must not use it.
    """
    depth = item.frame.depth2d().astype(np.float64)
    h, w = depth.shape
    if profile.edge_shadow_radius > 0:
        edge = np.zeros(depth.shape, dtype=bool)
        jump_v = np.abs(depth[1:, :] - depth[:-1, :]) > _DEPTH_EDGE_THRESHOLD
        jump_h = np.abs(depth[:, 1:] - depth[:, :-1]) > _DEPTH_EDGE_THRESHOLD
        edge[1:, :] |= jump_v
        edge[:-1, :] |= jump_v
        edge[:, 1:] |= jump_h
        edge[:, :-1] |= jump_h
        depth[_dilate_chebyshev(edge, profile.edge_shadow_radius)] = 1.0
    if profile.quantization_bits > 0:
        levels = (1 << profile.quantization_bits) - 1
        depth = np.rint(depth * levels) / levels
    if profile.bias_amplitude > 0:
        grid = rng.uniform(-profile.bias_amplitude, profile.bias_amplitude, (4, 4))
        depth = depth + _bilinear_field(grid, h, w)
    if profile.gaussian_sigma > 0:
        depth = depth + rng.normal(profile.gaussian_sigma, depth.shape)
    if profile.dead_pixel_rate > 0:
        dead = rng.random(depth.shape) < profile.dead_pixel_rate
        depth[dead] = 1.0
    frame = make_frame(depth, item.frame.mask2d())
    return LabeledFrame(frame=frame, cube_position=item.cube_position.copy())


def _hidden_profile() -> DistortionProfile:
    # Deferred import keeps the constant out of this module's namespace.
    from . import _pseudo_real_gap

    return _pseudo_real_gap.DEFAULT_PROFILE


def observe(scene: Scene, domain: DomainTag, width: int, height: int, rng: Rng | None) -> LabeledFrame:
    """Render a scene in the given domain (PseudoReal adds the hidden gap)."""
    item = render(scene, width, height)
    if domain == DomainTag.PseudoReal:
        if rng is None:
            raise ValueError("PseudoReal observation requires an rng")
        item = distort_pseudo_real(item, _hidden_profile(), rng)
    return item


def make_dataset(
    n_scenes: int,
    views_per_scene: int,
    domain: DomainTag,
    size: int,
    seed: int,
) -> Dataset:
    """Generate n_scenes x views_per_scene labeled frames, scene-major order.

    Each view redraws the camera only; the cube placement (and therefore the
    label) is shared across the views of one scene.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    root = Rng(seed)
    items = []
    for i in range(n_scenes):
        scene_rng = root.split("scene", i)
        scene = sample_scene(scene_rng)
        for j in range(views_per_scene):
            view = replace(scene, camera=sample_camera(scene_rng))
            rng = root.split("distort", i, j) if domain == DomainTag.PseudoReal else None
            items.append(observe(view, domain, size, size, rng))
    return Dataset(items=items, domain_tag=domain, seed=seed)


# ---------------------------------------------------------------------------
# Closed-loop episodes: scripted expert and policy rollouts.


def expert_action(effector_pos: np.ndarray, cube_center: np.ndarray) -> Action:
    """Proportional reach controller: head for the cube, close when near."""
    delta = cube_center - effector_pos
    dist = float(np.linalg.norm(delta))
    v = EXPERT_GAIN * delta
    speed = float(np.linalg.norm(v))
    if speed > MAX_SPEED:
        v = v * (MAX_SPEED / speed)
    return Action(
        linear_velocity=v,
        angular_velocity=np.zeros(3),
        gripper=1 if dist < GRASP_RADIUS else 0,
    )


def sample_episode_scene(
    rng: Rng,
    min_start_dist: float = GRASP_RADIUS,
    max_start_dist: float = 0.55,
) -> Scene:
    """Scene with an effector start between min and max distance from the cube.

    The lower bound keeps starts outside the grasp radius while covering the
    near-cube regime; the upper bound keeps the reach feasible well inside
    the episode step limit even under demo execution noise.
    """
    while True:
        scene = sample_scene(rng, with_effector=True)
        dist = np.linalg.norm(scene.effector_pos - scene.cube_center)
        if min_start_dist <= dist <= max_start_dist:
            return scene


def run_episode(
    scene: Scene,
    policy,
    domain: DomainTag,
    width: int,
    height: int,
    rng: Rng | None = None,
    record: bool = False,
    execution_noise: float = 0.0,
    noise_rng: Rng | None = None,
):
    """Step the reach task at 10 Hz until the gripper closes or time runs out.

    `policy(obs_stack, effector_pos, cube_center) -> Action`; the observation
    stack is the three most recent frames (earliest first), the first frame
    repeated while history is short. Velocities are clamped to MAX_SPEED and
    positions to the reachable box. With execution_noise > 0, zero-mean
    Gaussian velocity noise perturbs the executed motion (recorded actions
    stay clean), so recorded trajectories cover states off the controller's
    nominal path. Returns (steps, success): success means the gripper closed
    within GRASP_RADIUS of the cube center.
    """
    pos = scene.effector_pos.copy()
    history: list[DepthFrame] = []
    steps = []
    success = False
    for t in range(MAX_EPISODE_STEPS):
        current = replace(scene, effector_pos=pos.copy())
        frame_rng = rng.split("frame", t) if rng is not None else None
        frame = observe(current, domain, width, height, frame_rng).frame
        history.append(frame)
        stack = tuple(history[-3:]) if len(history) >= 3 else tuple(
            [history[0]] * (3 - len(history)) + history
        )
        action = policy(stack, pos.copy(), scene.cube_center)
        v = np.asarray(action.linear_velocity, dtype=np.float64)
        speed = float(np.linalg.norm(v))
        if speed > MAX_SPEED:
            v = v * (MAX_SPEED / speed)
            action = Action(linear_velocity=v, angular_velocity=action.angular_velocity, gripper=action.gripper)
        if record:
            steps.append((stack, action))
        if action.gripper == 1:
            success = float(np.linalg.norm(scene.cube_center - pos)) <= GRASP_RADIUS
            break
        executed = v
        if execution_noise > 0.0 and noise_rng is not None:
            executed = v + noise_rng.normal(execution_noise, 3)
        pos = pos + executed * CONTROL_DT
        pos[0] = np.clip(pos[0], -EFFECTOR_XY_LIMIT, EFFECTOR_XY_LIMIT)
        pos[1] = np.clip(pos[1], -EFFECTOR_XY_LIMIT, EFFECTOR_XY_LIMIT)
        pos[2] = np.clip(
            pos[2], scene.table_height + EFFECTOR_Z_RANGE[0], scene.table_height + EFFECTOR_Z_RANGE[1]
        )
    return steps, success


# Demonstrations are collected with mild execution noise so they show the
# controller correcting off-path states; cloning from noise-free
# straight-line trajectories fails closed loop (compounding drift).
DEMO_EXECUTION_NOISE = 0.025  # m/s


def scripted_expert(scene: Scene, rng: Rng | None = None, size: int = 64) -> Demonstration:
    """Roll the proportional controller out in simulation, recording pairs.

    The recorded actions are the controller's clean outputs; when an rng is
    given, the executed motion is perturbed with DEMO_EXECUTION_NOISE so the
    trajectory covers recovery states. Raises if the cube is not grasped
    within the step limit (possible only for invalid scenes).
    """
    def policy(stack, pos, cube):
        return expert_action(pos, cube)

    steps, success = run_episode(
        scene,
        policy,
        DomainTag.Sim,
        size,
        size,
        rng=None,
        record=True,
        execution_noise=DEMO_EXECUTION_NOISE if rng is not None else 0.0,
        noise_rng=rng,
    )
    if not success:
        raise RuntimeError("expert failed to reach the cube within the step limit")
    return Demonstration(steps=steps)
