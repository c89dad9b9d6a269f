"""Deterministic 2D driving world: towns, vehicle, cameras, expert, episodes.

Towns are road graphs of straight lane segments. The vehicle follows bicycle
kinematics at a fixed cruise speed; observations are bird's-eye grayscale
strips of the road ahead rendered under a named condition preset. The expert
is a pure-pursuit tracker on the route polyline. Steering is positive to the
right, headings are CCW radians wrapped to (-pi, pi].
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .seeding import substream

DT = 0.1
WHEELBASE = 2.5
MAX_WHEEL_ANGLE = np.deg2rad(30.0)
CRUISE_SPEED = 5.0
SPEED_TAU = 1.0
LANE_HALF_WIDTH = 2.5
MARKING_HALF_WIDTH = 0.18
LOOKAHEAD = 5.0
COMMAND_RADIUS = 12.0
EXPERT_LOST_DISTANCE = 10.0
EXPERT_MAX_STEERING = 0.8  # the autopilot keeps a lock margin; it never
                           # produces the extreme labels the pipeline filters
SIDE_CAMERA_YAW = np.deg2rad(30.0)
SIDE_CAMERA_OFFSET = 0.4
SIDE_LABEL_CORRECTION = 0.15

IMAGE_SHAPE = (48, 64)
VIEW_NEAR = 0.5
VIEW_FAR = 16.5
VIEW_HALF_WIDTH = 8.0
SHADE_OFFROAD = 0.12
SHADE_ROAD = 0.55
SHADE_MARKING = 1.0
EDGE_SOFTNESS = 0.25

# turn labeling thresholds on the route direction change at a node
STRAIGHT_MAX = np.deg2rad(50.0)
UTURN_MIN = np.deg2rad(150.0)


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = (a + np.pi) % (2.0 * np.pi) - np.pi
    return float(a if a > -np.pi else np.pi)


@dataclass
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float = CRUISE_SPEED
    steering: float = 0.0
    t: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class RenderCondition:
    name: str
    brightness: float
    noise_sigma: float
    contrast: float


CONDITIONS = {
    "noonClear": RenderCondition("noonClear", 1.0, 0.0, 1.0),
    "sunsetClear": RenderCondition("sunsetClear", 0.7, 0.0, 0.9),
    "rainNoon": RenderCondition("rainNoon", 0.9, 0.05, 0.85),
    "cloudySunset": RenderCondition("cloudySunset", 0.55, 0.02, 0.8),
}
TRAIN_CONDITIONS = ("noonClear", "sunsetClear")
NEW_CONDITIONS = ("rainNoon", "cloudySunset")


class TownError(RuntimeError):
    pass


class ExpertLostError(RuntimeError):
    """Vehicle drifted beyond the expert's recovery envelope."""


class TownMap:
    """Road graph: node positions plus undirected adjacency (drivable both ways)."""

    def __init__(self, kind: str, seed: int, nodes: dict[int, np.ndarray],
                 edges: list[tuple[int, int]]):
        self.kind = kind
        self.seed = seed
        self.nodes = {k: np.asarray(v, dtype=np.float64) for k, v in nodes.items()}
        self.adjacency: dict[int, list[int]] = {k: [] for k in nodes}
        for a, b in edges:
            self.adjacency[a].append(b)
            self.adjacency[b].append(a)
        for k in self.adjacency:
            self.adjacency[k].sort()
        self._segments = np.array([[*self.nodes[a], *self.nodes[b]]
                                   for a, b in edges])
        self._check_connected()

    def _check_connected(self) -> None:
        start = next(iter(self.nodes))
        seen = {start}
        stack = [start]
        while stack:
            for nb in self.adjacency[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if seen != set(self.nodes):
            raise TownError(f"town {self.kind}/{self.seed} is not connected")

    @property
    def segments(self) -> np.ndarray:
        """(S, 4) array of [x0, y0, x1, y1] lane centerlines."""
        return self._segments

    def intersections(self) -> list[int]:
        """Nodes where a command applies: degree >= 3, or degree-2 corners."""
        out = []
        for node, nbrs in self.adjacency.items():
            if len(nbrs) >= 3:
                out.append(node)
            elif len(nbrs) == 2:
                a, b = nbrs
                h_in = _heading(self.nodes[a], self.nodes[node])
                h_out = _heading(self.nodes[node], self.nodes[b])
                if abs(wrap_angle(h_out - h_in)) > STRAIGHT_MAX:
                    out.append(node)
        return out

    def turn_label(self, prev: int, node: int, nxt: int) -> str | None:
        """Command for taking the prev->node->nxt corner; None for a U-turn."""
        h_in = _heading(self.nodes[prev], self.nodes[node])
        h_out = _heading(self.nodes[node], self.nodes[nxt])
        d = wrap_angle(h_out - h_in)
        if abs(d) >= UTURN_MIN:
            return None
        if abs(d) <= STRAIGHT_MAX:
            return "straight"
        return "left" if d > 0 else "right"

    def mirrored(self) -> "TownMap":
        """Reflection across the x axis (for symmetry checks)."""
        nodes = {k: np.array([v[0], -v[1]]) for k, v in self.nodes.items()}
        edges = []
        seen = set()
        for a, nbrs in self.adjacency.items():
            for b in nbrs:
                if (b, a) not in seen:
                    seen.add((a, b))
                    edges.append((a, b))
        return TownMap(self.kind, self.seed, nodes, edges)


def _heading(p: np.ndarray, q: np.ndarray) -> float:
    d = q - p
    return float(np.arctan2(d[1], d[0]))


def build_town(kind: str, seed: int) -> TownMap:
    """Town-A: jittered street grid. Town-B: octagon ring + inner square + spokes."""
    if kind == "A":
        rng = substream(seed, "town", "A")
        cols, rows, spacing = 4, 3, 40.0
        nodes = {}
        for r in range(rows):
            for c in range(cols):
                jitter = rng.uniform(-3.0, 3.0, size=2)
                nodes[r * cols + c] = np.array([c * spacing, r * spacing]) + jitter
        edges = []
        for r in range(rows):
            for c in range(cols):
                n = r * cols + c
                if c + 1 < cols:
                    edges.append((n, n + 1))
                if r + 1 < rows:
                    edges.append((n, n + cols))
        return TownMap("A", seed, nodes, edges)
    if kind == "B":
        rng = substream(seed, "town", "B")
        r_out = 52.0 + rng.uniform(0.0, 6.0)
        r_in = 20.0 + rng.uniform(0.0, 4.0)
        phase = rng.uniform(-0.05, 0.05)
        nodes = {}
        for k in range(8):
            a = phase + np.deg2rad(45.0 * k)
            nodes[k] = r_out * np.array([np.cos(a), np.sin(a)])
        for k in range(4):
            a = phase + np.deg2rad(45.0 + 90.0 * k)
            nodes[8 + k] = r_in * np.array([np.cos(a), np.sin(a)])
        edges = [(k, (k + 1) % 8) for k in range(8)]
        edges += [(8 + k, 8 + (k + 1) % 4) for k in range(4)]
        edges += [(8 + k, 1 + 2 * k) for k in range(4)]  # radial spokes
        return TownMap("B", seed, nodes, edges)
    raise ValueError(f"unknown town kind {kind!r}, expected 'A' or 'B'")


@dataclass
class Route:
    """Polyline through the town plus per-node command annotations."""
    points: np.ndarray                       # (P, 2)
    commands: list = field(default_factory=list)  # [(point_index, command)]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        seg = np.diff(self.points, axis=0)
        self._seg_len = np.linalg.norm(seg, axis=1)
        self.cum = np.concatenate([[0.0], np.cumsum(self._seg_len)])

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def point_at(self, s: float) -> np.ndarray:
        s = float(np.clip(s, 0.0, self.length))
        i = int(np.searchsorted(self.cum, s, side="right")) - 1
        i = min(max(i, 0), len(self._seg_len) - 1)
        f = (s - self.cum[i]) / max(self._seg_len[i], 1e-12)
        return self.points[i] + f * (self.points[i + 1] - self.points[i])

    def initial_heading(self) -> float:
        return _heading(self.points[0], self.points[1])

    def progress(self, pos: np.ndarray, last_s: float) -> tuple[float, float]:
        """(arclength, distance) of the closest polyline point at or after last_s."""
        p0 = self.points[:-1]
        d = self.points[1:] - p0
        l2 = np.maximum((d * d).sum(axis=1), 1e-12)
        t = np.clip(((pos - p0) * d).sum(axis=1) / l2, 0.0, 1.0)
        proj = p0 + t[:, None] * d
        dist = np.linalg.norm(pos - proj, axis=1)
        s = self.cum[:-1] + t * self._seg_len
        ok = s >= last_s - 2.0
        if not np.any(ok):
            return last_s, float(dist.min())
        idx = np.flatnonzero(ok)[np.argmin(dist[ok])]
        return float(max(s[idx], last_s)), float(dist[idx])

    def mirrored(self) -> "Route":
        pts = self.points.copy()
        pts[:, 1] *= -1.0
        flipped = {"left": "right", "right": "left"}
        cmds = [(i, flipped.get(c, c)) for i, c in self.commands]
        return Route(pts, cmds)


def node_route(town: TownMap, node_ids: list[int],
               start: np.ndarray | None = None,
               goal: np.ndarray | None = None) -> Route:
    """Route through town nodes, annotating commands at every intersection."""
    pts = [town.nodes[n] for n in node_ids]
    offset = 0
    if start is not None:
        pts = [np.asarray(start, dtype=np.float64)] + pts
        offset = 1
    if goal is not None:
        pts = pts + [np.asarray(goal, dtype=np.float64)]
    pts = np.array(pts)
    inters = set(town.intersections())
    commands = []
    for k, node in enumerate(node_ids):
        if node not in inters:
            continue
        pi = k + offset
        if pi == 0 or pi == len(pts) - 1:
            continue
        h_in = _heading(pts[pi - 1], pts[pi])
        h_out = _heading(pts[pi], pts[pi + 1])
        d = wrap_angle(h_out - h_in)
        if abs(d) <= STRAIGHT_MAX:
            cmd = "straight"
        elif d > 0:
            cmd = "left"
        else:
            cmd = "right"
        commands.append((pi, cmd))
    return Route(pts, commands)


def command_at(route: Route, pos: np.ndarray, progress_s: float) -> str:
    """Labeled command when within 12 m of the next intersection, else follow."""
    for pi, cmd in route.commands:
        node_s = route.cum[pi]
        dist = float(np.linalg.norm(pos - route.points[pi]))
        if node_s < progress_s and dist > COMMAND_RADIUS:
            continue  # this intersection is fully behind us
        if dist <= COMMAND_RADIUS:
            return cmd  # active until 12 m past the node, so the whole
            # turn (entry, apex, and settling) carries the turn command
        break
    return "follow"


def step_vehicle(state: VehicleState, steering: float, dt: float = DT) -> VehicleState:
    """Kinematic bicycle step; positive steering turns right."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = float(np.clip(steering, -1.0, 1.0))
    delta = -s * MAX_WHEEL_ANGLE
    x = state.x + state.speed * np.cos(state.heading) * dt
    y = state.y + state.speed * np.sin(state.heading) * dt
    heading = wrap_angle(state.heading + state.speed * np.tan(delta) / WHEELBASE * dt)
    speed = state.speed + (CRUISE_SPEED - state.speed) * dt / SPEED_TAU
    return VehicleState(x, y, heading, speed, s, state.t + dt)


def expert_control(route: Route, state: VehicleState,
                   progress_s: float | None = None) -> float:
    """Pure-pursuit steering toward a point 5 m ahead along the route."""
    pos = state.position
    if progress_s is None:
        progress_s, dist = route.progress(pos, 0.0)
    else:
        progress_s, dist = route.progress(pos, progress_s)
    if dist > EXPERT_LOST_DISTANCE:
        raise ExpertLostError(f"vehicle {dist:.1f} m from route")
    target = route.point_at(progress_s + LOOKAHEAD)
    rel = target - pos
    fwd = np.array([np.cos(state.heading), np.sin(state.heading)])
    left = np.array([-fwd[1], fwd[0]])
    lx, ly = float(rel @ fwd), float(rel @ left)
    ld = max(np.hypot(lx, ly), 1e-6)
    alpha = np.arctan2(ly, lx)
    curvature = 2.0 * np.sin(alpha) / ld
    delta = np.arctan(curvature * WHEELBASE)
    return float(np.clip(-delta / MAX_WHEEL_ANGLE,
                         -EXPERT_MAX_STEERING, EXPERT_MAX_STEERING))


def distance_to_road(town: TownMap, pos: np.ndarray) -> float:
    seg = town.segments
    p0 = seg[:, 0:2]
    d = seg[:, 2:4] - p0
    l2 = np.maximum((d * d).sum(axis=1), 1e-12)
    t = np.clip(((pos - p0) * d).sum(axis=1) / l2, 0.0, 1.0)
    proj = p0 + t[:, None] * d
    return float(np.linalg.norm(pos - proj, axis=1).min())


CAMERAS = ("front", "left", "right")


def render_camera(town: TownMap, state: VehicleState, camera: str,
                  condition: RenderCondition,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """48x64 grayscale bird's-eye strip ahead of the camera pose, in [0, 1]."""
    if camera not in CAMERAS:
        raise ValueError(f"unknown camera {camera!r}")
    yaw = {"front": 0.0, "left": SIDE_CAMERA_YAW, "right": -SIDE_CAMERA_YAW}[camera]
    lat = {"front": 0.0, "left": SIDE_CAMERA_OFFSET, "right": -SIDE_CAMERA_OFFSET}[camera]
    heading = state.heading + yaw
    fwd = np.array([np.cos(heading), np.sin(heading)])
    left = np.array([-fwd[1], fwd[0]])
    base_left = np.array([-np.sin(state.heading), np.cos(state.heading)])
    origin = state.position + lat * base_left

    h, w = IMAGE_SHAPE
    ahead = VIEW_FAR - (VIEW_FAR - VIEW_NEAR) * (np.arange(h) + 0.5) / h
    lateral = VIEW_HALF_WIDTH - 2.0 * VIEW_HALF_WIDTH * (np.arange(w) + 0.5) / w
    pts = (origin[None, None, :]
           + ahead[:, None, None] * fwd[None, None, :]
           + lateral[None, :, None] * left[None, None, :]).reshape(-1, 2)

    seg = town.segments
    p0 = seg[:, 0:2]
    d = seg[:, 2:4] - p0
    l2 = np.maximum((d * d).sum(axis=1), 1e-12)
    # only segments that can enter the viewport matter for these pixels
    t0 = np.clip(((origin - p0) * d).sum(axis=1) / l2, 0.0, 1.0)
    seg_dist = np.linalg.norm(origin - (p0 + t0[:, None] * d), axis=1)
    near = seg_dist <= VIEW_FAR + VIEW_HALF_WIDTH + LANE_HALF_WIDTH + 1.0
    if not np.any(near):
        near[np.argmin(seg_dist)] = True
    p0, d, l2 = p0[near], d[near], l2[near]
    rel = pts[:, None, :] - p0[None, :, :]
    t = np.clip((rel * d[None, :, :]).sum(axis=2) / l2[None, :], 0.0, 1.0)
    proj = p0[None, :, :] + t[:, :, None] * d[None, :, :]
    dist = np.linalg.norm(pts[:, None, :] - proj, axis=2).min(axis=1)

    road = np.clip((LANE_HALF_WIDTH - dist) / EDGE_SOFTNESS + 0.5, 0.0, 1.0)
    mark = np.clip((MARKING_HALF_WIDTH - dist) / EDGE_SOFTNESS + 0.5, 0.0, 1.0)
    img = (SHADE_OFFROAD + (SHADE_ROAD - SHADE_OFFROAD) * road
           + (SHADE_MARKING - SHADE_ROAD) * mark).reshape(h, w)

    img = (img - 0.5) * condition.contrast + 0.5
    img = img * condition.brightness
    if condition.noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noisy condition requires an rng")
        img = img + rng.normal(0.0, condition.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass
class NoisePulse:
    start: float
    duration: float
    peak: float

    def offset(self, t: float) -> float:
        if not self.start <= t <= self.start + self.duration:
            return 0.0
        frac = 1.0 - abs(2.0 * (t - self.start) / self.duration - 1.0)
        return self.peak * frac


@dataclass
class NoiseSchedule:
    pulses: list

    def offset(self, t: float) -> float:
        return sum(p.offset(t) for p in self.pulses)


def make_noise_schedule(rng: np.random.Generator, duration: float,
                        pulses_per_minute: float = 2.0,
                        pulse_duration: float = 1.5) -> NoiseSchedule:
    """Non-overlapping triangular steering pulses with alternating signs."""
    n = max(1, int(round(pulses_per_minute * duration / 60.0)))
    sign = 1.0 if rng.random() < 0.5 else -1.0
    pulses = []
    slot = duration / n
    for k in range(n):
        lo = k * slot + 1.0
        hi = (k + 1) * slot - pulse_duration - 1.0
        if hi <= lo:
            continue
        start = rng.uniform(lo, hi)
        peak = sign * rng.uniform(0.2, 0.5)
        pulses.append(NoisePulse(start, pulse_duration, peak))
        sign = -sign
    return NoiseSchedule(pulses)


def inject_noise(schedule: NoiseSchedule | None, t: float, steering: float) -> float:
    if schedule is None:
        return steering
    return float(np.clip(steering + schedule.offset(t), -1.0, 1.0))


@dataclass
class Frame:
    t: float
    state: VehicleState
    command: str
    images: dict
    labels: dict
    executed: float


@dataclass
class EpisodeLog:
    town_kind: str
    condition: str
    seed: int
    frames: list
    termination: str   # goal | timeout | offroad | lost
    elapsed: float


def initial_state(route: Route) -> VehicleState:
    p = route.points[0]
    return VehicleState(float(p[0]), float(p[1]), route.initial_heading())


def run_episode(town: TownMap, route: Route, condition: RenderCondition,
                seed: int, policy=None, noise: NoiseSchedule | None = None,
                duration: float = 60.0, cameras=("front",),
                record_images: bool = True, goal_radius: float = 2.0,
                offroad_limit: float = 1.5, offroad_time: float = 2.0,
                dt: float = DT) -> EpisodeLog:
    """Closed-loop rollout at 10 Hz.

    policy=None drives with the expert (labels recorded for every camera,
    optional steering-noise injection on the executed control). A policy is
    a callable (front_image, command) -> steering and sees no noise.
    """
    state = initial_state(route)
    frames: list[Frame] = []
    progress = 0.0
    offroad_clock = 0.0
    termination = "timeout"
    n_steps = int(round(duration / dt))
    for k in range(n_steps):
        pos = state.position
        progress, route_dist = route.progress(pos, progress)
        command = command_at(route, pos, progress)

        images = {}
        for cam in cameras:
            rng = substream(seed, "render", f"f{k}", cam)
            images[cam] = render_camera(town, state, cam, condition, rng)

        if policy is None:
            if route_dist > EXPERT_LOST_DISTANCE:
                termination = "lost"
                break
            expert = expert_control(route, state, progress)
            labels = {"front": expert,
                      "left": float(np.clip(expert + SIDE_LABEL_CORRECTION, -1, 1)),
                      "right": float(np.clip(expert - SIDE_LABEL_CORRECTION, -1, 1))}
            executed = inject_noise(noise, state.t, expert)
        else:
            out = policy(images["front"], command)
            if not np.isfinite(out):
                raise ValueError(f"policy produced non-finite steering at t={state.t:.1f}")
            labels = {}
            executed = float(np.clip(out, -1.0, 1.0))

        frames.append(Frame(state.t, replace(state), command,
                            images if record_images else {}, labels, executed))

        if np.linalg.norm(pos - route.points[-1]) <= goal_radius \
                and progress >= route.length - LOOKAHEAD:
            termination = "goal"
            break
        excursion = distance_to_road(town, pos) - LANE_HALF_WIDTH
        offroad_clock = offroad_clock + dt if excursion > offroad_limit else 0.0
        if offroad_clock >= offroad_time:
            termination = "offroad"
            break

        state = step_vehicle(state, executed, dt)
    return EpisodeLog(town.kind, condition.name, seed, frames, termination,
                      frames[-1].t + dt if frames else 0.0)


def random_route(town: TownMap, rng: np.random.Generator, min_length: float,
                 turn_bias: dict | None = None) -> Route:
    """Random walk through the town for data collection.

    turn_bias maps command -> relative weight when choosing the next node at
    an intersection; lowering one turn's weight starves that command's data.
    """
    bias = turn_bias or {}
    start = int(rng.choice(sorted(town.nodes)))
    prev = None
    node = start
    ids = [node]
    length = 0.0
    while length < min_length:
        options = [nb for nb in town.adjacency[node] if nb != prev]
        if not options:
            options = list(town.adjacency[node])
        if prev is None:
            nxt = int(rng.choice(options))
        else:
            weights = []
            for nb in options:
                label = town.turn_label(prev, node, nb)
                weights.append(bias.get(label, 1.0) if label else 0.0)
            w = np.asarray(weights, dtype=np.float64)
            if w.sum() <= 0.0:
                w = np.ones(len(options))
            nxt = int(rng.choice(options, p=w / w.sum()))
        length += float(np.linalg.norm(town.nodes[nxt] - town.nodes[node]))
        prev, node = node, nxt
        ids.append(node)
    return node_route(town, ids)
