"""Deterministic planar mobile-manipulation toy environment.

A unicycle base carries a 2-link arm. Tasks require driving near a target
and aligning the end effector, with an obstacle placed on the direct path
for the detour tasks so that two valid approach routes (left/right) exist.
Scripted experts for both routes provide inherently multimodal
demonstrations; drift/jitter disturbances stress open-loop execution.
"""

from __future__ import annotations

import gzip
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError

TASKS = ("reach_left_right", "pick_detour", "place")
OBS_DIM = 13
ACTION_DIM = 5
MAX_STEPS = 200

DT = 0.1
V_SCALE = 0.5        # m/s at |action| = 1
W_SCALE = 1.2        # rad/s
QDOT_SCALE = 1.5     # rad/s
GRIP_RATE = 1.0      # open-fraction per second
LINK_1 = 0.35
LINK_2 = 0.35
BASE_RADIUS = 0.1
OBSTACLE_RADIUS = 0.2
SUCCESS_RADIUS = 0.1
WORKSPACE = 5.0
STOP_DISTANCE = 0.4   # base parks this far from the target
DETOUR_CLEARANCE = 0.5  # tangent-steering radius around the obstacle center


@dataclass(frozen=True)
class DisturbanceConfig:
    kind: str = "none"  # none | drift | jitter
    magnitude: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("none", "drift", "jitter"):
            raise ConfigError(f"unknown disturbance kind {self.kind!r}")


@dataclass
class EnvState:
    task: str
    x: float
    y: float
    theta: float
    q1: float
    q2: float
    grip: float
    target: np.ndarray          # (2,)
    obstacle_center: np.ndarray  # (2,)
    obstacle_radius: float
    step: int = 0

    def base_pos(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def copy(self) -> "EnvState":
        return replace(self, target=self.target.copy(),
                       obstacle_center=self.obstacle_center.copy())


def _wrap_angle(a: float) -> float:
    return math.atan2(math.sin(a), math.cos(a))


def end_effector(state: EnvState) -> np.ndarray:
    """World position of the arm tip (forward kinematics)."""
    c, s = math.cos(state.theta), math.sin(state.theta)
    ex = LINK_1 * math.cos(state.q1) + LINK_2 * math.cos(state.q1 + state.q2)
    ey = LINK_1 * math.sin(state.q1) + LINK_2 * math.sin(state.q1 + state.q2)
    return np.array([state.x + c * ex - s * ey, state.y + s * ex + c * ey])


def observe(state: EnvState) -> np.ndarray:
    ee = end_effector(state)
    return np.array([
        state.x, state.y, state.theta,
        state.q1, state.q2, state.grip,
        ee[0], ee[1],
        state.target[0] - state.x, state.target[1] - state.y,
        state.obstacle_center[0] - state.x, state.obstacle_center[1] - state.y,
        state.step / MAX_STEPS,
    ])


def check_success(state: EnvState, radius: float = SUCCESS_RADIUS) -> bool:
    """End effector within ``radius`` of the target, gripper in goal state."""
    if float(np.linalg.norm(end_effector(state) - state.target)) >= radius:
        return False
    if state.task == "pick_detour":
        return state.grip <= 0.2
    if state.task == "place":
        return state.grip >= 0.8
    return True


def in_collision(state: EnvState) -> bool:
    gap = float(np.linalg.norm(state.base_pos() - state.obstacle_center))
    return gap < state.obstacle_radius + BASE_RADIUS


def final_error(state: EnvState) -> float:
    return float(np.linalg.norm(end_effector(state) - state.target))


class PlanarEnv:
    """Value-semantic state machine; fully determined by (task, seed, actions,
    disturbance config)."""

    def __init__(self, task: str, disturbance: DisturbanceConfig | None = None) -> None:
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}; options: {TASKS}")
        self.task = task
        self.disturbance = disturbance or DisturbanceConfig()
        self.state: EnvState | None = None
        self._drift_bias = np.zeros(2)
        self._jitter_rng: np.random.Generator | None = None

    def reset(self, seed: int):
        rng = np.random.default_rng([hash_task(self.task), seed])
        target = rng.uniform(-1.0, 1.0, size=2)
        dist = rng.uniform(1.5, 2.5)
        ang = rng.uniform(0.0, 2.0 * math.pi)
        base = target + dist * np.array([math.cos(ang), math.sin(ang)])
        heading = math.atan2(target[1] - base[1], target[0] - base[0])
        theta = _wrap_angle(heading + rng.uniform(-0.5, 0.5))
        q1 = rng.uniform(-0.3, 0.3)
        q2 = rng.uniform(0.8, 1.2)
        if self.task == "place":
            grip = 0.0
            obstacle = target + np.array([2.5, 2.5])  # far off the path
        else:
            grip = 1.0 if self.task == "pick_detour" else 0.5
            # Obstacle dead-center on the direct segment (so neither detour
            # side is geometrically preferred), clear of both the start pose
            # and the parking spot near the target.
            u_lo = 0.65 / dist
            u_hi = max(1.0 - 0.85 / dist, u_lo)
            u = float(np.clip(rng.uniform(0.35, 0.55), u_lo, u_hi))
            obstacle = base + u * (target - base)
        self.state = EnvState(
            task=self.task, x=float(base[0]), y=float(base[1]), theta=theta,
            q1=q1, q2=q2, grip=grip, target=target,
            obstacle_center=obstacle, obstacle_radius=OBSTACLE_RADIUS,
        )
        if self.disturbance.kind == "drift":
            drng = np.random.default_rng([self.disturbance.seed, seed])
            phi = drng.uniform(0.0, 2.0 * math.pi)
            self._drift_bias = self.disturbance.magnitude * np.array(
                [math.cos(phi), math.sin(phi)]
            )
        elif self.disturbance.kind == "jitter":
            self._jitter_rng = np.random.default_rng([self.disturbance.seed, seed])
        return self.state.copy(), observe(self.state)

    def step(self, action: np.ndarray):
        """Advance one tick. Returns (state, obs, done, success)."""
        if self.state is None:
            raise ConfigError("step() before reset()")
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        st = self.state
        v = a[0] * V_SCALE
        w = a[1] * W_SCALE
        dx = v * math.cos(st.theta) * DT
        dy = v * math.sin(st.theta) * DT
        if self.disturbance.kind == "drift":
            dx += self._drift_bias[0] * DT
            dy += self._drift_bias[1] * DT
        elif self.disturbance.kind == "jitter" and self._jitter_rng is not None:
            noise = self._jitter_rng.normal(0.0, self.disturbance.magnitude, size=2)
            dx += noise[0] * DT
            dy += noise[1] * DT
        st.x = float(np.clip(st.x + dx, -WORKSPACE, WORKSPACE))
        st.y = float(np.clip(st.y + dy, -WORKSPACE, WORKSPACE))
        st.theta = _wrap_angle(st.theta + w * DT)
        st.q1 = _wrap_angle(st.q1 + a[2] * QDOT_SCALE * DT)
        st.q2 = _wrap_angle(st.q2 + a[3] * QDOT_SCALE * DT)
        st.grip = float(np.clip(st.grip + a[4] * GRIP_RATE * DT, 0.0, 1.0))
        st.step += 1
        if in_collision(st):
            return st.copy(), observe(st), True, False
        success = check_success(st)
        done = success or st.step >= MAX_STEPS
        return st.copy(), observe(st), done, success


def hash_task(task: str) -> int:
    return TASKS.index(task) + 1


def simulate_chunk(state: EnvState, actions: np.ndarray) -> np.ndarray:
    """Kinematics-only preview of a (H, d) env-unit action sequence.

    Returns the (H, 2) base positions the chunk would visit from ``state``
    with no disturbance and no termination checks.
    """
    st = state.copy()
    out = np.empty((len(actions), 2))
    for j, action in enumerate(actions):
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        v = a[0] * V_SCALE
        w = a[1] * W_SCALE
        st.x += v * math.cos(st.theta) * DT
        st.y += v * math.sin(st.theta) * DT
        st.theta = _wrap_angle(st.theta + w * DT)
        out[j] = (st.x, st.y)
    return out


# ---------------------------------------------------------------------------
# Scripted experts
# ---------------------------------------------------------------------------


def choose_side(mode: str, state: EnvState | None = None,
                rng: np.random.Generator | None = None) -> int:
    """Resolve a detour side: +1 = left of the path direction, -1 = right."""
    if mode == "left":
        return 1
    if mode == "right":
        return -1
    if mode == "auto":
        if rng is None:
            raise ConfigError("auto mode needs an rng for the per-episode coin flip")
        return 1 if rng.integers(2) == 0 else -1
    if mode == "nearest":
        if state is None:
            raise ConfigError("nearest mode needs the current state")
        to_target = state.target - state.obstacle_center
        to_base = state.base_pos() - state.obstacle_center
        cross = to_target[0] * to_base[1] - to_target[1] * to_base[0]
        return 1 if cross >= 0.0 else -1
    raise ConfigError(f"unknown expert mode {mode!r}")


def _gripper_command(state: EnvState, dist_to_target: float) -> float:
    if state.task == "pick_detour":
        return -1.0 if dist_to_target < 1.0 else 0.0
    if state.task == "place":
        return 1.0 if dist_to_target < 1.0 else 0.0
    return 0.0


def _arm_command(state: EnvState) -> tuple[float, float]:
    """Joint-velocity commands steering the arm tip onto the target."""
    rel = state.target - state.base_pos()
    c, s = math.cos(-state.theta), math.sin(-state.theta)
    rx = c * rel[0] - s * rel[1]
    ry = s * rel[0] + c * rel[1]
    r = math.hypot(rx, ry)
    reach = LINK_1 + LINK_2
    if r >= reach - 0.02 or r < 0.05:
        q1_des = math.atan2(ry, rx)
        q2_des = 0.3 if r < 0.05 else 0.0
    else:
        cos_q2 = (r * r - LINK_1 ** 2 - LINK_2 ** 2) / (2.0 * LINK_1 * LINK_2)
        q2_des = math.acos(np.clip(cos_q2, -1.0, 1.0))
        q1_des = math.atan2(ry, rx) - math.atan2(
            LINK_2 * math.sin(q2_des), LINK_1 + LINK_2 * math.cos(q2_des)
        )
    dq1 = np.clip(3.0 * _wrap_angle(q1_des - state.q1), -QDOT_SCALE, QDOT_SCALE)
    dq2 = np.clip(3.0 * _wrap_angle(q2_des - state.q2), -QDOT_SCALE, QDOT_SCALE)
    return dq1 / QDOT_SCALE, dq2 / QDOT_SCALE


def expert_action(state: EnvState, side: int) -> np.ndarray:
    """One proportional-control expert step for the given detour side.

    Steers at the parking point in front of the target; while the inflated
    obstacle disk blocks that segment, the bearing is deflected onto the
    tangent ray passing the obstacle on the requested side.
    """
    base = state.base_pos()
    to_target = state.target - base
    dist_target = float(np.linalg.norm(to_target))
    direction = to_target / max(dist_target, 1e-9)
    stop_point = state.target - STOP_DISTANCE * direction

    to_stop = stop_point - base
    dist_stop = float(np.linalg.norm(to_stop))
    bearing = math.atan2(to_stop[1], to_stop[0])
    to_obs = state.obstacle_center - base
    d_obs = float(np.linalg.norm(to_obs))
    if dist_stop > 1e-6 and d_obs > 1e-6:
        u = to_stop / dist_stop
        along = float(to_obs @ u)
        perp = abs(float(u[0] * to_obs[1] - u[1] * to_obs[0]))
        if 0.0 < along < dist_stop and perp < DETOUR_CLEARANCE:
            alpha = math.asin(min(DETOUR_CLEARANCE / d_obs, 1.0))
            bearing = math.atan2(to_obs[1], to_obs[0]) + side * 1.15 * alpha

    heading_err = _wrap_angle(bearing - state.theta)
    w_cmd = float(np.clip(2.5 * heading_err / W_SCALE, -1.0, 1.0))
    v_cmd = min(1.0, 2.0 * dist_stop) * max(math.cos(heading_err), 0.0) ** 2
    if dist_stop < 0.05:
        v_cmd = 0.0
        w_cmd = 0.0
    dq1, dq2 = _arm_command(state)
    grip = _gripper_command(state, dist_target)
    return np.array([v_cmd, w_cmd, dq1, dq2, grip])


def expert_policy(state: EnvState, mode: str = "left",
                  rng: np.random.Generator | None = None) -> np.ndarray:
    return expert_action(state, choose_side(mode, state=state, rng=rng))


def run_expert_episode(task: str, seed: int, side: int,
                       disturbance: DisturbanceConfig | None = None,
                       action_noise: float = 0.0):
    """Roll the scripted expert; returns (obs (T,13), actions (T,5), success).

    ``action_noise`` adds seeded exploration jitter to every executed (and
    recorded) action; the closed-loop controller corrects for it, so the
    demonstrations wiggle around the nominal path and the two detour modes
    overlap in state space near the start.
    """
    env = PlanarEnv(task, disturbance)
    state, obs = env.reset(seed)
    noise_rng = np.random.default_rng([hash_task(task), seed, side + 2, 13])
    obs_log, act_log = [], []
    done = False
    success = False
    while not done:
        action = expert_action(state, side)
        if action_noise > 0.0:
            action = np.clip(action + noise_rng.normal(0.0, action_noise, ACTION_DIM),
                             -1.0, 1.0)
        obs_log.append(obs)
        act_log.append(action)
        state, obs, done, success = env.step(action)
    return np.array(obs_log), np.array(act_log), success


# ---------------------------------------------------------------------------
# Dataset generation / loading (JSON lines, optionally gzipped)
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    index: int
    task: str
    mode: str
    observations: np.ndarray  # (T, OBS_DIM)
    actions: np.ndarray       # (T, ACTION_DIM)
    success: bool = True


def _open_dataset(path, mode: str):
    path = str(path)
    if mode == "w":
        if path.endswith(".gz"):
            # empty filename + pinned mtime: header carries no name or
            # timestamp, so output bytes depend only on content
            return gzip.GzipFile(filename="", fileobj=open(path, "wb"),
                                 mode="wb", mtime=0)
        return open(path, "wb")
    with open(path, "rb") as probe:
        magic = probe.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


DEMO_ACTION_NOISE = 0.1


def generate_dataset(task: str, episodes: int, seed: int, path,
                     action_noise: float = DEMO_ACTION_NOISE) -> dict:
    """Run the expert with balanced left/right modes and store successes.

    Detour tasks pair modes: consecutive episodes share a reset seed and run
    the opposite detour, so every start state is demonstrated both ways and
    the action distribution is bimodal conditioned on the observation;
    seeded exploration jitter on the executed actions makes the two modes'
    state clouds overlap near the start. One JSON record per step; the
    final record of each episode carries ``success``. Raises DataError if
    the expert fails more than 5% of episodes or mode balance leaves
    [40%, 60%].
    """
    if episodes < 1:
        raise ConfigError("need at least one episode")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    kept = 0
    failures = 0
    kept_left = 0
    with _open_dataset(path, "w") as fh:
        for idx in range(episodes):
            if task == "place":
                mode, reset_seed = "direct", seed + idx
            else:
                mode = "left" if idx % 2 == 0 else "right"
                reset_seed = seed + idx // 2
            side = 1 if mode in ("left", "direct") else -1
            obs, actions, success = run_expert_episode(task, reset_seed, side,
                                                       action_noise=action_noise)
            if not success:
                failures += 1
                continue
            kept += 1
            kept_left += mode == "left"
            last = len(obs) - 1
            for t in range(len(obs)):
                rec = {
                    "episode": idx, "step": t, "task": task, "mode": mode,
                    "obs": obs[t].tolist(), "action": actions[t].tolist(),
                }
                if t == last:
                    rec["success"] = True
                fh.write((json.dumps(rec) + "\n").encode("utf-8"))
    if failures > 0.05 * episodes:
        raise DataError(
            f"expert failed {failures}/{episodes} episodes; environment misconfigured"
        )
    summary = {"episodes": episodes, "kept": kept, "failures": failures}
    if task != "place" and kept:
        left_frac = kept_left / kept
        summary["left_fraction"] = left_frac
        if not 0.4 <= left_frac <= 0.6:
            raise DataError(f"mode balance {left_frac:.3f} outside [0.4, 0.6]")
    return summary


def load_dataset(path) -> list[Episode]:
    episodes: dict[int, dict] = {}
    order: list[int] = []
    with _open_dataset(path, "r") as fh:
        for line in fh:
            rec = json.loads(line)
            idx = rec["episode"]
            if idx not in episodes:
                episodes[idx] = {"task": rec["task"], "mode": rec["mode"],
                                 "obs": [], "act": [], "success": False}
                order.append(idx)
            episodes[idx]["obs"].append(rec["obs"])
            episodes[idx]["act"].append(rec["action"])
            if rec.get("success"):
                episodes[idx]["success"] = True
    if not episodes:
        raise DataError(f"dataset {path} contains no episodes")
    return [
        Episode(
            index=idx, task=episodes[idx]["task"], mode=episodes[idx]["mode"],
            observations=np.array(episodes[idx]["obs"]),
            actions=np.array(episodes[idx]["act"]),
            success=episodes[idx]["success"],
        )
        for idx in order
    ]
