"""RL environment stage: sub-scene division from key positions, observation
construction, the scene-compatibility-aware reward, and synchronous
multi-agent stepping.

A sub-scene is one connected cluster of interacting agents plus the lanelets
that contextualize their key positions (key lanelets and 1-hop neighbors).
Each member carries a goal schedule (deadline step, key position) and the
episode runs to the final deadline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry, kinematics
from .artifacts import write_csv
from .encoder import KeyPositionSet
from .kinematics import Action, VehicleParams, VehicleState
from .scene import DT, LaneNode, Scene, SceneValidationError

LANE_TOKEN_DIM = 9    # rel position (2), d_t one-hot (2), boundary offsets (2), passable one-hot (3)
MOTION_TOKEN_DIM = 10  # v, a_long, steer, yaw rate, s_goal, d_goal, t_remain, heading, x, y

ACTION_MODELS = ("kinematic", "direct")


@dataclass(frozen=True)
class RewardConfig:
    w_goal: float = 0.6
    w_smooth: float = 0.1
    w_collision: float = 0.5
    sigma_goal: float = 1.0         # m
    sigma_accel: float = 2.0        # m/s^2
    sigma_steer: float = 0.02       # rad per step
    d_collision: float = 2.0        # m, center-to-center
    key_step_multiplier: float = 5.0
    scene_mix: float = 0.25         # weight of the sub-scene mean reward
    smooth_literal: bool = False    # paper-literal -N(x;0,sigma) smoothness form

    def __post_init__(self):
        if min(self.w_goal, self.w_smooth, self.w_collision) < 0:
            raise ValueError("reward weights must be nonnegative")
        if self.key_step_multiplier <= 1.0:
            raise ValueError("key_step_multiplier must exceed 1")
        if not 0.0 <= self.scene_mix < 1.0:
            raise ValueError("scene_mix must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "w_goal": self.w_goal, "w_smooth": self.w_smooth,
            "w_collision": self.w_collision, "sigma_goal": self.sigma_goal,
            "sigma_accel": self.sigma_accel, "sigma_steer": self.sigma_steer,
            "d_collision": self.d_collision,
            "key_step_multiplier": self.key_step_multiplier,
            "scene_mix": self.scene_mix, "smooth_literal": self.smooth_literal,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RewardConfig":
        return cls(**doc)


@dataclass
class SubScene:
    member_ids: list[str]
    key_lanelets: set[str]
    context_lanelets: set[str]
    goal_schedules: dict[str, list[tuple[int, np.ndarray]]]
    horizon: int

    def final_goal(self, agent_id: str) -> np.ndarray:
        return self.goal_schedules[agent_id][-1][1]


def _context_of(scene: Scene, lanelet_ids: set[str]) -> set[str]:
    """Key lanelets closed under 1-hop connectivity (successors, predecessors,
    lateral neighbors)."""
    out = set(lanelet_ids)
    for lid in lanelet_ids:
        lanelet = scene.lanelets[lid]
        out.update(lanelet.successors)
        out.update(lanelet.predecessors)
        for neighbor in (lanelet.left_neighbor, lanelet.right_neighbor):
            if neighbor is not None:
                out.add(neighbor)
    return out


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[rj] = ri


def divide_subscenes(
    scene: Scene,
    kps: KeyPositionSet,
    mode_index: int,
    interaction_distance: float = 15.0,
    max_lanelet_distance: float = 10.0,
) -> list[SubScene]:
    """Partition the agents into sub-scenes for one prediction mode.

    Agents are related when same-timestamp key positions come within the
    interaction distance, or when one agent currently sits on a lanelet in
    the other's context; sub-scenes are the connected components.
    """
    ids = kps.agent_ids()
    n = len(ids)
    key_points = {aid: kps.positions[aid][mode_index] for aid in ids}

    key_lanelets: dict[str, set[str]] = {}
    contexts: dict[str, set[str]] = {}
    current_lanelet: dict[str, str] = {}
    for aid in ids:
        lanes = set()
        for point in key_points[aid]:
            lid, _, _ = scene.nearest_lanelet(point)
            _, dist, _ = geometry.project_to_polyline(point, scene.lanelets[lid].centerline)
            if dist > max_lanelet_distance:
                raise SceneValidationError(
                    f"agent {aid}: key position {point.tolist()} has no lanelet within "
                    f"{max_lanelet_distance} m (calibrate first)")
            lanes.add(lid)
        key_lanelets[aid] = lanes
        contexts[aid] = _context_of(scene, lanes)
        current_lanelet[aid] = scene.nearest_lanelet(scene.agent(aid).position)[0]

    uf = _UnionFind(n)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = ids[i], ids[j]
            kp_dist = float(np.min(np.linalg.norm(key_points[a] - key_points[b], axis=1)))
            related = kp_dist < interaction_distance
            related = related or current_lanelet[b] in contexts[a]
            related = related or current_lanelet[a] in contexts[b]
            if related:
                uf.union(i, j)

    clusters: dict[int, list[str]] = {}
    for i, aid in enumerate(ids):
        clusters.setdefault(uf.find(i), []).append(aid)

    subscenes = []
    for members in clusters.values():
        lanes = set().union(*(key_lanelets[a] for a in members))
        schedules = {}
        horizon = 0
        for aid in members:
            schedule = []
            for k, ts in enumerate(kps.timestamps):
                step_index = int(round(ts / DT))
                schedule.append((step_index, key_points[aid][k].copy()))
            schedules[aid] = schedule
            horizon = max(horizon, schedule[-1][0])
        subscenes.append(SubScene(
            member_ids=sorted(members),
            key_lanelets=lanes,
            context_lanelets=_context_of(scene, lanes),
            goal_schedules=schedules,
            horizon=horizon,
        ))
    subscenes.sort(key=lambda s: s.member_ids[0])
    return subscenes


def subscenes_from_ground_truth(
    scene: Scene,
    timestamps: tuple[float, ...] = (1.5, 3.0),
    interaction_distance: float = 15.0,
) -> list[SubScene]:
    """Sub-scenes whose goals are the ground-truth futures at the key
    timestamps (single mode); the RL stage trains against these."""
    from .encoder import ground_truth_key_positions

    gt = ground_truth_key_positions(scene, timestamps)
    kps = KeyPositionSet(
        timestamps=timestamps,
        positions={aid: pos[None, :, :] for aid, pos in gt.items()},
        probabilities={aid: np.array([1.0]) for aid in gt},
    )
    return divide_subscenes(scene, kps, mode_index=0,
                            interaction_distance=interaction_distance)


# -- observations -----------------------------------------------------------


@dataclass
class Observation:
    """Raw token features; the policy owns the per-token linear embeddings."""

    lane_tokens: np.ndarray    # (n_lane_nodes, LANE_TOKEN_DIM)
    motion_token: np.ndarray   # (MOTION_TOKEN_DIM,)

    @property
    def n_tokens(self) -> int:
        return len(self.lane_tokens) + 1


def build_observation(
    state: VehicleState,
    goal: np.ndarray,
    t_remain: float,
    lane_nodes: list[LaneNode],
) -> Observation:
    pos = state.position
    rot = geometry.rotation_matrix(state.heading)
    lane_tokens = np.zeros((len(lane_nodes), LANE_TOKEN_DIM))
    for i, node in enumerate(lane_nodes):
        lane_tokens[i, 0:2] = (node.position - pos) @ rot
        lane_tokens[i, 2] = 1.0 if node.direction_attr == "same" else 0.0
        lane_tokens[i, 3] = 1.0 if node.direction_attr == "opposite" else 0.0
        lane_tokens[i, 4] = node.boundary_left
        lane_tokens[i, 5] = node.boundary_right
        lane_tokens[i, 6 + ("green", "red", "uncontrolled").index(node.passable)] = 1.0
    goal_vehicle = (np.asarray(goal) - pos) @ rot
    motion = np.array([
        state.speed, state.accel_long, state.steer, state.yaw_rate,
        goal_vehicle[0], goal_vehicle[1], t_remain,
        state.heading, state.x, state.y,
    ])
    return Observation(lane_tokens=lane_tokens, motion_token=motion)


# -- reward -------------------------------------------------------------------


def _peak_gaussian(x: float, sigma: float) -> float:
    return math.exp(-0.5 * (x / sigma) ** 2)


def compute_reward(
    cfg: RewardConfig,
    scene: Scene,
    goal: np.ndarray,
    goal_deadline: int,
    step_index: int,
    prev_state: VehicleState,
    new_state: VehicleState,
    other_positions: np.ndarray,
) -> tuple[float, dict[str, float]]:
    """Eq-weighted sum of goal heat, smoothness, and collision penalty.

    The goal term is a peak-normalized Gaussian of the distance to the current
    goal, boosted by the key-step multiplier at the goal's deadline step.
    Smoothness reads the effective per-step increments (post-clamp).
    """
    dist_goal = float(np.linalg.norm(new_state.position - np.asarray(goal)))
    r_goal = _peak_gaussian(dist_goal, cfg.sigma_goal)
    if step_index == goal_deadline:
        r_goal *= cfg.key_step_multiplier

    steer_inc = new_state.steer - prev_state.steer
    g_accel = _peak_gaussian(new_state.accel_long, cfg.sigma_accel)
    g_steer = _peak_gaussian(steer_inc, cfg.sigma_steer)
    if cfg.smooth_literal:
        r_smooth = -g_accel - g_steer
    else:
        r_smooth = (g_accel - 1.0) + (g_steer - 1.0)

    collided = False
    if len(other_positions):
        dmin = float(np.min(np.linalg.norm(other_positions - new_state.position, axis=1)))
        collided = dmin < cfg.d_collision
    if not collided and not scene.in_drivable_area(new_state.position):
        collided = True
    r_collision = -1.0 if collided else 0.0

    total = cfg.w_goal * r_goal + cfg.w_smooth * r_smooth + cfg.w_collision * r_collision
    return total, {
        "r_goal": r_goal, "r_smooth": r_smooth, "r_collision": r_collision,
        "r_total": total, "collided": collided,
    }


# -- action models ------------------------------------------------------------


class KinematicActionModel:
    """Steering/speed increments through the bicycle model."""

    name = "kinematic"

    def __init__(self, params: VehicleParams):
        self.params = params
        self.scale = np.array([params.max_steer_step, params.max_speed_step])

    def apply(self, state: VehicleState, raw_action: np.ndarray, dt: float) -> VehicleState:
        return kinematics.step(state, Action(float(raw_action[0]), float(raw_action[1])),
                               dt=dt, params=self.params)


class DirectActionModel:
    """Ablation arm: raw displacement actions, no kinematic structure."""

    name = "direct"

    def __init__(self, params: VehicleParams):
        self.params = params
        limit = params.max_speed * kinematics.DT
        self.scale = np.array([limit, limit])

    def apply(self, state: VehicleState, raw_action: np.ndarray, dt: float) -> VehicleState:
        delta = np.asarray(raw_action, dtype=float)
        limit = self.params.max_speed * dt
        norm = float(np.linalg.norm(delta))
        if norm > limit:
            delta = delta * (limit / norm)
            norm = limit
        heading = math.atan2(delta[1], delta[0]) if norm > 1e-9 else state.heading
        speed = norm / dt
        return VehicleState(
            x=state.x + float(delta[0]),
            y=state.y + float(delta[1]),
            heading=heading,
            speed=speed,
            steer=0.0,
            accel_long=(speed - state.speed) / dt,
            yaw_rate=geometry.wrap_angle(heading - state.heading) / dt,
        )


def make_action_model(name: str, params: VehicleParams):
    if name == "kinematic":
        return KinematicActionModel(params)
    if name == "direct":
        return DirectActionModel(params)
    raise ValueError(f"action model must be one of {ACTION_MODELS}")


# -- environment ---------------------------------------------------------------


class SubSceneEnv:
    """Synchronous multi-agent episode inside one sub-scene.

    All agents advance simultaneously from the committed previous states, so
    the outcome is independent of agent processing order. Agents freeze when
    done (collision or final deadline) but remain obstacles.
    """

    def __init__(
        self,
        scene: Scene,
        subscene: SubScene,
        reward_cfg: RewardConfig = RewardConfig(),
        vehicle_params: VehicleParams = VehicleParams(),
        action_model: str = "kinematic",
        dt: float = DT,
    ):
        self.scene = scene
        self.subscene = subscene
        self.reward_cfg = reward_cfg
        self.dt = dt
        self.model = make_action_model(action_model, vehicle_params)
        self._lane_nodes = [
            node for lid in sorted(subscene.context_lanelets)
            for node in scene.lane_nodes(lid)
        ]
        self.trace: list[list] = []
        self.reset()

    # -- episode state ----------------------------------------------------

    def reset(self) -> dict[str, Observation]:
        self.step_index = 0
        self.states: dict[str, VehicleState] = {}
        self.done: dict[str, bool] = {}
        self.collided: dict[str, bool] = {}
        self.trace = []
        for aid in self.subscene.member_ids:
            track = self.scene.agent(aid)
            heading = self.scene.agent_heading(aid)
            speed = min(track.speed, self.model.params.max_speed)
            self.states[aid] = kinematics.state_from_track(track.position, heading, speed)
            self.done[aid] = False
            self.collided[aid] = False
        return {aid: self.observe(aid) for aid in self.subscene.member_ids}

    def all_done(self) -> bool:
        return all(self.done.values())

    def current_goal(self, agent_id: str) -> tuple[int, np.ndarray]:
        """Next unexpired (deadline step, key position); the final goal sticks."""
        upcoming = self.step_index + 1
        for deadline, pos in self.subscene.goal_schedules[agent_id]:
            if deadline >= upcoming:
                return deadline, pos
        return self.subscene.goal_schedules[agent_id][-1]

    def observe(self, agent_id: str) -> Observation:
        if agent_id not in self.states:
            raise SceneValidationError(f"agent {agent_id} is not a member of this sub-scene")
        deadline, goal = self.current_goal(agent_id)
        t_remain = (deadline - self.step_index) * self.dt
        return build_observation(self.states[agent_id], goal, t_remain, self._lane_nodes)

    # -- stepping -----------------------------------------------------------

    def step(self, actions: dict[str, np.ndarray]):
        """Apply one joint action; returns (observations, training rewards,
        done flags, per-agent reward components) for the agents that acted."""
        active = [aid for aid in self.subscene.member_ids if not self.done[aid]]
        unknown = set(actions) - set(active)
        if unknown:
            raise SceneValidationError(
                f"actions supplied for non-active or non-member agents: {sorted(unknown)}")
        missing = set(active) - set(actions)
        if missing:
            raise SceneValidationError(f"missing actions for active agents: {sorted(missing)}")

        prev = dict(self.states)
        goals = {aid: self.current_goal(aid) for aid in active}
        self.step_index += 1
        new_states = dict(prev)
        for aid in active:
            new_states[aid] = self.model.apply(prev[aid], np.asarray(actions[aid]), self.dt)

        all_positions = {aid: s.position for aid, s in new_states.items()}
        raw_rewards: dict[str, float] = {}
        components: dict[str, dict] = {}
        for aid in active:
            others = np.array([p for other, p in all_positions.items() if other != aid])
            deadline, goal = goals[aid]
            total, comp = compute_reward(
                self.reward_cfg, self.scene, goal, deadline, self.step_index,
                prev[aid], new_states[aid], others)
            raw_rewards[aid] = total
            components[aid] = comp

        self.states = new_states
        mean_reward = float(np.mean(list(raw_rewards.values()))) if raw_rewards else 0.0
        beta = self.reward_cfg.scene_mix
        rewards = {aid: (1.0 - beta) * r + beta * mean_reward
                   for aid, r in raw_rewards.items()}

        observations = {}
        dones = {}
        for aid in active:
            comp = components[aid]
            if comp["collided"]:
                self.collided[aid] = True
                self.done[aid] = True
            if self.step_index >= self.subscene.horizon:
                self.done[aid] = True
            dones[aid] = self.done[aid]
            observations[aid] = self.observe(aid)
            s = self.states[aid]
            self.trace.append([
                self.step_index, aid, s.x, s.y, s.heading, s.speed, s.steer,
                comp["r_goal"], comp["r_smooth"], comp["r_collision"], comp["r_total"]])
        return observations, rewards, dones, components

    def export_trace(self, path: str, run: dict | None = None) -> None:
        write_csv(
            path,
            ["step", "agent_id", "x", "y", "theta", "v", "delta",
             "r_goal", "r_smooth", "r_collision", "r_total"],
            self.trace,
            run=run,
        )
