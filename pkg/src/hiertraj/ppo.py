"""Clipped-surrogate policy optimization over sub-scene episodes: rollout
collection with a shared policy across agents, generalized advantage
estimation, and minibatched updates with ratio clipping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NumericError, Tensor, no_grad, tensor
from .kinematics import VehicleParams, gaussian_log_density
from .nn import Adam, gaussian_entropy, gaussian_log_prob
from .policy import PPOConfig, _PolicyBase, build_policy
from .scene import Scene
from .subscene import Observation, SubScene, SubSceneEnv, make_action_model

GOAL_HIT_TOLERANCE = 1.0  # m


class ContractError(ValueError):
    """Caller violated an array-shape or membership contract."""


def compute_gae(rewards, values, dones, gamma: float, lam: float,
                bootstrap: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Standard GAE recursion over one time-ordered segment.

    Advantages are returned un-normalized; the update normalizes across the
    whole batch. `bootstrap` is the value of the state after the last
    transition (zero at a terminal)."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if not (len(rewards) == len(values) == len(dones)):
        raise ContractError("rewards, values and dones must have equal length")
    t_len = len(rewards)
    advantages = np.zeros(t_len)
    gae = 0.0
    next_value = bootstrap
    for t in range(t_len - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        gae = delta + gamma * lam * nonterminal * gae
        advantages[t] = gae
        next_value = values[t]
    return advantages, advantages + values


@dataclass
class Segment:
    """One agent's complete episode trajectory."""

    observations: list[Observation]
    actions: np.ndarray       # (T, 2) raw pre-clamp samples
    log_probs: np.ndarray     # (T,)
    rewards: np.ndarray       # (T,) training rewards
    values: np.ndarray        # (T,)
    dones: np.ndarray         # (T,) bool, last entry True
    collided: bool
    goal_hit: bool

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())


class RolloutBuffer:
    """Complete, time-ordered segments; cleared after every update."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.segments: list[Segment] = []
        self.total_steps = 0

    def add(self, segment: Segment) -> None:
        if self.total_steps + len(segment.rewards) > self.capacity:
            raise ContractError("rollout buffer capacity exceeded")
        self.segments.append(segment)
        self.total_steps += len(segment.rewards)

    def clear(self) -> None:
        self.segments = []
        self.total_steps = 0


def run_episode(env: SubSceneEnv, net: _PolicyBase, rng: np.random.Generator | None,
                deterministic: bool = False) -> list[Segment]:
    """Roll one episode with the shared policy; one segment per member agent."""
    observations = env.reset()
    per_agent: dict[str, dict[str, list]] = {
        aid: {"obs": [], "act": [], "logp": [], "rew": [], "val": [], "done": []}
        for aid in env.subscene.member_ids
    }
    while not env.all_done():
        active = [aid for aid in env.subscene.member_ids if not env.done[aid]]
        obs_batch = [observations[aid] for aid in active]
        lane = np.stack([o.lane_tokens for o in obs_batch])
        motion = np.stack([o.motion_token for o in obs_batch])
        with no_grad():
            mean_t, std_t, value_t = net.forward_batch(
                tensor(lane) if lane.shape[1] else None, tensor(motion))
        mean, std, values = mean_t.data, std_t.data, value_t.data
        if deterministic:
            raw = mean.copy()
        else:
            raw = mean + std * rng.standard_normal(mean.shape)
        actions = {aid: raw[i] for i, aid in enumerate(active)}
        new_obs, rewards, dones, _ = env.step(actions)
        for i, aid in enumerate(active):
            rec = per_agent[aid]
            rec["obs"].append(obs_batch[i])
            rec["act"].append(raw[i])
            rec["logp"].append(gaussian_log_density(raw[i], mean[i], std[i]))
            rec["rew"].append(rewards[aid])
            rec["val"].append(values[i])
            rec["done"].append(dones[aid])
        observations.update(new_obs)

    segments = []
    for aid in env.subscene.member_ids:
        rec = per_agent[aid]
        if not rec["obs"]:
            continue
        final_dist = float(np.linalg.norm(
            env.states[aid].position - env.subscene.final_goal(aid)))
        segments.append(Segment(
            observations=rec["obs"],
            actions=np.array(rec["act"]),
            log_probs=np.array(rec["logp"]),
            rewards=np.array(rec["rew"]),
            values=np.array(rec["val"]),
            dones=np.array(rec["done"], dtype=bool),
            collided=env.collided[aid],
            goal_hit=(not env.collided[aid]) and final_dist <= GOAL_HIT_TOLERANCE,
        ))
    return segments


def _elementwise_min(a: Tensor, b: Tensor) -> Tensor:
    return a - (a - b).relu()


def _group_by_token_count(observations: list[Observation], idx: np.ndarray):
    groups: dict[int, list[int]] = {}
    for i in idx:
        groups.setdefault(len(observations[i].lane_tokens), []).append(int(i))
    return groups


def ppo_update(buffer: RolloutBuffer, net: _PolicyBase, opt: Adam,
               config: PPOConfig, rng: np.random.Generator) -> dict:
    """Epochs of minibatched clipped-surrogate steps over the buffer.

    loss = -min(ratio * A, clip(ratio) * A) + c_v * value MSE - c_e * entropy,
    with the ratio taken against stored pre-clamp log probs. The buffer is
    cleared afterwards."""
    if buffer.total_steps == 0:
        raise ContractError("ppo_update needs at least one rollout segment")
    observations: list[Observation] = []
    actions, old_logp, advantages, returns = [], [], [], []
    for seg in buffer.segments:
        adv, ret = compute_gae(seg.rewards, seg.values, seg.dones,
                               config.gamma, config.gae_lambda)
        observations.extend(seg.observations)
        actions.append(seg.actions)
        old_logp.append(seg.log_probs)
        advantages.append(adv)
        returns.append(ret)
    actions = np.concatenate(actions)
    old_logp = np.concatenate(old_logp)
    advantages = np.concatenate(advantages)
    returns = np.concatenate(returns)
    advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)

    n = len(observations)
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "clip_fraction": []}
    for _ in range(config.epochs_per_update):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            mb = perm[start:start + config.minibatch_size]
            try:
                loss, mb_stats = _minibatch_loss(
                    net, observations, actions, old_logp, advantages, returns, mb, config)
                opt.zero_grad()
                loss.backward()
            except NumericError as exc:
                raise NumericError(
                    f"non-finite loss in minibatch starting at {start} "
                    f"(indices {mb[:8].tolist()}...): {exc}") from None
            opt.step()
            for key, value in mb_stats.items():
                stats[key].append(value)
    buffer.clear()
    return {key: float(np.mean(vals)) for key, vals in stats.items()}


def _minibatch_loss(net, observations, actions, old_logp, advantages, returns,
                    mb: np.ndarray, config: PPOConfig):
    """Group same-token-count samples to batch exactly, then pool the sums."""
    b_total = len(mb)
    policy_sum = None
    value_sum = None
    entropy_sum = None
    clipped_count = 0

    def acc(total, term):
        return term if total is None else total + term

    for t_count, rows in _group_by_token_count(observations, mb).items():
        lane = None
        if t_count:
            lane = tensor(np.stack([observations[i].lane_tokens for i in rows]))
        motion = tensor(np.stack([observations[i].motion_token for i in rows]))
        mean, std, value = net.forward_batch(lane, motion)
        act = tensor(actions[rows])
        logp = gaussian_log_prob(act, mean, std).sum(axis=1)
        ratio = (logp - tensor(old_logp[rows])).exp()
        adv = tensor(advantages[rows])
        surrogate = _elementwise_min(
            ratio * adv, ratio.clip(1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon) * adv)
        policy_sum = acc(policy_sum, -surrogate.sum())
        value_sum = acc(value_sum, ((value - tensor(returns[rows])) ** 2).sum())
        entropy_sum = acc(entropy_sum, gaussian_entropy(std).sum())
        clipped_count += int(np.sum(np.abs(ratio.data - 1.0) > config.clip_epsilon))

    loss = (policy_sum + config.value_coef * value_sum
            - config.entropy_coef * entropy_sum) * (1.0 / b_total)
    mb_stats = {
        "policy_loss": float(policy_sum.data) / b_total,
        "value_loss": float(value_sum.data) / b_total,
        "entropy": float(entropy_sum.data) / b_total,
        "clip_fraction": clipped_count / b_total,
    }
    return loss, mb_stats


def train(
    env_factory,
    config: PPOConfig,
    total_updates: int,
    seed: int,
    net: _PolicyBase | None = None,
    vehicle_params: VehicleParams = VehicleParams(),
) -> tuple[_PolicyBase, list[dict]]:
    """Alternating rollout/update loop; all agents share one policy.

    `env_factory(episode_index)` must deterministically yield a fresh
    SubSceneEnv. Returns the net and one log row per update."""
    rng = np.random.default_rng(seed)
    scale = make_action_model(config.action_model, vehicle_params).scale
    if net is None:
        net = build_policy(config, scale, rng)
    opt = Adam(net.parameters(), lr=config.lr)
    logs = []
    episode_index = 0
    for update in range(total_updates):
        buffer = RolloutBuffer(config.buffer_capacity)
        episode_returns, hits, collisions = [], [], []
        while buffer.total_steps < config.rollout_steps:
            env = env_factory(episode_index)
            episode_index += 1
            for seg in run_episode(env, net, rng):
                buffer.add(seg)
                episode_returns.append(seg.episode_return)
                hits.append(seg.goal_hit)
                collisions.append(seg.collided)
        stats = ppo_update(buffer, net, opt, config, rng)
        logs.append({
            "update": update,
            "mean_return": float(np.mean(episode_returns)),
            "policy_loss": stats["policy_loss"],
            "value_loss": stats["value_loss"],
            "entropy": stats["entropy"],
            "clip_fraction": stats["clip_fraction"],
            "collision_rate": float(np.mean(collisions)),
            "goal_hit_rate": float(np.mean(hits)),
        })
    return net, logs


def rollout_predict(scene: Scene, subscene: SubScene, net: _PolicyBase,
                    env_kwargs: dict | None = None, deterministic: bool = True,
                    rng: np.random.Generator | None = None,
                    horizon: int | None = None) -> dict[str, np.ndarray]:
    """Execute the policy through one sub-scene; (horizon, 2) track per agent.

    Deterministic mode takes mean actions. Agents that finish early stay
    frozen, so every returned trajectory has exactly `horizon` points."""
    env = SubSceneEnv(scene, subscene, **(env_kwargs or {}))
    horizon = horizon or subscene.horizon
    observations = env.reset()
    tracks: dict[str, list[np.ndarray]] = {aid: [] for aid in subscene.member_ids}
    while not env.all_done():
        active = [aid for aid in subscene.member_ids if not env.done[aid]]
        lane = np.stack([observations[aid].lane_tokens for aid in active])
        motion = np.stack([observations[aid].motion_token for aid in active])
        with no_grad():
            mean_t, std_t, _ = net.forward_batch(
                tensor(lane) if lane.shape[1] else None, tensor(motion))
        raw = mean_t.data.copy()
        if not deterministic:
            raw += std_t.data * rng.standard_normal(raw.shape)
        new_obs, _, _, _ = env.step({aid: raw[i] for i, aid in enumerate(active)})
        observations.update(new_obs)
        for aid in subscene.member_ids:
            tracks[aid].append(env.states[aid].position.copy())
    out = {}
    for aid, points in tracks.items():
        arr = np.array(points) if points else np.zeros((0, 2))
        while len(arr) < horizon:
            pad = arr[-1:] if len(arr) else env.states[aid].position[None, :]
            arr = np.vstack([arr, pad])
        out[aid] = arr[:horizon]
    return out
