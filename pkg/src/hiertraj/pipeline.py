"""End-to-end prediction: encoder key positions, calibration, sub-scene
division, and per-mode policy rollouts assembled into a PredictionSet."""

from __future__ import annotations

import numpy as np

from .encoder import HeteroEncoder, KeyPositionSet, calibrate_key_positions
from .kinematics import VehicleParams
from .metrics import AgentPrediction, PredictionSet
from .policy import _PolicyBase
from .ppo import rollout_predict
from .scene import DT, FUTURE_LEN, Scene
from .subscene import RewardConfig, divide_subscenes


def interpolate_through_key_positions(
    scene: Scene, kps: KeyPositionSet, horizon: int = FUTURE_LEN,
) -> dict[str, np.ndarray]:
    """Piecewise-linear 10 Hz tracks from each agent's last position through
    its key positions; the reference decoder-only extrapolation."""
    out = {}
    for aid in kps.agent_ids():
        start = scene.agent(aid).position
        modes = []
        for mode_positions in kps.positions[aid]:
            anchor_times = [0.0] + [float(t) for t in kps.timestamps]
            anchor_pts = np.vstack([start[None, :], mode_positions])
            times = DT * np.arange(1, horizon + 1)
            xs = np.interp(times, anchor_times, anchor_pts[:, 0])
            ys = np.interp(times, anchor_times, anchor_pts[:, 1])
            modes.append(np.column_stack([xs, ys]))
        out[aid] = np.stack(modes)
    return out


def predict_trajectories(
    scene: Scene,
    encoder: HeteroEncoder,
    policy: _PolicyBase,
    reward_cfg: RewardConfig = RewardConfig(),
    vehicle_params: VehicleParams = VehicleParams(),
    action_model: str = "kinematic",
    interaction_distance: float = 15.0,
    key_positions: KeyPositionSet | None = None,
) -> tuple[PredictionSet, dict]:
    """The full two-stage pipeline for one scene.

    A precomputed (raw) KeyPositionSet short-circuits the encoder stage.
    Returns the predictions plus intermediates: raw and calibrated key
    positions and per-mode sub-scene membership."""
    raw = key_positions if key_positions is not None else encoder.predict(scene)
    calibrated = calibrate_key_positions(raw, scene)
    n_modes = calibrated.n_modes

    env_kwargs = {
        "reward_cfg": reward_cfg,
        "vehicle_params": vehicle_params,
        "action_model": action_model,
    }
    trajectories = {aid: np.zeros((n_modes, FUTURE_LEN, 2)) for aid in calibrated.agent_ids()}
    membership = []
    for mode in range(n_modes):
        subs = divide_subscenes(scene, calibrated, mode,
                                interaction_distance=interaction_distance)
        membership.append([sub.member_ids for sub in subs])
        for sub in subs:
            tracks = rollout_predict(scene, sub, policy, env_kwargs=env_kwargs,
                                     horizon=FUTURE_LEN)
            for aid, track in tracks.items():
                trajectories[aid][mode] = track

    agents = {}
    for aid in calibrated.agent_ids():
        track = scene.agent(aid)
        agents[aid] = AgentPrediction(
            trajectories=trajectories[aid],
            probabilities=calibrated.probabilities[aid].copy(),
            ground_truth=None if track.future_gt is None else track.future_gt[:, 1:3].copy(),
        )
    intermediates = {
        "key_positions_raw": raw,
        "key_positions_calibrated": calibrated,
        "subscene_membership": membership,
    }
    return PredictionSet(agents=agents), intermediates
