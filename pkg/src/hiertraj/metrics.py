"""Forecasting metrics (minADE, minFDE, miss rate, drivable-area compliance)
and the constant-velocity reference baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import DT, FUTURE_LEN, AgentTrack, Scene

MISS_THRESHOLD = 2.0  # m, endpoint convention


@dataclass
class AgentPrediction:
    trajectories: np.ndarray          # (n_modes, horizon, 2)
    probabilities: np.ndarray         # (n_modes,)
    ground_truth: np.ndarray | None   # (horizon, 2)

    def __post_init__(self):
        if self.trajectories.ndim != 3 or self.trajectories.shape[2] != 2:
            raise ValueError("trajectories must have shape (modes, horizon, 2)")
        if len(self.probabilities) != len(self.trajectories):
            raise ValueError("one probability per mode required")


@dataclass
class PredictionSet:
    agents: dict[str, AgentPrediction]

    def to_dict(self) -> dict:
        out = []
        for aid, pred in self.agents.items():
            entry = {
                "id": aid,
                "trajectories": pred.trajectories.tolist(),
                "probabilities": pred.probabilities.tolist(),
            }
            if pred.ground_truth is not None:
                entry["ground_truth"] = pred.ground_truth.tolist()
            out.append(entry)
        return {"agents": out}

    @classmethod
    def from_dict(cls, doc: dict) -> "PredictionSet":
        agents = {}
        for entry in doc["agents"]:
            gt = entry.get("ground_truth")
            agents[entry["id"]] = AgentPrediction(
                trajectories=np.asarray(entry["trajectories"], dtype=float),
                probabilities=np.asarray(entry["probabilities"], dtype=float),
                ground_truth=None if gt is None else np.asarray(gt, dtype=float),
            )
        return cls(agents=agents)


def _check_gt(pred: AgentPrediction) -> np.ndarray:
    if pred.ground_truth is None:
        raise ValueError("ground truth required for displacement metrics")
    gt = pred.ground_truth
    if gt.shape[0] != pred.trajectories.shape[1]:
        raise ValueError(
            f"length mismatch: trajectories have {pred.trajectories.shape[1]} points, "
            f"ground truth has {gt.shape[0]}")
    return gt


def min_ade(pred: AgentPrediction) -> float:
    """Minimum over modes of the mean pointwise Euclidean error."""
    gt = _check_gt(pred)
    errors = np.linalg.norm(pred.trajectories - gt[None], axis=2).mean(axis=1)
    return float(errors.min())


def min_fde(pred: AgentPrediction) -> float:
    """Minimum over modes of the endpoint Euclidean error."""
    gt = _check_gt(pred)
    endpoint = np.linalg.norm(pred.trajectories[:, -1, :] - gt[-1], axis=1)
    return float(endpoint.min())


def miss_rate(preds: PredictionSet, threshold: float = MISS_THRESHOLD) -> float:
    """Fraction of agents whose best-mode endpoint error exceeds the threshold."""
    misses = [min_fde(p) > threshold for p in preds.agents.values()]
    return float(np.mean(misses)) if misses else 0.0


def trajectory_in_drivable_area(trajectory: np.ndarray, scene: Scene) -> bool:
    return all(scene.in_drivable_area(point) for point in trajectory)


def dac(preds: PredictionSet, scene: Scene) -> float:
    """Fraction of predicted trajectories fully inside the drivable area,
    averaged over modes and agents."""
    flags = [
        trajectory_in_drivable_area(traj, scene)
        for pred in preds.agents.values()
        for traj in pred.trajectories
    ]
    return float(np.mean(flags)) if flags else 1.0


def constant_velocity_baseline(track: AgentTrack, horizon: int = FUTURE_LEN) -> np.ndarray:
    """Extrapolate the last observed displacement for `horizon` steps."""
    if track.history.shape[0] < 2:
        raise ValueError("need at least two history points")
    last = track.history[-1, 1:3]
    velocity = (track.history[-1, 1:3] - track.history[-2, 1:3]) / DT
    steps = np.arange(1, horizon + 1, dtype=float)[:, None]
    return last[None, :] + steps * (velocity * DT)[None, :]


def evaluate(preds: PredictionSet, scene: Scene) -> dict:
    """Scene-level report: agent means of minADE/minFDE plus MR and DAC."""
    ades = [min_ade(p) for p in preds.agents.values()]
    fdes = [min_fde(p) for p in preds.agents.values()]
    return {
        "minADE": float(np.mean(ades)) if ades else 0.0,
        "minFDE": float(np.mean(fdes)) if fdes else 0.0,
        "MR": miss_rate(preds),
        "DAC": dac(preds, scene),
        "n_agents": len(preds.agents),
    }
