"""Single-track (bicycle) vehicle model with a 2-D incremental action space.

Actions are a steering-angle increment and a speed increment, sampled from a
diagonal Gaussian and clamped to per-step bounds; integration is forward
Euler at a fixed step. Log densities are taken pre-clamp so policy-gradient
ratios stay well defined under saturation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import NumericError

DT = 0.1


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.8          # m
    max_steer: float = 0.6          # rad
    max_speed: float = 20.0         # m/s
    max_steer_step: float = 0.05    # rad per step
    max_speed_step: float = 0.8     # m/s per step


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float
    steer: float = 0.0
    accel_long: float = 0.0         # last applied longitudinal acceleration
    yaw_rate: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Action:
    steer_step: float   # rad per step
    speed_step: float   # m/s per step


def clamp_action(action: Action, params: VehicleParams) -> Action:
    return Action(
        steer_step=min(max(action.steer_step, -params.max_steer_step), params.max_steer_step),
        speed_step=min(max(action.speed_step, -params.max_speed_step), params.max_speed_step),
    )


def step(state: VehicleState, action: Action, dt: float = DT,
         params: VehicleParams = VehicleParams()) -> VehicleState:
    """One forward-Euler step; clamp first, then integrate.

    accel_long records the effective speed change per second after both the
    action clamp and the [0, max_speed] speed clamp.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    values = (state.x, state.y, state.heading, state.speed, state.steer,
              action.steer_step, action.speed_step)
    if not all(math.isfinite(v) for v in values):
        raise NumericError("non-finite state or action")
    action = clamp_action(action, params)
    steer = min(max(state.steer + action.steer_step, -params.max_steer), params.max_steer)
    speed = min(max(state.speed + action.speed_step, 0.0), params.max_speed)
    x = state.x + speed * math.cos(state.heading) * dt
    y = state.y + speed * math.sin(state.heading) * dt
    heading = state.heading + (speed / params.wheelbase) * math.tan(steer) * dt
    return VehicleState(
        x=x,
        y=y,
        heading=heading,
        speed=speed,
        steer=steer,
        accel_long=(speed - state.speed) / dt,
        yaw_rate=speed * math.tan(steer) / params.wheelbase,
    )


def gaussian_log_density(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> float:
    z = (x - mean) / std
    return float(np.sum(-0.5 * z * z - np.log(std) - 0.5 * math.log(2 * math.pi)))


def sample_action(mean, std, rng: np.random.Generator,
                  params: VehicleParams = VehicleParams()) -> tuple[Action, float]:
    """Diagonal-Gaussian action; returns (clamped action, pre-clamp log density)."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    if mean.shape != (2,) or std.shape != (2,):
        raise ValueError("mean and std must be 2-vectors")
    if np.any(std <= 0):
        raise ValueError("std must be positive elementwise")
    raw = mean + std * rng.standard_normal(2)
    log_prob = gaussian_log_density(raw, mean, std)
    return clamp_action(Action(steer_step=raw[0], speed_step=raw[1]), params), log_prob


def state_from_track(position: np.ndarray, heading: float, speed: float) -> VehicleState:
    return VehicleState(x=float(position[0]), y=float(position[1]),
                        heading=heading, speed=speed)
