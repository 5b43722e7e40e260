"""Policy/value networks for the sub-scene planner.

The transformer arm self-attends over lane tokens and cross-attends the
motion token against them (queries from the motion state, keys/values from
the sub-scene context), so any token count works and lane-token order is
irrelevant. The vanilla arm is a two-layer MLP over mean-pooled lane tokens
concatenated with the motion token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, tensor
from .nn import CrossAttentionLayer, LayerNorm, Linear, Module, TransformerEncoderLayer
from .subscene import LANE_TOKEN_DIM, MOTION_TOKEN_DIM, Observation

POLICY_ARCHS = ("transformer", "mlp")


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.95
    gae_lambda: float = 0.97
    clip_epsilon: float = 0.2
    lr: float = 1e-4
    rollout_steps: int = 512
    buffer_capacity: int = 8092
    minibatch_size: int = 1024
    epochs_per_update: int = 10
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    d_model: int = 64
    n_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    policy_arch: str = "transformer"
    action_model: str = "kinematic"
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    init_std_fraction: float = 0.5   # initial std as a fraction of the action bound

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0 or not 0.0 < self.gae_lambda <= 1.0:
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.clip_epsilon <= 0.0:
            raise ValueError("clip_epsilon must be positive")
        if self.policy_arch not in POLICY_ARCHS:
            raise ValueError(f"policy_arch must be one of {POLICY_ARCHS}")
        if self.rollout_steps > self.buffer_capacity:
            raise ValueError("rollout_steps cannot exceed buffer_capacity")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 < self.init_std_fraction <= 1.0:
            raise ValueError("init_std_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma, "gae_lambda": self.gae_lambda,
            "clip_epsilon": self.clip_epsilon, "lr": self.lr,
            "rollout_steps": self.rollout_steps, "buffer_capacity": self.buffer_capacity,
            "minibatch_size": self.minibatch_size,
            "epochs_per_update": self.epochs_per_update,
            "value_coef": self.value_coef, "entropy_coef": self.entropy_coef,
            "d_model": self.d_model, "n_heads": self.n_heads,
            "encoder_layers": self.encoder_layers, "decoder_layers": self.decoder_layers,
            "policy_arch": self.policy_arch, "action_model": self.action_model,
            "log_std_min": self.log_std_min, "log_std_max": self.log_std_max,
            "init_std_fraction": self.init_std_fraction,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PPOConfig":
        return cls(**doc)


class _PolicyBase(Module):
    """Shared trunk-readout: Gaussian heads in physical action units.

    The raw head outputs are scaled by the per-dimension action bound; the
    log-std starts near half the bound and is clamped to the configured range.
    """

    def _init_heads(self, d_model: int, action_scale: np.ndarray,
                    config: PPOConfig, rng: np.random.Generator):
        self.policy_head = Linear(d_model, 4, rng)
        self.value_head = Linear(d_model, 1, rng)
        # small-gain heads: near-zero initial action means and values, and
        # log-stds that start at the offset instead of pinned at a clamp
        self.policy_head.weight.data *= 0.01
        self.policy_head.bias.data *= 0.01
        self._scale = tensor(np.asarray(action_scale, dtype=float))
        self._log_std_offset = tensor(
            np.log(config.init_std_fraction * np.asarray(action_scale)))
        self._log_std_min = config.log_std_min
        self._log_std_max = config.log_std_max

    def _readout(self, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        out = self.policy_head(h)
        mean = out[:, 0:2] * self._scale
        log_std = (out[:, 2:4] + self._log_std_offset).clip(
            self._log_std_min, self._log_std_max)
        return mean, log_std.exp(), self.value_head(h).reshape(h.shape[0])

    def forward_batch(self, lane_tokens: Tensor | None, motion: Tensor):
        raise NotImplementedError

    def forward(self, obs: Observation) -> tuple[Tensor, Tensor, Tensor]:
        """(mean (1,2), std (1,2), value (1,)) for a single observation."""
        lane = tensor(obs.lane_tokens[None, :, :]) if len(obs.lane_tokens) else None
        return self.forward_batch(lane, tensor(obs.motion_token[None, :]))


class TransformerPolicy(_PolicyBase):
    def __init__(self, config: PPOConfig, action_scale: np.ndarray,
                 rng: np.random.Generator):
        d = config.d_model
        self.lane_embed = Linear(LANE_TOKEN_DIM, d, rng)
        self.motion_embed = Linear(MOTION_TOKEN_DIM, d, rng)
        self.encoder = [TransformerEncoderLayer(d, config.n_heads, rng)
                        for _ in range(config.encoder_layers)]
        self.decoder = [CrossAttentionLayer(d, config.n_heads, rng)
                        for _ in range(config.decoder_layers)]
        self.final_norm = LayerNorm(d)
        self._init_heads(d, action_scale, config, rng)

    def forward_batch(self, lane_tokens: Tensor | None, motion: Tensor):
        """lane_tokens: (B, T, lane_dim) or None when the sub-scene has no
        lane nodes; motion: (B, motion_dim)."""
        b = motion.shape[0]
        q = self.motion_embed(motion).reshape(b, 1, -1)
        if lane_tokens is not None and lane_tokens.shape[1] > 0:
            ctx = self.lane_embed(lane_tokens)
            for layer in self.encoder:
                ctx = layer(ctx)
            for layer in self.decoder:
                q = layer(q, ctx)
        else:
            for layer in self.decoder:
                q = layer.feed_forward_only(q)
        return self._readout(self.final_norm(q.reshape(b, -1)))


class MlpPolicy(_PolicyBase):
    """Vanilla arm: two hidden layers of the model width over mean-pooled
    lane tokens concatenated with the motion token."""

    def __init__(self, config: PPOConfig, action_scale: np.ndarray,
                 rng: np.random.Generator):
        d = config.d_model
        self.lin1 = Linear(LANE_TOKEN_DIM + MOTION_TOKEN_DIM, d, rng)
        self.lin2 = Linear(d, d, rng)
        self._init_heads(d, action_scale, config, rng)

    def forward_batch(self, lane_tokens: Tensor | None, motion: Tensor):
        b = motion.shape[0]
        if lane_tokens is not None and lane_tokens.shape[1] > 0:
            pooled = lane_tokens.mean(axis=1)
        else:
            pooled = tensor(np.zeros((b, LANE_TOKEN_DIM)))
        h = self.lin2(self.lin1(concat([pooled, motion], axis=1)).relu()).relu()
        return self._readout(h)


def build_policy(config: PPOConfig, action_scale: np.ndarray,
                 rng: np.random.Generator) -> _PolicyBase:
    cls = TransformerPolicy if config.policy_arch == "transformer" else MlpPolicy
    return cls(config, action_scale, rng)
