"""Key-position prediction stage: local heterogeneous graph attention,
global interaction, multi-modal decoding, and drivable-area calibration.

Per target agent, a local graph is encoded by direction-stacked attention
(aggregation then weighted combination with a residual); a global attention
stage mixes the per-agent vectors; an MLP head decodes per-mode offsets in
each agent's heading frame plus mode probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import geometry
from .autodiff import NumericError, Tensor, concat, matmul, no_grad, softmax, stack, tensor
from .graph import DIRECTIONS, NODE_AGENT, NODE_LANE, HeteroGraph, build_hetero_graph
from .nn import MLP, Adam, LayerNorm, Linear, Module, TransformerEncoderLayer, attention
from .scene import DT, HISTORY_LEN, Scene

HETERO_MODES = ("none", "type-attr", "full", "type-stacked")

LANE_FEATURE_DIM = 8   # direction (2), length, d_t one-hot (2), passable one-hot (3)
TYPE_ONEHOT = {NODE_LANE: (1.0, 0.0), NODE_AGENT: (0.0, 1.0)}


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_heads: int = 4
    layers_local: int = 1
    layers_temporal: int = 3
    layers_global: int = 3
    decoder_mlp_layers: int = 1
    radius: float = 50.0
    n_modes: int = 6
    key_timestamps: tuple[float, ...] = (1.5, 3.0)
    hetero_mode: str = "full"

    def __post_init__(self):
        for name in ("layers_local", "layers_temporal", "layers_global", "decoder_mlp_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        ts = self.key_timestamps
        if not ts or any(t <= 0.0 or t > 3.0 for t in ts) or list(ts) != sorted(set(ts)):
            raise ValueError("key_timestamps must be strictly increasing within (0, 3.0]")
        if self.hetero_mode not in HETERO_MODES:
            raise ValueError(f"hetero_mode must be one of {HETERO_MODES}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.radius <= 0 or self.n_modes < 1:
            raise ValueError("radius must be positive and n_modes >= 1")

    @property
    def attr_dim(self) -> int:
        return {"none": 0, "type-attr": 2, "full": 2, "type-stacked": 4}[self.hetero_mode]

    @property
    def stack_groups(self) -> tuple[str, ...]:
        if self.hetero_mode == "full":
            return DIRECTIONS
        if self.hetero_mode == "type-stacked":
            return (NODE_LANE, NODE_AGENT)
        return ("all",)

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model, "n_heads": self.n_heads,
            "layers_local": self.layers_local, "layers_temporal": self.layers_temporal,
            "layers_global": self.layers_global, "decoder_mlp_layers": self.decoder_mlp_layers,
            "radius": self.radius, "n_modes": self.n_modes,
            "key_timestamps": list(self.key_timestamps), "hetero_mode": self.hetero_mode,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EncoderConfig":
        doc = dict(doc)
        doc["key_timestamps"] = tuple(doc.get("key_timestamps", (1.5, 3.0)))
        return cls(**doc)


@dataclass
class KeyPositionSet:
    """Per agent: (n_modes, n_timestamps, 2) positions and mode probabilities."""

    timestamps: tuple[float, ...]
    positions: dict[str, np.ndarray]
    probabilities: dict[str, np.ndarray]

    def __post_init__(self):
        for aid, probs in self.probabilities.items():
            if abs(float(probs.sum()) - 1.0) > 1e-6:
                raise ValueError(f"agent {aid}: mode probabilities must sum to 1")
            if self.positions[aid].shape[1] != len(self.timestamps):
                raise ValueError(f"agent {aid}: timestamp count mismatch")

    @property
    def n_modes(self) -> int:
        first = next(iter(self.positions.values()))
        return first.shape[0]

    def agent_ids(self) -> list[str]:
        return list(self.positions)

    def to_dict(self) -> dict:
        return {
            "timestamps": list(self.timestamps),
            "agents": [
                {"id": aid,
                 "positions": self.positions[aid].tolist(),
                 "probabilities": self.probabilities[aid].tolist()}
                for aid in self.positions
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "KeyPositionSet":
        positions = {}
        probabilities = {}
        for entry in doc["agents"]:
            positions[entry["id"]] = np.asarray(entry["positions"], dtype=float)
            probabilities[entry["id"]] = np.asarray(entry["probabilities"], dtype=float)
        return cls(timestamps=tuple(doc["timestamps"]), positions=positions,
                   probabilities=probabilities)


@dataclass(eq=False)
class LocalEmbedding:
    """A hetero graph with embedding features filled in."""

    graph: HeteroGraph
    node_feats: Tensor | None     # (N, d), graph.nodes order; None when no nodes
    node_attr: np.ndarray         # (N, attr_dim) one-hot block
    edge_feats: Tensor | None     # (N, d)
    center_feat: Tensor           # (1, d)
    center_attr: np.ndarray       # (attr_dim,)


class AggregationHead(Module):
    """Eq-style single-query attention: Q from the center, K/V from
    concat(source feature, edge feature); no output projection."""

    def __init__(self, d_model: int, attr_dim: int, n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.wq = Linear(d_model + attr_dim, d_model, rng, bias=False)
        self.wk = Linear(2 * d_model + attr_dim, d_model, rng, bias=False)
        self.wv = Linear(2 * d_model + attr_dim, d_model, rng, bias=False)

    def __call__(self, center_in: Tensor, source_in: Tensor) -> Tensor:
        q = self.wq(center_in)
        return attention(q, self.wk(source_in), self.wv(source_in), self.n_heads)


class GlobalInteractionLayer(Module):
    """All-to-all agent attention; keys/values carry pairwise relative-position
    embeddings rotated into each query agent's heading frame."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.d_model = d_model
        self.norm1 = LayerNorm(d_model)
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(2 * d_model, d_model, rng)
        self.wv = Linear(2 * d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)
        self.norm2 = LayerNorm(d_model)
        self.ff_in = Linear(d_model, 4 * d_model, rng)
        self.ff_out = Linear(4 * d_model, d_model, rng)

    def __call__(self, x: Tensor, rel_emb: Tensor) -> Tensor:
        n = x.shape[0]
        h = self.norm1(x)
        q = self.wq(h).reshape(n, 1, self.d_model)
        keys_in = concat([h.reshape(1, n, self.d_model).broadcast_to((n, n, self.d_model)),
                          rel_emb], axis=-1)
        k = self.wk(keys_in.reshape(n * n, -1)).reshape(n, n, self.d_model)
        v = self.wv(keys_in.reshape(n * n, -1)).reshape(n, n, self.d_model)
        out = attention(q, k, v, self.n_heads).reshape(n, self.d_model)
        x = x + self.wo(out)
        x = x + self.ff_out(self.ff_in(self.norm2(x)).relu())
        return x


class HeteroEncoder(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        d = config.d_model
        self.hist_embed = Linear(2, d, rng)
        self.pos_encoding = Tensor(rng.normal(0.0, 0.02, size=(HISTORY_LEN, d)),
                                   requires_grad=True)
        self.temporal_layers = [TransformerEncoderLayer(d, config.n_heads, rng)
                                for _ in range(config.layers_temporal)]
        self.lane_embed = Linear(LANE_FEATURE_DIM, d, rng)
        self.edge_mlp = MLP([2, d, d], rng)
        self.aggregation = [
            [AggregationHead(d, config.attr_dim, config.n_heads, rng)
             for _ in config.stack_groups]
            for _ in range(config.layers_local)
        ]
        self.score_mlp = MLP([d, d, 1], rng)
        self.rel_embed = MLP([2, d, d], rng)
        self.global_layers = [GlobalInteractionLayer(d, config.n_heads, rng)
                              for _ in range(config.layers_global)]
        k = len(config.key_timestamps)
        out_dim = config.n_modes * (2 * k + 1)
        dims = [d] + [4 * d] * config.decoder_mlp_layers + [out_dim]
        self.decoder = MLP(dims, rng)

    # -- node/edge embeddings -------------------------------------------

    def encode_agent_histories(self, scene: Scene) -> Tensor:
        """(n_agents, d) temporal embeddings, each in its agent's heading frame."""
        feats = np.zeros((len(scene.agents), HISTORY_LEN, 2))
        for i, agent in enumerate(scene.agents):
            if agent.history.shape[0] != HISTORY_LEN:
                raise ValueError(f"agent {agent.id}: history must have {HISTORY_LEN} steps")
            heading = scene.agent_heading(agent.id)
            disp = np.diff(agent.history[:, 1:3], axis=0)
            rot = geometry.rotation_matrix(heading)
            feats[i, 1:] = disp @ rot
        x = self.hist_embed(tensor(feats)) + self.pos_encoding
        for layer in self.temporal_layers:
            x = layer(x)
        return x[:, -1, :]

    def embed_nodes(self, graph: HeteroGraph, hist_embeddings: Tensor) -> LocalEmbedding:
        cfg = self.config
        center_feat = hist_embeddings[graph.center_index].reshape(1, cfg.d_model)
        center_attr = self._center_attr()
        n = len(graph.nodes)
        node_attr = self._node_attrs(graph)
        if n == 0:
            return LocalEmbedding(graph, None, node_attr, None, center_feat, center_attr)

        agent_rows = [i for i, nd in enumerate(graph.nodes) if nd.kind == NODE_AGENT]
        lane_rows = [i for i, nd in enumerate(graph.nodes) if nd.kind == NODE_LANE]
        parts: list[tuple[list[int], Tensor]] = []
        if agent_rows:
            idx = np.array([graph.nodes[i].agent_index for i in agent_rows])
            parts.append((agent_rows, hist_embeddings[idx]))
        if lane_rows:
            rot = geometry.rotation_matrix(graph.center_heading)
            lane_feats = np.zeros((len(lane_rows), LANE_FEATURE_DIM))
            for j, i in enumerate(lane_rows):
                lane = graph.nodes[i].lane
                lane_feats[j, 0:2] = lane.direction @ rot
                lane_feats[j, 2] = lane.length
                lane_feats[j, 3] = 1.0 if lane.direction_attr == "same" else 0.0
                lane_feats[j, 4] = 1.0 if lane.direction_attr == "opposite" else 0.0
                lane_feats[j, 5 + ("green", "red", "uncontrolled").index(lane.passable)] = 1.0
            parts.append((lane_rows, self.lane_embed(tensor(lane_feats))))

        order = np.argsort(np.concatenate([rows for rows, _ in parts]))
        node_feats = concat([feats for _, feats in parts], axis=0)[order]
        return LocalEmbedding(graph, node_feats, node_attr,
                              self.embed_edges(graph), center_feat, center_attr)

    def embed_edges(self, graph: HeteroGraph) -> Tensor | None:
        """MLP of each source's position relative to the center, center frame."""
        if not graph.edges:
            return None
        rel = np.array([e.relative_position for e in graph.edges])
        return self.edge_mlp(tensor(rel))

    def _center_attr(self) -> np.ndarray:
        mode = self.config.hetero_mode
        if mode in ("type-attr", "full"):
            return np.array(TYPE_ONEHOT[NODE_AGENT])
        if mode == "type-stacked":
            return np.zeros(4)  # the center has no direction relative to itself
        return np.zeros(0)

    def _node_attrs(self, graph: HeteroGraph) -> np.ndarray:
        mode = self.config.hetero_mode
        n = len(graph.nodes)
        if mode in ("type-attr", "full"):
            return np.array([TYPE_ONEHOT[nd.kind] for nd in graph.nodes]).reshape(n, 2)
        if mode == "type-stacked":
            attr = np.zeros((n, 4))
            for e in graph.edges:
                attr[e.node_index, DIRECTIONS.index(e.direction)] = 1.0
            return attr
        return np.zeros((n, 0))

    # -- aggregation and combination ------------------------------------

    def _group_rows(self, graph: HeteroGraph, group: str) -> np.ndarray:
        if group == "all":
            rows = range(len(graph.nodes))
        elif group in DIRECTIONS:
            rows = graph.nodes_in_direction(group)
        else:
            rows = [i for i, nd in enumerate(graph.nodes) if nd.kind == group]
        return np.fromiter(rows, dtype=int)

    def aggregate_direction(self, embedded: LocalEmbedding, group: str,
                            layer: int = 0) -> Tensor:
        """Aggregated (1, d) vector for one stack group; zeros when empty."""
        rows = self._group_rows(embedded.graph, group)
        if rows.size == 0:
            return tensor(np.zeros((1, self.config.d_model)))
        head = self.aggregation[layer][list(self.config.stack_groups).index(group)]
        center_in = concat(
            [embedded.center_feat, tensor(embedded.center_attr.reshape(1, -1))], axis=1
        ) if self.config.attr_dim else embedded.center_feat
        source = embedded.node_feats[rows]
        attr = embedded.node_attr[rows]
        pieces = [source]
        if self.config.attr_dim:
            pieces.append(tensor(attr))
        pieces.append(embedded.edge_feats[rows])
        return head(center_in, concat(pieces, axis=1))

    def combine_directions(self, center_feat: Tensor, aggregates: list[Tensor]) -> Tensor:
        """Softmax-weighted sum of group aggregates, residual-added to the center."""
        stacked = concat(aggregates, axis=0)                    # (g, d)
        scores = self.score_mlp(stacked)                        # (g, 1)
        weights = softmax(scores, axis=0)
        combined = (weights * stacked).sum(axis=0, keepdims=True)
        return combined + center_feat

    def encode_local(self, embedded: LocalEmbedding) -> Tensor:
        out = embedded.center_feat
        for layer in range(self.config.layers_local):
            current = replace(embedded, center_feat=out)
            aggregates = [self.aggregate_direction(current, g, layer)
                          for g in self.config.stack_groups]
            out = self.combine_directions(out, aggregates)
        return out

    # -- global stage and decoding ---------------------------------------

    def global_interaction(self, vectors: Tensor, positions: np.ndarray,
                           headings: np.ndarray) -> Tensor:
        n = vectors.shape[0]
        rel = np.zeros((n, n, 2))
        for i in range(n):
            rel[i] = (positions - positions[i]) @ geometry.rotation_matrix(headings[i])
        rel_emb = self.rel_embed(tensor(rel.reshape(n * n, 2))).reshape(
            n, n, self.config.d_model)
        x = vectors
        for layer in self.global_layers:
            x = layer(x, rel_emb)
        return x

    def decode_key_positions(self, vectors: Tensor, positions: np.ndarray,
                             headings: np.ndarray) -> tuple[Tensor, Tensor]:
        """(positions (n, F, K, 2) global frame, mode logits (n, F))."""
        cfg = self.config
        n = vectors.shape[0]
        k = len(cfg.key_timestamps)
        out = self.decoder(vectors)
        offsets = out[:, : cfg.n_modes * 2 * k].reshape(n, cfg.n_modes * k, 2)
        logits = out[:, cfg.n_modes * 2 * k:]
        rot_t = np.stack([geometry.rotation_matrix(h).T for h in headings])
        rotated = matmul(offsets, tensor(rot_t))
        decoded = rotated + tensor(positions.reshape(n, 1, 2))
        return decoded.reshape(n, cfg.n_modes, k, 2), logits

    def forward_tensors(self, scene: Scene) -> tuple[Tensor, Tensor, list[str]]:
        """Differentiable forward pass over every agent in the scene."""
        hist = self.encode_agent_histories(scene)
        positions = np.array([a.position for a in scene.agents])
        headings = np.array([scene.agent_heading(a.id) for a in scene.agents])
        locals_ = []
        for agent in scene.agents:
            graph = build_hetero_graph(scene, agent.id, self.config.radius)
            locals_.append(self.encode_local(self.embed_nodes(graph, hist)))
        vectors = concat(locals_, axis=0)
        vectors = self.global_interaction(vectors, positions, headings)
        return (*self.decode_key_positions(vectors, positions, headings),
                [a.id for a in scene.agents])

    def predict(self, scene: Scene) -> KeyPositionSet:
        with no_grad():
            decoded, logits, ids = self.forward_tensors(scene)
            probs = softmax(logits, axis=1)
        return KeyPositionSet(
            timestamps=self.config.key_timestamps,
            positions={aid: decoded.data[i].copy() for i, aid in enumerate(ids)},
            probabilities={aid: probs.data[i].copy() for i, aid in enumerate(ids)},
        )


# -- calibration ----------------------------------------------------------


def calibrate_key_positions(kps: KeyPositionSet, scene: Scene) -> KeyPositionSet:
    """Project every off-area key position onto the nearest lanelet centerline."""
    positions = {}
    for aid, pos in kps.positions.items():
        fixed = pos.copy()
        flat = fixed.reshape(-1, 2)
        for i, point in enumerate(flat):
            if not scene.in_drivable_area(point):
                _, foot, _ = scene.nearest_lanelet(point)
                flat[i] = foot
        positions[aid] = fixed
    return KeyPositionSet(timestamps=kps.timestamps, positions=positions,
                          probabilities={k: v.copy() for k, v in kps.probabilities.items()})


# -- training ---------------------------------------------------------------


def ground_truth_key_positions(scene: Scene, timestamps: tuple[float, ...]) -> dict[str, np.ndarray]:
    """Future sampled at the key timestamps: (n_timestamps, 2) per agent."""
    out = {}
    for agent in scene.agents:
        if agent.future_gt is None:
            raise ValueError(f"agent {agent.id}: ground-truth future required")
        rows = []
        for ts in timestamps:
            idx = int(round(ts / DT)) - 1
            rows.append(agent.future_gt[idx, 1:3])
        out[agent.id] = np.array(rows)
    return out


def _smooth_l1(x: Tensor) -> Tensor:
    a = x.relu() + (-x).relu()          # |x|
    return 0.5 * a.clip(0.0, 1.0) ** 2 + (a - 1.0).relu()


def encoder_loss(encoder: HeteroEncoder, scene: Scene) -> tuple[Tensor, float]:
    """Winner-take-all smooth-L1 on the best mode plus mode cross-entropy.

    Returns (loss, batch best-mode final displacement error).
    """
    decoded, logits, ids = encoder.forward_tensors(scene)
    gt = ground_truth_key_positions(scene, encoder.config.key_timestamps)
    gt_arr = np.stack([gt[a] for a in ids])                        # (n, K, 2)
    final_err = np.linalg.norm(decoded.data[:, :, -1, :] - gt_arr[:, None, -1, :], axis=-1)
    winners = np.argmin(final_err, axis=1)                         # (n,)

    n = len(ids)
    winner_pos = decoded[np.arange(n), winners]                    # (n, K, 2)
    reg = _smooth_l1(winner_pos - tensor(gt_arr)).mean()
    probs = softmax(logits, axis=1)
    ce = -((probs[np.arange(n), winners] + 1e-12).log().mean())
    fde = float(final_err[np.arange(n), winners].mean())
    return reg + ce, fde


def train_encoder(
    scenes: list[Scene],
    config: EncoderConfig,
    epochs: int,
    lr: float = 1e-4,
    seed: int = 0,
) -> tuple[HeteroEncoder, list[dict]]:
    """Adam over per-scene losses; deterministic under `seed`.

    Returns the trained encoder and one log row per epoch
    (epoch, mean loss, mean winner-mode FDE).
    """
    for scene in scenes:
        for agent in scene.agents:
            if agent.future_gt is None:
                raise ValueError("every training scene needs ground-truth futures")
    rng = np.random.default_rng(seed)
    encoder = HeteroEncoder(config, rng)
    opt = Adam(encoder.parameters(), lr=lr)
    history = []
    order = np.arange(len(scenes))
    for epoch in range(epochs):
        rng.shuffle(order)
        losses, fdes = [], []
        for i in order:
            opt.zero_grad()
            try:
                loss, fde = encoder_loss(encoder, scenes[i])
                loss.backward()
            except NumericError as exc:
                raise NumericError(
                    f"non-finite loss at epoch {epoch} scene index {i}: {exc}") from None
            opt.step()
            losses.append(float(loss.data))
            fdes.append(fde)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                        "fde": float(np.mean(fdes))})
    return encoder, history
