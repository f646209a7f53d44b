"""Instruction, panoramic observation, and navigation trajectory encoders.

The observation embedding sums a normalized visual projection with a
normalized geometric projection per slot; slot 0 is a learned stop
token, followed by the panorama views and one entry per candidate
waypoint.  A small self-attention transformer (no position embeddings;
geometry already locates each slot) then mixes the slots.

The trajectory sequence starts with its own stop token, contains one
entry per visited step, then one entry per current candidate waypoint.
Visual representations entering the trajectory are stored episode
memory and are treated as constants during backpropagation; gradients
flow only through the geometric projections and step embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, VocabularyError
from .nn import EncoderLayer, Linear, LayerNorm, ParamItems, Parameter, embedding_init


class InstructionEncoder:
    """Token + position + type embeddings through self-attention layers."""

    def __init__(self, rng, vocab_size: int, hidden: int, heads: int, layers: int,
                 max_len: int, eps: float, dtype=np.float32) -> None:
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.tokens = Parameter(embedding_init(rng, vocab_size, hidden, dtype))
        self.positions = Parameter(embedding_init(rng, max_len, hidden, dtype))
        # row 0 tags text tokens; row 1 is reserved for non-text streams
        self.types = Parameter(embedding_init(rng, 2, hidden, dtype))
        self.layers = [EncoderLayer(rng, hidden, heads, eps, dtype) for _ in range(layers)]

    def named_parameters(self, prefix: str) -> ParamItems:
        yield f"{prefix}.tokens", self.tokens
        yield f"{prefix}.positions", self.positions
        yield f"{prefix}.types", self.types
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.layer{i}")

    def forward(self, token_ids: list[int] | np.ndarray) -> tuple[np.ndarray, tuple]:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise DimensionError(f"expected a non-empty id vector, got shape {ids.shape}")
        if ids.size > self.max_len:
            raise DimensionError(
                f"instruction of length {ids.size} exceeds the maximum {self.max_len}"
            )
        if np.any(ids < 0) or np.any(ids >= self.vocab_size):
            bad = ids[(ids < 0) | (ids >= self.vocab_size)][0]
            raise VocabularyError(f"token id {bad} outside vocabulary of size {self.vocab_size}")
        x = self.tokens.value[ids] + self.positions.value[: ids.size] + self.types.value[0]
        layer_caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            layer_caches.append(cache)
        return x, (ids, layer_caches)

    def backward(self, d_out: np.ndarray, cache: tuple) -> None:
        ids, layer_caches = cache
        dx = d_out
        for layer, c in zip(reversed(self.layers), reversed(layer_caches)):
            dx = layer.backward(dx, c)
        np.add.at(self.tokens.grad, ids, dx)
        self.positions.grad[: ids.size] += dx
        self.types.grad[0] += dx.sum(axis=0)


@dataclass
class ObservationInput:
    """Raw per-step panorama content handed to the observation encoder.

    Geometry per slot: heading/elevation relative to the agent, line
    distance for candidate slots (zero elsewhere), plus the agent-level
    orientation to the start waypoint and progress terms shared by all
    slots.
    """

    view_features: np.ndarray          # (K, view_dim)
    view_headings: np.ndarray          # (K,)
    view_elevations: np.ndarray        # (K,)
    candidate_features: np.ndarray     # (C, view_dim)
    candidate_headings: np.ndarray     # (C,)
    candidate_elevations: np.ndarray   # (C,)
    candidate_distances: np.ndarray    # (C,)
    candidate_ids: list[int]           # graph node per candidate slot
    start_heading: float = 0.0         # agent-to-start orientation
    start_elevation: float = 0.0
    progress: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def view_count(self) -> int:
        return int(self.view_features.shape[0])

    @property
    def candidate_count(self) -> int:
        return int(self.candidate_features.shape[0])


GEOMETRY_WIDTH = 12  # [sin/cos heading, sin/cos elevation, distance, start 4-vector, progress 3-vector]


def observation_geometry_rows(obs: ObservationInput, dtype) -> np.ndarray:
    k, c = obs.view_count, obs.candidate_count
    rows = np.zeros((k + c, GEOMETRY_WIDTH), dtype=np.float64)
    headings = np.concatenate([obs.view_headings, obs.candidate_headings])
    elevations = np.concatenate([obs.view_elevations, obs.candidate_elevations])
    rows[:, 0] = np.sin(headings)
    rows[:, 1] = np.cos(headings)
    rows[:, 2] = np.sin(elevations)
    rows[:, 3] = np.cos(elevations)
    rows[k:, 4] = obs.candidate_distances
    rows[:, 5] = np.sin(obs.start_heading)
    rows[:, 6] = np.cos(obs.start_heading)
    rows[:, 7] = np.sin(obs.start_elevation)
    rows[:, 8] = np.cos(obs.start_elevation)
    rows[:, 9:12] = np.asarray(obs.progress)
    return rows.astype(dtype)


class ObservationEncoder:
    """Per-slot embedding plus a small panorama transformer."""

    def __init__(self, rng, view_dim: int, hidden: int, heads: int, layers: int,
                 eps: float, dtype=np.float32) -> None:
        self.view_dim = view_dim
        self.hidden = hidden
        self.dtype = dtype
        self.visual = Linear(rng, view_dim, hidden, bias=False, dtype=dtype)
        self.geometric = Linear(rng, GEOMETRY_WIDTH, hidden, bias=False, dtype=dtype)
        self.ln_visual = LayerNorm(hidden, eps, dtype)
        self.ln_geometric = LayerNorm(hidden, eps, dtype)
        self.stop_token = Parameter(embedding_init(rng, 1, hidden, dtype)[0])
        self.layers = [EncoderLayer(rng, hidden, heads, eps, dtype) for _ in range(layers)]

    def named_parameters(self, prefix: str) -> ParamItems:
        yield from self.visual.named_parameters(f"{prefix}.visual")
        yield from self.geometric.named_parameters(f"{prefix}.geometric")
        yield from self.ln_visual.named_parameters(f"{prefix}.ln_visual")
        yield from self.ln_geometric.named_parameters(f"{prefix}.ln_geometric")
        yield f"{prefix}.stop_token", self.stop_token
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.layer{i}")

    def embed(self, obs: ObservationInput) -> tuple[np.ndarray, tuple]:
        """The per-slot embedding before the panorama transformer."""
        if obs.view_features.shape[1] != self.view_dim:
            raise DimensionError(
                f"view features must be (*, {self.view_dim}), got {obs.view_features.shape}"
            )
        if not (
            len(obs.candidate_ids)
            == obs.candidate_count
            == obs.candidate_headings.shape[0]
            == obs.candidate_distances.shape[0]
        ):
            raise ValueError("candidate arrays disagree on the candidate count")
        if obs.view_headings.shape[0] != obs.view_count:
            raise ValueError("view arrays disagree on the view count")
        visual = np.concatenate([obs.view_features, obs.candidate_features]).astype(self.dtype)
        geo = observation_geometry_rows(obs, self.dtype)
        vis_proj, c_vis = self.visual.forward(visual)
        vis_normed, c_lnv = self.ln_visual.forward(vis_proj)
        geo_proj, c_geo = self.geometric.forward(geo)
        geo_normed, c_lng = self.ln_geometric.forward(geo_proj)
        slots = np.vstack([self.stop_token.value[np.newaxis, :], vis_normed + geo_normed])
        return slots, (c_vis, c_lnv, c_geo, c_lng)

    def forward(self, obs: ObservationInput) -> tuple[np.ndarray, tuple]:
        slots, embed_cache = self.embed(obs)
        x = slots
        layer_caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            layer_caches.append(cache)
        return x, (embed_cache, layer_caches)

    def backward(self, d_out: np.ndarray, cache: tuple) -> None:
        embed_cache, layer_caches = cache
        c_vis, c_lnv, c_geo, c_lng = embed_cache
        dx = d_out
        for layer, c in zip(reversed(self.layers), reversed(layer_caches)):
            dx = layer.backward(dx, c)
        self.stop_token.grad += dx[0]
        d_slots = dx[1:]
        d_vis = self.ln_visual.backward(d_slots, c_lnv)
        self.visual.backward(d_vis, c_vis)
        d_geo = self.ln_geometric.backward(d_slots, c_lng)
        self.geometric.backward(d_geo, c_geo)


@dataclass
class TrajectoryEntryInput:
    """One trajectory slot: a stored visual vector plus geometry to the
    current agent and a step-embedding index."""

    visual: np.ndarray      # (hidden,) stored constant
    distance: float
    sin_heading: float
    cos_heading: float
    step_index: int


@dataclass
class TrajectorySequence:
    tokens: np.ndarray                    # (1 + t + C, hidden)
    history_count: int
    candidate_ids: list[int]

    @property
    def candidate_slots(self) -> np.ndarray:
        start = 1 + self.history_count
        return np.arange(start, start + len(self.candidate_ids))


class TrajectoryEncoder:
    """Builds the trajectory sequence of Eq.-style visited/candidate slots."""

    def __init__(self, rng, hidden: int, max_steps: int, eps: float, dtype=np.float32) -> None:
        self.hidden = hidden
        self.max_steps = max_steps
        self.dtype = dtype
        self.stop_token = Parameter(embedding_init(rng, 1, hidden, dtype)[0])
        self.visited_geo = Linear(rng, 3, hidden, bias=False, dtype=dtype)
        self.candidate_geo = Linear(rng, 3, hidden, bias=False, dtype=dtype)
        self.ln_visited_vis = LayerNorm(hidden, eps, dtype)
        self.ln_visited_geo = LayerNorm(hidden, eps, dtype)
        self.ln_candidate_vis = LayerNorm(hidden, eps, dtype)
        self.ln_candidate_geo = LayerNorm(hidden, eps, dtype)
        self.steps = Parameter(embedding_init(rng, max_steps, hidden, dtype))

    def named_parameters(self, prefix: str) -> ParamItems:
        yield f"{prefix}.stop_token", self.stop_token
        yield from self.visited_geo.named_parameters(f"{prefix}.visited_geo")
        yield from self.candidate_geo.named_parameters(f"{prefix}.candidate_geo")
        yield from self.ln_visited_vis.named_parameters(f"{prefix}.ln_visited_vis")
        yield from self.ln_visited_geo.named_parameters(f"{prefix}.ln_visited_geo")
        yield from self.ln_candidate_vis.named_parameters(f"{prefix}.ln_candidate_vis")
        yield from self.ln_candidate_geo.named_parameters(f"{prefix}.ln_candidate_geo")
        yield f"{prefix}.steps", self.steps

    def _clamp_steps(self, indices: np.ndarray) -> np.ndarray:
        return np.clip(indices, 0, self.max_steps - 1)

    def forward(
        self,
        history: list[TrajectoryEntryInput],
        candidates: list[TrajectoryEntryInput],
        candidate_ids: list[int],
    ) -> tuple[TrajectorySequence, tuple]:
        if len(candidates) != len(candidate_ids):
            raise ValueError("candidate entries and ids disagree")
        rows = [self.stop_token.value]
        caches: dict = {"t": len(history), "c": len(candidates)}
        for group, entries in (("visited", history), ("candidate", candidates)):
            if not entries:
                caches[group] = None
                continue
            visual = np.stack([e.visual for e in entries]).astype(self.dtype)
            geo = np.array(
                [[e.distance, e.sin_heading, e.cos_heading] for e in entries],
                dtype=self.dtype,
            )
            steps = self._clamp_steps(np.array([e.step_index for e in entries]))
            if group == "visited":
                ln_vis, ln_geo, proj = self.ln_visited_vis, self.ln_visited_geo, self.visited_geo
            else:
                ln_vis, ln_geo, proj = self.ln_candidate_vis, self.ln_candidate_geo, self.candidate_geo
            v_normed, c_v = ln_vis.forward(visual)
            g_proj, c_p = proj.forward(geo)
            g_normed, c_g = ln_geo.forward(g_proj)
            out = v_normed + g_normed + self.steps.value[steps]
            rows.extend(out)
            caches[group] = (c_v, c_p, c_g, steps)
        tokens = np.stack(rows)
        seq = TrajectorySequence(
            tokens=tokens, history_count=len(history), candidate_ids=list(candidate_ids)
        )
        return seq, caches

    def backward(self, d_tokens: np.ndarray, caches: dict) -> None:
        self.stop_token.grad += d_tokens[0]
        t = caches["t"]
        offset = 1
        for group, count in (("visited", t), ("candidate", caches["c"])):
            cache = caches[group]
            if cache is None:
                continue
            c_v, c_p, c_g, steps = cache
            d_rows = d_tokens[offset : offset + count]
            offset += count
            if group == "visited":
                ln_vis, ln_geo, proj = self.ln_visited_vis, self.ln_visited_geo, self.visited_geo
            else:
                ln_vis, ln_geo, proj = self.ln_candidate_vis, self.ln_candidate_geo, self.candidate_geo
            ln_vis.backward(d_rows, c_v)       # visual inputs are stored constants
            d_geo = ln_geo.backward(d_rows, c_g)
            proj.backward(d_geo, c_p)
            np.add.at(self.steps.grad, steps, d_rows)
