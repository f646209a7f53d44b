"""The full navigation model: encoders, mapping, reasoning, and scoring.

The model is stateful within an episode: it owns the grid memory bank,
the projection cache, and the visited-waypoint memory.  Each decision
step consumes a :class:`StepInput` (panorama content plus the features
already projected to world coordinates) and returns action scores.

Visual vectors entering the trajectory memory (pooled panoramas and
candidate view representations) are stored as constants: gradients do
not flow through them back into earlier steps' panorama encodings.
Training mode keeps per-step tapes so one hand-chained backward pass
over the episode accumulates every parameter gradient, including the
instruction encoder's, which collects word-feature gradients from the
relevance path, stage one, and stage two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .aggregation import (
    AggregationParams,
    AggregationTape,
    ProjectionCache,
    aggregate_map,
    aggregate_map_backward,
)
from .config import ModelConfig
from .encoders import (
    InstructionEncoder,
    ObservationEncoder,
    ObservationInput,
    TrajectoryEncoder,
    TrajectoryEntryInput,
)
from .errors import DimensionError
from .geometry import WorldPose, bearing, normalize_heading
from .grid_memory import GridMapCells, GridMemoryBank, build_grid_map
from .nn import (
    CrossModalLayer,
    Parameter,
    cross_entropy_with_grad,
    load_checkpoint,
    make_rng,
    save_checkpoint,
)
from .reasoner import (
    ActionHeads,
    ActionScores,
    fuse_scores,
    fuse_scores_backward,
    global_scores,
    her_scores,
    local_scores,
    stage_one,
    stage_one_backward,
    stage_two,
    stage_two_backward,
)
from .reasoner import _head_backward  # shared sparse-slot helper


@dataclass
class StepInput:
    """Everything the model consumes at one decision step."""

    obs: ObservationInput
    grid_features: np.ndarray   # (I, feature_dim)
    grid_points: np.ndarray     # (I, 2) absolute world coordinates
    pose: WorldPose
    node: int
    step: int                   # 1-based decision step


@dataclass
class _VisitRecord:
    node: int
    x: float
    y: float
    pooled: np.ndarray


@dataclass
class _StepTape:
    obs_cache: tuple
    agg_tape: AggregationTape | None
    traj_cache: dict
    s1_cache: tuple
    s2_cache: tuple
    local_cache: tuple
    global_cache: tuple
    her_cache: tuple | None
    fuse_cache: tuple
    fused: np.ndarray
    her: np.ndarray | None


@dataclass
class PinnedMemory:
    """Per-step visual constants recorded from a previous forward pass.

    Replaying an episode with pinned memory reproduces the stored
    trajectory exactly, which keeps finite differences consistent with
    the model's stored-memory gradient semantics.
    """

    pooled: list[np.ndarray] = field(default_factory=list)
    candidate_reps: list[np.ndarray] = field(default_factory=list)


class NavigationModel:
    """Composable parameter groups plus the per-episode pipeline."""

    def __init__(self, cfg: ModelConfig, vocab_size: int, seed: int = 0) -> None:
        self.cfg = cfg
        self.vocab_size = vocab_size
        dtype = np.dtype(cfg.dtype).type
        self.dtype = dtype
        rng = make_rng(seed)
        eps = cfg.layer_norm_eps
        self.instruction = InstructionEncoder(
            rng, vocab_size, cfg.hidden, cfg.heads, cfg.language_layers,
            cfg.max_instruction_length, eps, dtype,
        )
        self.observation = ObservationEncoder(
            rng, cfg.view_dim, cfg.hidden, cfg.heads, cfg.panorama_layers, eps, dtype,
        )
        self.aggregation = AggregationParams(
            rng, cfg.feature_dim, cfg.hidden, cfg.relevance_dim, eps, dtype,
        )
        self.trajectory = TrajectoryEncoder(rng, cfg.hidden, cfg.max_step_embeddings, eps, dtype)
        self.stage_one_layers = [
            CrossModalLayer(rng, cfg.hidden, cfg.heads, eps, dtype)
            for _ in range(cfg.stage_one_layers)
        ]
        self.stage_two_layers = [
            CrossModalLayer(rng, cfg.hidden, cfg.heads, eps, dtype)
            for _ in range(cfg.stage_two_layers)
        ]
        self.heads = ActionHeads(rng, cfg.hidden, dtype)
        self.param_version = 0
        self.use_projection_cache = True

        # per-episode state
        self._reset_episode_state()

    # ------------------------------------------------------------------
    # parameter registry
    # ------------------------------------------------------------------

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, p in self.instruction.named_parameters("instruction"):
            out[name] = p
        for name, p in self.observation.named_parameters("observation"):
            out[name] = p
        for name, p in self.aggregation.named_parameters("aggregation"):
            out[name] = p
        for name, p in self.trajectory.named_parameters("trajectory"):
            out[name] = p
        for i, layer in enumerate(self.stage_one_layers):
            for name, p in layer.named_parameters(f"stage_one.{i}"):
                out[name] = p
        for i, layer in enumerate(self.stage_two_layers):
            for name, p in layer.named_parameters(f"stage_two.{i}"):
                out[name] = p
        for name, p in self.heads.named_parameters("heads"):
            out[name] = p
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def save(self, path, meta: dict | None = None) -> None:
        info = {"vocab_size": self.vocab_size, "hidden": self.cfg.hidden}
        info.update(meta or {})
        save_checkpoint(self.named_parameters(), path, meta=info)

    def load(self, path) -> dict:
        arrays, meta = load_checkpoint(path)
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise DimensionError(
                f"checkpoint mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}"
            )
        for name, p in params.items():
            if arrays[name].shape != p.value.shape:
                raise DimensionError(
                    f"checkpoint {name} has shape {arrays[name].shape}, expected {p.value.shape}"
                )
            p.value[...] = arrays[name]
        return meta

    # ------------------------------------------------------------------
    # episode pipeline
    # ------------------------------------------------------------------

    def _reset_episode_state(self) -> None:
        self.bank: GridMemoryBank | None = None
        self.proj_cache: ProjectionCache | None = None
        self.word_features: np.ndarray | None = None
        self._instr_cache = None
        self._instr_tag: object = None
        self._visited: list[_VisitRecord] = []
        self._tapes: list[_StepTape] = []
        self._start_pose: WorldPose | None = None
        self._train = False
        self._pinned: PinnedMemory | None = None
        self._recorded = PinnedMemory()
        self.map_snapshots: list[GridMapCells] = []

    def begin_episode(
        self,
        token_ids: list[int] | np.ndarray,
        start_pose: WorldPose,
        train: bool = False,
        pinned: PinnedMemory | None = None,
    ) -> None:
        self._reset_episode_state()
        self._train = train
        self._pinned = pinned
        self._start_pose = start_pose
        self.bank = GridMemoryBank(self.cfg.feature_dim)
        self.proj_cache = ProjectionCache() if self.use_projection_cache else None
        if self.proj_cache is not None:
            self.proj_cache.validate(self.param_version)
        self._instr_tag = tuple(int(t) for t in token_ids)
        self.word_features, self._instr_cache = self.instruction.forward(token_ids)

    def step(self, step_input: StepInput) -> ActionScores:
        if self.word_features is None:
            raise RuntimeError("begin_episode must be called before step")
        cfg = self.cfg
        obs = step_input.obs
        pose = step_input.pose
        t = step_input.step

        o_prime, obs_cache = self.observation.forward(obs)
        k = obs.view_count
        c = obs.candidate_count
        cand_slots_obs = np.arange(1 + k, 1 + k + c)

        if self._pinned is not None:
            pooled = self._pinned.pooled[t - 1]
            cand_reps = self._pinned.candidate_reps[t - 1]
        else:
            pooled = o_prime[1:].mean(axis=0).copy()
            cand_reps = o_prime[cand_slots_obs].copy()
        self._recorded.pooled.append(pooled)
        self._recorded.candidate_reps.append(cand_reps)
        self._visited.append(_VisitRecord(step_input.node, pose.x, pose.y, pooled))

        self.bank.store_observation(step_input.grid_features, step_input.grid_points, t)

        if cfg.use_map:
            frame_pose = (
                pose
                if cfg.egocentric_frame
                else WorldPose(self._start_pose.x, self._start_pose.y, 0.0)
            )
            cells, geom = build_grid_map(
                self.bank, frame_pose, cfg.map_scale, cfg.min_side_length, step=t
            )
            self.map_snapshots.append(cells)
            map_grid, agg_tape = aggregate_map(
                self.bank,
                cells,
                geom,
                self.word_features,
                self.aggregation,
                self.proj_cache,
                instruction_tag=self._instr_tag,
                average_pooling=not cfg.relevance_aggregation,
            )
            map_tokens = map_grid.tokens
        else:
            map_tokens = np.zeros((0, cfg.hidden), dtype=self.dtype)
            agg_tape = None

        history_entries: list[TrajectoryEntryInput] = []
        if cfg.use_trajectory_history:
            for i, rec in enumerate(self._visited, start=1):
                d = math.hypot(rec.x - pose.x, rec.y - pose.y)
                if d > 0.0:
                    phi = normalize_heading(bearing(pose.x, pose.y, rec.x, rec.y) - pose.heading)
                else:
                    phi = 0.0
                history_entries.append(
                    TrajectoryEntryInput(rec.pooled, d, math.sin(phi), math.cos(phi), i)
                )
        cand_entries = [
            TrajectoryEntryInput(
                cand_reps[j],
                float(obs.candidate_distances[j]),
                math.sin(float(obs.candidate_headings[j])),
                math.cos(float(obs.candidate_headings[j])),
                t + 1,
            )
            for j in range(c)
        ]
        traj_seq, traj_cache = self.trajectory.forward(
            history_entries, cand_entries, obs.candidate_ids
        )

        m_prime, t_prime, s1_cache = stage_one(
            map_tokens, traj_seq.tokens, self.word_features, self.stage_one_layers
        )
        her_vec, her_cache = her_scores(t_prime, traj_seq.candidate_slots, self.heads)

        obs_hat, traj_hat, s2_cache = stage_two(
            o_prime, t_prime, self.word_features, m_prime, self.stage_two_layers
        )
        s_local, local_cache = local_scores(obs_hat, cand_slots_obs, self.heads)
        s_global, global_cache = global_scores(traj_hat, traj_seq.candidate_slots, self.heads)
        # observation candidates and trajectory candidates share one ordering
        mapping = {g: g for g in range(1, c + 1)}
        scores, fuse_cache = fuse_scores(
            s_local,
            s_global,
            obs_hat[0],
            traj_hat[0],
            self.heads,
            mapping,
            [True] * c,
            obs.candidate_ids,
        )
        scores.her = her_vec

        if self._train:
            self._tapes.append(
                _StepTape(
                    obs_cache=obs_cache,
                    agg_tape=agg_tape,
                    traj_cache=traj_cache,
                    s1_cache=s1_cache,
                    s2_cache=s2_cache,
                    local_cache=local_cache,
                    global_cache=global_cache,
                    her_cache=her_cache,
                    fuse_cache=fuse_cache,
                    fused=scores.fused,
                    her=her_vec,
                )
            )
        return scores

    def episode_losses(self, labels: list[int]) -> tuple[float, float]:
        """Forward loss values from the recorded tapes (no gradients)."""
        sap = 0.0
        her = 0.0
        for tape, label in zip(self._tapes, labels):
            loss, _ = cross_entropy_with_grad(tape.fused, label)
            sap += loss
            loss_h, _ = cross_entropy_with_grad(tape.her, label)
            her += loss_h
        return sap, her

    def backward_episode(
        self,
        labels: list[int],
        weight_sap: float = 1.0,
        weight_her: float = 1.0,
        her_enabled: bool = True,
    ) -> tuple[float, float]:
        """Accumulate gradients for the whole episode; returns the losses."""
        if not self._train:
            raise RuntimeError("backward_episode requires begin_episode(train=True)")
        if len(labels) != len(self._tapes):
            raise ValueError(f"{len(labels)} labels for {len(self._tapes)} recorded steps")
        cfg = self.cfg
        d_words_total = np.zeros_like(self.word_features)
        sap_total = 0.0
        her_total = 0.0
        for tape, label in zip(self._tapes, labels):
            sap_loss, d_fused = cross_entropy_with_grad(tape.fused, label)
            sap_total += sap_loss
            d_fused = d_fused * self.dtype(weight_sap)
            d_local, d_global, d_stop_obs, d_stop_traj = fuse_scores_backward(
                d_fused, tape.fuse_cache, self.heads, cfg.hidden
            )
            d_obs_out = _head_backward(d_local, tape.local_cache, self.heads.local)
            d_obs_out[0] += d_stop_obs
            d_traj_out = _head_backward(d_global, tape.global_cache, self.heads.global_)
            d_traj_out[0] += d_stop_traj

            d_obs_in, d_t_prime, d_words, d_m_prime = stage_two_backward(
                d_obs_out, d_traj_out, tape.s2_cache, self.stage_two_layers
            )
            d_words_total += d_words

            her_loss, d_her = cross_entropy_with_grad(tape.her, label)
            her_total += her_loss
            if her_enabled and weight_her != 0.0:
                d_her = d_her * self.dtype(weight_her)
                d_t_prime = d_t_prime + _head_backward(d_her, tape.her_cache, self.heads.her)

            d_map_tokens, d_traj_tokens, d_words2 = stage_one_backward(
                d_m_prime, d_t_prime, tape.s1_cache, self.stage_one_layers
            )
            d_words_total += d_words2
            if tape.agg_tape is not None:
                d_words_total += aggregate_map_backward(
                    d_map_tokens, tape.agg_tape, self.aggregation
                )
            self.trajectory.backward(d_traj_tokens, tape.traj_cache)
            self.observation.backward(d_obs_in, tape.obs_cache)
        self.instruction.backward(d_words_total, self._instr_cache)
        return sap_total, her_total

    @property
    def recorded_memory(self) -> PinnedMemory:
        return self._recorded

    def cache_counters(self) -> dict[str, int]:
        if self.proj_cache is None:
            return {"feature_hits": 0, "feature_misses": 0, "word_hits": 0, "word_misses": 0}
        return {
            "feature_hits": self.proj_cache.feature_hits,
            "feature_misses": self.proj_cache.feature_misses,
            "word_hits": self.proj_cache.word_hits,
            "word_misses": self.proj_cache.word_misses,
        }


def episode_forward(
    model: NavigationModel,
    token_ids: list[int],
    start_pose: WorldPose,
    step_inputs: list[StepInput],
    labels: list[int],
    weight_sap: float = 1.0,
    weight_her: float = 1.0,
    her_enabled: bool = True,
    pinned: PinnedMemory | None = None,
) -> float:
    """Replay a recorded episode and return the total weighted loss."""
    model.begin_episode(token_ids, start_pose, train=True, pinned=pinned)
    for si in step_inputs:
        model.step(si)
    sap, her = model.episode_losses(labels)
    total = weight_sap * sap
    if her_enabled:
        total += weight_her * her
    return float(total)
