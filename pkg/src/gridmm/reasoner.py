"""Two-stage cross-modal reasoning and gated action scoring.

Stage one takes the concatenated map and trajectory tokens as queries
that cross-attend over the instruction, then self-attend.  Stage two
takes the concatenated panorama and (stage-one) trajectory tokens as
queries over the fixed key/value set [instruction; trajectory; map].

Action scores: a local head over the panorama's candidate-view slots, a
global head over the trajectory's candidate-waypoint slots, and a
sigmoid gate computed from the two stop tokens that mixes them.  Global
candidates without a local counterpart (not adjacent to the agent)
receive only the trajectory share of the mix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, MappingError
from .nn import CrossModalLayer, FeedForward, ParamItems, softmax


class ActionHeads:
    """Score heads: local, global, historical-reasoning, and the fusion gate."""

    def __init__(self, rng, hidden: int, dtype=np.float32) -> None:
        self.local = FeedForward(rng, hidden, out_dim=1, inner_dim=hidden, dtype=dtype)
        self.global_ = FeedForward(rng, hidden, out_dim=1, inner_dim=hidden, dtype=dtype)
        self.her = FeedForward(rng, hidden, out_dim=1, inner_dim=hidden, dtype=dtype)
        self.gate = FeedForward(rng, 2 * hidden, out_dim=1, inner_dim=hidden, dtype=dtype)

    def named_parameters(self, prefix: str) -> ParamItems:
        yield from self.local.named_parameters(f"{prefix}.local")
        yield from self.global_.named_parameters(f"{prefix}.global")
        yield from self.her.named_parameters(f"{prefix}.her")
        yield from self.gate.named_parameters(f"{prefix}.gate")


def stage_one(
    map_tokens: np.ndarray,
    traj_tokens: np.ndarray,
    word_features: np.ndarray,
    layers: list[CrossModalLayer],
) -> tuple[np.ndarray, np.ndarray, tuple]:
    """Fuse [map; trajectory] with the instruction; split the outputs."""
    n_map = map_tokens.shape[0]
    if n_map + traj_tokens.shape[0] == 0:
        raise EmptyInputError("stage one needs at least one map or trajectory token")
    x = np.vstack([map_tokens, traj_tokens]) if n_map else traj_tokens
    caches = []
    for layer in layers:
        x, cache = layer.forward(x, word_features)
        caches.append(cache)
    return x[:n_map], x[n_map:], (n_map, caches)


def stage_one_backward(
    d_map: np.ndarray,
    d_traj: np.ndarray,
    cache: tuple,
    layers: list[CrossModalLayer],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d_map_tokens, d_traj_tokens, d_word_features)."""
    n_map, caches = cache
    dx = np.vstack([d_map, d_traj]) if n_map else d_traj
    d_words = None
    for layer, c in zip(reversed(layers), reversed(caches)):
        dx, dkv = layer.backward(dx, c)
        d_words = dkv if d_words is None else d_words + dkv
    return dx[:n_map], dx[n_map:], d_words


def stage_two(
    obs_tokens: np.ndarray,
    traj_tokens: np.ndarray,
    word_features: np.ndarray,
    map_tokens: np.ndarray,
    layers: list[CrossModalLayer],
) -> tuple[np.ndarray, np.ndarray, tuple]:
    """Queries [panorama; trajectory] over the fixed set [words; trajectory; map]."""
    n_obs = obs_tokens.shape[0]
    kv = np.vstack([word_features, traj_tokens, map_tokens])
    x = np.vstack([obs_tokens, traj_tokens])
    caches = []
    for layer in layers:
        x, cache = layer.forward(x, kv)
        caches.append(cache)
    splits = (n_obs, word_features.shape[0], traj_tokens.shape[0], map_tokens.shape[0])
    return x[:n_obs], x[n_obs:], (splits, caches)


def stage_two_backward(
    d_obs_out: np.ndarray,
    d_traj_out: np.ndarray,
    cache: tuple,
    layers: list[CrossModalLayer],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d_obs_tokens, d_traj_tokens, d_word_features, d_map_tokens).

    The trajectory gradient collects both the query path and the
    key/value path, since trajectory tokens appear on both sides.
    """
    (n_obs, n_words, n_traj, n_map), caches = cache
    dx = np.vstack([d_obs_out, d_traj_out])
    dkv_total = None
    for layer, c in zip(reversed(layers), reversed(caches)):
        dx, dkv = layer.backward(dx, c)
        dkv_total = dkv if dkv_total is None else dkv_total + dkv
    d_obs = dx[:n_obs]
    d_traj = dx[n_obs:] + dkv_total[n_words : n_words + n_traj]
    d_words = dkv_total[:n_words]
    d_map = dkv_total[n_words + n_traj :]
    return d_obs, d_traj, d_words, d_map


def _head_scores(tokens: np.ndarray, slots: np.ndarray, head: FeedForward) -> tuple[np.ndarray, tuple]:
    rows = tokens[slots]
    out, cache = head.forward(rows)
    return out[:, 0], (slots, cache, tokens.shape)


def _head_backward(d_scores: np.ndarray, cache: tuple, head: FeedForward) -> np.ndarray:
    slots, ffn_cache, shape = cache
    d_rows = head.backward(d_scores[:, np.newaxis], ffn_cache)
    d_tokens = np.zeros(shape, dtype=d_rows.dtype)
    d_tokens[slots] = d_rows
    return d_tokens


def local_scores(obs_out: np.ndarray, candidate_slots: np.ndarray, heads: ActionHeads) -> tuple[np.ndarray, tuple]:
    """Stop score followed by one score per candidate view."""
    slots = np.concatenate([[0], candidate_slots])
    return _head_scores(obs_out, slots, heads.local)


def global_scores(traj_out: np.ndarray, candidate_slots: np.ndarray, heads: ActionHeads) -> tuple[np.ndarray, tuple]:
    """Stop score followed by one score per candidate waypoint."""
    slots = np.concatenate([[0], candidate_slots])
    return _head_scores(traj_out, slots, heads.global_)


def her_scores(traj_stage_one: np.ndarray, candidate_slots: np.ndarray, heads: ActionHeads) -> tuple[np.ndarray, tuple]:
    """Action scores from the stage-one trajectory alone (no panorama)."""
    slots = np.concatenate([[0], candidate_slots])
    return _head_scores(traj_stage_one, slots, heads.her)


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@dataclass
class ActionScores:
    """Score vectors over [stop] + the global candidate set."""

    fused: np.ndarray
    local: np.ndarray
    global_: np.ndarray
    lam: float
    candidate_ids: list[int]
    her: np.ndarray | None = None


def fuse_scores(
    s_local: np.ndarray,
    s_global: np.ndarray,
    stop_obs: np.ndarray,
    stop_traj: np.ndarray,
    heads: ActionHeads,
    global_to_local: dict[int, int],
    adjacent: list[bool],
    candidate_ids: list[int],
) -> tuple[ActionScores, tuple]:
    """Gate-mix local and global scores onto the global candidate set.

    ``s_local``/``s_global`` carry the stop score at index 0.
    ``global_to_local`` maps a global candidate slot (1-based, matching
    ``s_global``) to its local candidate slot; every adjacent candidate
    must be mapped.
    """
    n_global = s_global.shape[0] - 1
    if len(adjacent) != n_global or len(candidate_ids) != n_global:
        raise ValueError("adjacency flags must cover every global candidate")
    gate_in = np.concatenate([stop_obs, stop_traj])[np.newaxis, :]
    z, gate_cache = heads.gate.forward(gate_in)
    lam = _sigmoid(float(z[0, 0]))
    fused = np.empty_like(s_global)
    fused[0] = lam * s_local[0] + (1.0 - lam) * s_global[0]
    for g in range(1, n_global + 1):
        if adjacent[g - 1]:
            if g not in global_to_local:
                raise MappingError(
                    f"adjacent candidate {candidate_ids[g - 1]} has no local view mapping"
                )
            fused[g] = lam * s_local[global_to_local[g]] + (1.0 - lam) * s_global[g]
        else:
            fused[g] = (1.0 - lam) * s_global[g]
    scores = ActionScores(
        fused=fused,
        local=s_local,
        global_=s_global,
        lam=lam,
        candidate_ids=list(candidate_ids),
    )
    cache = (gate_cache, lam, s_local.copy(), s_global.copy(), dict(global_to_local), list(adjacent))
    return scores, cache


def fuse_scores_backward(
    d_fused: np.ndarray,
    cache: tuple,
    heads: ActionHeads,
    hidden: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d_s_local, d_s_global, d_stop_obs, d_stop_traj)."""
    gate_cache, lam, s_local, s_global, global_to_local, adjacent = cache
    d_local = np.zeros_like(s_local)
    d_global = np.zeros_like(s_global)
    d_lam = 0.0
    d_local[0] += lam * d_fused[0]
    d_global[0] += (1.0 - lam) * d_fused[0]
    d_lam += float((s_local[0] - s_global[0]) * d_fused[0])
    for g in range(1, s_global.shape[0]):
        if adjacent[g - 1]:
            loc = global_to_local[g]
            d_local[loc] += lam * d_fused[g]
            d_global[g] += (1.0 - lam) * d_fused[g]
            d_lam += float((s_local[loc] - s_global[g]) * d_fused[g])
        else:
            d_global[g] += (1.0 - lam) * d_fused[g]
            d_lam += float(-s_global[g] * d_fused[g])
    dz = d_lam * lam * (1.0 - lam)
    d_gate_in = heads.gate.backward(np.array([[dz]], dtype=s_local.dtype), gate_cache)
    return d_local, d_global, d_gate_in[0, :hidden], d_gate_in[0, hidden:]


def select_action(
    scores: ActionScores,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
) -> int | None:
    """Pick a waypoint id, or ``None`` for stop.

    Greedy takes the argmax with lowest-index tie-break; sampling draws
    from the softmax of the fused scores using the supplied generator.
    """
    fused = scores.fused
    if fused.size == 0:
        raise EmptyInputError("cannot select an action from empty scores")
    if mode == "greedy":
        choice = int(np.argmax(fused))
    elif mode == "sample":
        if rng is None:
            raise ValueError("sampling requires a random generator")
        probs = softmax(fused.astype(np.float64))
        choice = int(rng.choice(fused.size, p=probs / probs.sum()))
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    if choice == 0:
        return None
    return scores.candidate_ids[choice - 1]
