"""Invariant self-checks runnable from the CLI, plus the episode-level
gradient check shared with the test suite.

Each check is deterministic under the supplied seed and reports one
pass/fail line.  The episode gradient check replays a recorded toy
episode with its visual memory pinned, so central finite differences
measure exactly the function the hand-written backward differentiates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry
from .aggregation import AggregationParams, ProjectionCache, aggregate_map
from .config import Config, ModelConfig, SimulatorConfig
from .cost_model import (
    flops_cross_attention,
    flops_matmul,
    flops_mlp,
    flops_self_attention,
)
from .geometry import AbsolutePoint, WorldPose
from .grid_memory import GridMemoryBank, build_grid_map
from .model import NavigationModel, PinnedMemory, episode_forward
from .nn import (
    FeedForward,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    cross_entropy,
    cross_entropy_with_grad,
    make_rng,
    numerical_gradient,
)
from .simulator import World, generate_environment, sample_episode, step_cap_for
from .training import dagger_rollout


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def _rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_geometry_round_trip(seed: int = 0, cases: int = 1000) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        pose = WorldPose(*rng.uniform(-30, 30, 2), rng.uniform(-6, 6))
        p = AbsolutePoint(*rng.uniform(-30, 30, 2))
        rt = geometry.from_relative(geometry.to_relative(p, pose), pose)
        worst = max(worst, abs(rt.x - p.x), abs(rt.y - p.y))
    return CheckResult("geometry-round-trip", worst < 1e-9, f"max error {worst:.3e}")


def check_geometry_rigid(seed: int = 1, cases: int = 200) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        pose = WorldPose(*rng.uniform(-20, 20, 2), rng.uniform(-6, 6))
        pts = rng.uniform(-20, 20, size=(6, 2))
        rel = geometry.to_relative_array(pts, pose)
        d_abs = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
        d_rel = np.linalg.norm(rel[:, None, :] - rel[None, :, :], axis=2)
        worst = max(worst, float(np.abs(d_abs - d_rel).max()))
    return CheckResult("geometry-rigid-distances", worst < 1e-9, f"max error {worst:.3e}")


def check_bucketing_conservation(seed: int = 2, banks: int = 50) -> CheckResult:
    rng = np.random.default_rng(seed)
    for _ in range(banks):
        n = int(rng.integers(1, 400))
        bank = GridMemoryBank(4)
        bank.store_observation(rng.normal(size=(n, 4)), rng.uniform(-15, 15, (n, 2)), 1)
        pose = WorldPose(*rng.uniform(-3, 3, 2), rng.uniform(-3, 3))
        scale = int(rng.choice([8, 14, 20]))
        cells, _ = build_grid_map(bank, pose, scale)
        if int(cells.populations().sum()) != n:
            return CheckResult(
                "bucketing-conservation", False,
                f"population {int(cells.populations().sum())} != bank size {n}",
            )
        rel = geometry.to_relative_array(bank.points, pose)
        length = geometry.side_length(rel)
        for i in range(n):
            c = geometry.cell_index(
                geometry.RelativePoint(rel[i, 0], rel[i, 1]), length, scale
            )
            if cells.cell_of_entry[i] != c.m * scale + c.n:
                return CheckResult(
                    "bucketing-conservation", False, f"entry {i} bucketed differently"
                )
    return CheckResult("bucketing-conservation", True, f"{banks} banks conserved")


def check_aggregation_oracle(seed: int = 3, cases: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    params = AggregationParams(make_rng(seed), 8, 12, 12, eps=1e-5, dtype=np.float64)
    worst = 0.0
    for _ in range(cases):
        j = int(rng.integers(1, 50))
        length = int(rng.integers(1, 16))
        feats = rng.normal(size=(j, 8))
        words = rng.normal(size=(length, 12))
        a = (feats @ params.rel_feature.weight.value.T) @ (
            words @ params.rel_word.weight.value.T
        ).T
        alpha = a.max(axis=1)
        e = np.exp(alpha - alpha.max())
        eta = e / e.sum()
        oracle = eta @ (feats @ params.value.weight.value.T)
        from .aggregation import aggregate_cell, relevance_matrix, relevance_scores

        matrix = relevance_matrix(feats, words, params)
        got = aggregate_cell(feats, relevance_scores(matrix), params)
        worst = max(worst, float(np.abs(got - oracle).max()))
    return CheckResult("aggregation-formula-oracle", worst < 1e-12, f"max error {worst:.3e}")


def check_cache_equivalence(seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    params = AggregationParams(make_rng(seed), 6, 10, 10, eps=1e-5, dtype=np.float64)
    bank = GridMemoryBank(6)
    cache = ProjectionCache()
    cache.validate(0)
    words = rng.normal(size=(7, 10))
    pose_seq = [WorldPose(*rng.uniform(-4, 4, 2), rng.uniform(-3, 3)) for _ in range(5)]
    for step, pose in enumerate(pose_seq, start=1):
        bank.store_observation(rng.normal(size=(30, 6)), rng.uniform(-8, 8, (30, 2)), step)
        cells, geom = build_grid_map(bank, pose, 6, step=step)
        cached, _ = aggregate_map(bank, cells, geom, words, params, cache, instruction_tag="i")
        plain, _ = aggregate_map(bank, cells, geom, words, params, None)
        if not np.array_equal(cached.tokens, plain.tokens):
            return CheckResult("cache-equivalence", False, f"divergence at step {step}")
    return CheckResult("cache-equivalence", True, "5-step episode bit-identical")


def check_kernel_gradients(seed: int = 5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    lin = Linear(make_rng(seed), 3, 4, dtype=np.float64)
    x = rng.normal(size=(2, 3))
    w = rng.normal(size=(2, 4))
    y, cache = lin.forward(x)
    lin.backward(w.copy(), cache)
    num = numerical_gradient(lambda: float((lin.forward(x)[0] * w).sum()), [lin.weight.value])
    results.append(
        CheckResult("gradient-linear", _rel_error(lin.weight.grad, num[0]) < 1e-3,
                    f"rel error {_rel_error(lin.weight.grad, num[0]):.2e}")
    )

    ln = LayerNorm(5, eps=1e-5, dtype=np.float64)
    xl = rng.normal(size=(3, 5))
    wl = rng.normal(size=(3, 5))
    _, cl = ln.forward(xl)
    dx = ln.backward(wl.copy(), cl)
    num = numerical_gradient(lambda: float((ln.forward(xl)[0] * wl).sum()), [xl])
    results.append(
        CheckResult("gradient-layer-norm", _rel_error(dx, num[0]) < 1e-3,
                    f"rel error {_rel_error(dx, num[0]):.2e}")
    )

    attn = MultiHeadAttention(make_rng(seed + 1), 4, 2, dtype=np.float64)
    q = rng.normal(size=(2, 4))
    kv = rng.normal(size=(3, 4))
    wa = rng.normal(size=(2, 4))
    _, ca = attn.forward(q, kv, kv)
    dq, dk, dv = attn.backward(wa.copy(), ca)
    num = numerical_gradient(lambda: float((attn.forward(q, kv, kv)[0] * wa).sum()), [q, kv])
    err = max(_rel_error(dq, num[0]), _rel_error(dk + dv, num[1]))
    results.append(CheckResult("gradient-attention", err < 1e-3, f"rel error {err:.2e}"))

    ffn = FeedForward(make_rng(seed + 2), 3, dtype=np.float64)
    xf = rng.normal(size=(2, 3))
    wf = rng.normal(size=(2, 3))
    _, cf = ffn.forward(xf)
    dxf = ffn.backward(wf.copy(), cf)
    num = numerical_gradient(lambda: float((ffn.forward(xf)[0] * wf).sum()), [xf])
    results.append(
        CheckResult("gradient-ffn", _rel_error(dxf, num[0]) < 1e-3,
                    f"rel error {_rel_error(dxf, num[0]):.2e}")
    )

    logits = rng.normal(size=5)
    _, grad = cross_entropy_with_grad(logits, 2)
    num = numerical_gradient(lambda: cross_entropy(logits, 2), [logits])
    results.append(
        CheckResult("gradient-cross-entropy", _rel_error(grad, num[0]) < 1e-3,
                    f"rel error {_rel_error(grad, num[0]):.2e}")
    )
    return results


def check_flops_formulas() -> CheckResult:
    ok = (
        flops_matmul(3, 4, 5) == 120
        and flops_mlp(2, 3) == 288
        and flops_self_attention(2, 4) == 320
        and flops_cross_attention(2, 3, 4) == 416
        and flops_mlp(7, 9) == flops_matmul(7, 9, 36) + flops_matmul(7, 36, 9)
    )
    return CheckResult("flops-formulas", ok, "unit values and MLP composition")


def run_selfcheck(seed: int = 0) -> tuple[bool, list[CheckResult]]:
    results = [
        check_geometry_round_trip(seed),
        check_geometry_rigid(seed + 1),
        check_bucketing_conservation(seed + 2),
        check_aggregation_oracle(seed + 3),
        check_cache_equivalence(seed + 4),
    ]
    results.extend(check_kernel_gradients(seed + 5))
    results.append(check_flops_formulas())
    return all(r.ok for r in results), results


# ---------------------------------------------------------------------------
# episode-level gradient check
# ---------------------------------------------------------------------------


@dataclass
class GroupGradientError:
    group: str
    worst_rel_error: float
    checked_coords: int


def toy_gradcheck_setup(seed: int = 0, hidden: int = 8, map_scale: int = 4,
                        views: int = 4, steps: int = 2):
    """A tiny float64 model plus one recorded expert episode."""
    model_cfg = ModelConfig(
        feature_dim=6, view_dim=6, hidden=hidden, relevance_dim=hidden, heads=2,
        language_layers=1, panorama_layers=1, stage_one_layers=1, stage_two_layers=1,
        map_scale=map_scale, dtype="float64", max_instruction_length=32,
    )
    sim_cfg = SimulatorConfig(
        views=views, grid_rows=2, grid_cols=2, node_count=10, area=16.0,
        connect_radius=7.0, min_node_spacing=2.0, max_range=8.0,
    )
    world = World(sim_cfg, model_cfg.feature_dim, model_cfg.view_dim)
    env = generate_environment(seed + 31, sim_cfg, world.vocab)
    model = NavigationModel(model_cfg, len(world.vocab), seed=seed)
    rng = np.random.default_rng(seed)
    start, dest, _, instruction = sample_episode(env, rng, steps, steps + 2, 3.0, world.vocab)
    cap = steps
    rollout = dagger_rollout(model, env, world, instruction, start, dest, 1.0, rng, cap)
    pinned = PinnedMemory(
        pooled=list(model.recorded_memory.pooled),
        candidate_reps=list(model.recorded_memory.candidate_reps),
    )
    return model, rollout, pinned


def episode_gradient_check(
    model: NavigationModel,
    rollout,
    pinned: PinnedMemory,
    coords_per_group: int = 3,
    eps: float = 1e-4,
    seed: int = 0,
    weight_sap: float = 1.0,
    weight_her: float = 1.0,
) -> list[GroupGradientError]:
    """Compare analytic episode gradients with central finite differences.

    The episode's stored visual memory is pinned during replay: those
    vectors are constants of the training objective, so the finite
    differences and the hand-written backward measure the same function.
    """

    def f() -> float:
        return episode_forward(
            model, rollout.instruction, rollout.start_pose, rollout.step_inputs,
            rollout.labels, weight_sap, weight_her, True, pinned,
        )

    model.zero_grad()
    model.begin_episode(rollout.instruction, rollout.start_pose, train=True, pinned=pinned)
    for si in rollout.step_inputs:
        model.step(si)
    model.backward_episode(rollout.labels, weight_sap, weight_her, True)

    rng = np.random.default_rng(seed)
    report = []
    for name, param in model.named_parameters().items():
        analytic = param.grad.copy()
        size = param.value.size
        picks = {int(np.argmax(np.abs(analytic)))}
        while len(picks) < min(coords_per_group, size):
            picks.add(int(rng.integers(0, size)))
        worst = 0.0
        holder = param.value.flat
        for idx in sorted(picks):
            orig = holder[idx]
            holder[idx] = orig + eps
            f_plus = f()
            holder[idx] = orig - eps
            f_minus = f()
            holder[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic.flat[idx])
            denom = max(abs(a), abs(fd), 1e-6)
            worst = max(worst, abs(a - fd) / denom)
        report.append(GroupGradientError(name, worst, len(picks)))
    return report
