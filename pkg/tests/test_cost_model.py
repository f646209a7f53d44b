import numpy as np
import pytest

from gridmm.cost_model import (
    CostConfig,
    episode_cost,
    flops_cross_attention,
    flops_matmul,
    flops_mlp,
    flops_self_attention,
    sweep_instruction_lengths,
    sweep_trajectory_lengths,
)


class TestPrimitives:
    def test_matmul_values(self):
        assert flops_matmul(3, 4, 5) == 120
        assert flops_matmul(1, 1, 1) == 2
        assert flops_matmul(0, 9, 9) == 0
        assert flops_matmul(9, 0, 9) == 0

    def test_mlp_values(self):
        assert flops_mlp(2, 3) == 288
        assert flops_mlp(0, 64) == 0

    def test_mlp_composition(self):
        for s, h in [(1, 2), (3, 5), (7, 16)]:
            assert flops_mlp(s, h) == flops_matmul(s, h, 4 * h) + flops_matmul(s, 4 * h, h)

    def test_self_attention_values(self):
        assert flops_self_attention(2, 4) == 320
        assert flops_self_attention(1, 1) == 12
        assert flops_self_attention(0, 64) == 0

    def test_cross_attention_values(self):
        assert flops_cross_attention(2, 3, 4) == 416
        assert flops_cross_attention(0, 0, 64) == 0

    def test_cross_attention_reduces_to_self_attention_algebra(self):
        # with t == s: 4sh^2 + 4sh^2 + 4s^2h == 8sh^2 + 4s^2h
        for s, h in [(2, 4), (5, 8), (7, 3)]:
            assert flops_cross_attention(s, s, h) == 8 * s * h * h + 4 * s * s * h

    def test_all_integers(self):
        assert isinstance(flops_matmul(3, 4, 5), int)
        assert isinstance(flops_mlp(2, 3), int)
        assert isinstance(flops_self_attention(2, 4), int)
        assert isinstance(flops_cross_attention(2, 3, 4), int)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            flops_matmul(-1, 2, 3)


def small_config(**kwargs):
    base = dict(
        hidden=8, relevance_dim=8, feature_dim=6, instruction_length=5,
        map_token_count=9, observation_tokens=6, candidate_count=2,
        stage_one_layers=1, stage_two_layers=2, grid_features_per_step=10,
    )
    base.update(kwargs)
    return CostConfig(**base)


class TestEpisodeCost:
    def test_single_step_cached_equals_uncached(self):
        cached = episode_cost(small_config(cached=True), 1)
        uncached = episode_cost(small_config(cached=False), 1)
        assert cached.total == uncached.total

    def test_cached_strictly_cheaper_from_two_steps(self):
        for steps in range(2, 12):
            cached = episode_cost(small_config(cached=True), steps)
            uncached = episode_cost(small_config(cached=False), steps)
            assert cached.total < uncached.total, steps

    def test_no_features_stored_removes_the_gap(self):
        cached = episode_cost(small_config(cached=True, grid_features_per_step=0), 6)
        uncached = episode_cost(small_config(cached=False, grid_features_per_step=0), 6)
        assert cached.total == uncached.total

    def test_totals_equal_component_sums(self):
        report = episode_cost(small_config(cached=True), 5)
        assert report.total == sum(sum(s.components.values()) for s in report.steps)
        for s in report.steps:
            assert all(isinstance(v, int) for v in s.components.values())

    def test_monotone_in_steps_instruction_and_hidden(self):
        base = episode_cost(small_config(cached=True), 4).total
        assert episode_cost(small_config(cached=True), 5).total > base
        assert episode_cost(small_config(cached=True, instruction_length=9), 4).total > base
        assert episode_cost(small_config(cached=True, hidden=16), 4).total > base

    def test_two_step_manual_composition(self):
        # manual spreadsheet-style composition of the same pipeline
        c = small_config(cached=True)
        report = episode_cost(c, 2)
        h, da, d, L = c.hidden, c.relevance_dim, c.feature_dim, c.instruction_length
        i = c.grid_features_per_step
        manual_total = 0
        for t in (1, 2):
            stored = i * t
            manual_total += i * (2 * d * da + 2 * d * h)              # new-feature projections
            if t == 1:
                manual_total += 2 * L * h * da                        # instruction projection once
            manual_total += 2 * stored * da * L                       # relevance matrix
            manual_total += 2 * stored * h                            # weighted sums
            manual_total += 2 * c.map_token_count * 3 * h             # positional projection
            n_traj = 1 + t + c.candidate_count
            s1 = c.map_token_count + n_traj
            manual_total += c.stage_one_layers * (
                (4 * s1 * h * h + 4 * L * h * h + 4 * s1 * L * h)
                + (4 * s1 * s1 * h + 8 * s1 * h * h)
                + 16 * s1 * h * h
            )
            s2 = c.observation_tokens + n_traj
            kv = L + n_traj + c.map_token_count
            manual_total += c.stage_two_layers * (
                (4 * s2 * h * h + 4 * kv * h * h + 4 * s2 * kv * h)
                + (4 * s2 * s2 * h + 8 * s2 * h * h)
                + 16 * s2 * h * h
            )
            rows = 1 + c.candidate_count
            manual_total += 3 * (2 * rows * h * h + 2 * rows * h)     # local, global, HER heads
            manual_total += 2 * 2 * h * h + 2 * h                     # fusion gate
        assert report.total == manual_total

    def test_predicted_reuse_counts(self):
        c = small_config(cached=True)
        report = episode_cost(c, 4)
        assert report.predicted_feature_reuses == c.grid_features_per_step * (0 + 1 + 2 + 3)
        assert report.predicted_word_reuses == 3

    def test_cumulative_series_monotone(self):
        report = episode_cost(small_config(cached=True), 6)
        series = report.cumulative_gflops()
        assert len(series) == 6
        assert all(b > a for a, b in zip(series, series[1:]))


class TestSweeps:
    def test_single_point_single_row(self):
        rows = sweep_trajectory_lengths(small_config(), [3])
        assert len(rows) == 1
        assert rows[0].trajectory_length == 3

    def test_cached_column_never_exceeds_uncached(self):
        rows = sweep_trajectory_lengths(small_config(), list(range(1, 16)))
        for row in rows:
            assert row.cached_gflops <= row.uncached_gflops
        rows = sweep_instruction_lengths(small_config(), [4, 8, 16, 32], steps=5)
        for row in rows:
            assert row.cached_gflops <= row.uncached_gflops

    def test_manual_spot_check(self):
        c = small_config()
        rows = sweep_trajectory_lengths(c, [2])
        cached = episode_cost(CostConfig(**{**c.__dict__, "cached": True}), 2)
        assert rows[0].cached_gflops == pytest.approx(cached.total / 1e9)


class TestReconciliationWithRealRuns:
    def test_cache_counters_match_predicted_reuse(self):
        from gridmm.config import ModelConfig, SimulatorConfig
        from gridmm.model import NavigationModel
        from gridmm.simulator import World, generate_environment, sample_episode
        from gridmm.training import dagger_rollout

        model_cfg = ModelConfig(
            feature_dim=6, view_dim=6, hidden=12, relevance_dim=12, heads=2,
            language_layers=1, panorama_layers=1, stage_one_layers=1,
            stage_two_layers=1, map_scale=6, dtype="float64",
        )
        sim_cfg = SimulatorConfig(views=6, grid_rows=2, grid_cols=2, node_count=14, area=20.0)
        world = World(sim_cfg, model_cfg.feature_dim, model_cfg.view_dim)
        env = generate_environment(3, sim_cfg, world.vocab)
        model = NavigationModel(model_cfg, len(world.vocab), seed=0)
        rng = np.random.default_rng(0)
        start, dest, _, instruction = sample_episode(env, rng, 3, 5, 3.0, world.vocab)
        rollout = dagger_rollout(
            model, env, world, instruction, start, dest, 1.0,
            np.random.default_rng(1), 10,
        )
        steps = len(rollout.step_inputs)
        per_step = sim_cfg.views * sim_cfg.grid_rows * sim_cfg.grid_cols
        report = episode_cost(
            CostConfig(
                hidden=model_cfg.hidden, relevance_dim=model_cfg.relevance_dim,
                feature_dim=model_cfg.feature_dim, instruction_length=len(instruction),
                map_token_count=model_cfg.map_scale**2, observation_tokens=1 + sim_cfg.views,
                candidate_count=2, grid_features_per_step=per_step, cached=True,
            ),
            steps,
        )
        counters = model.cache_counters()
        assert counters["feature_hits"] == report.predicted_feature_reuses
        assert counters["word_hits"] == report.predicted_word_reuses
