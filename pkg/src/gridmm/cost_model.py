"""Analytical FLOPs accounting for the mapping-and-reasoning pipeline.

Four primitives cover everything: a matrix product costs 2mkn, a
two-layer transformer MLP (hidden expanded to 4h and back) costs 16sh^2,
a self-attention block 4s^2h + 8sh^2, and a cross-attention block
4sh^2 + 4th^2 + 4sth.  Episode costs compose these over the configured
pipeline per navigation step.  With caching enabled, the per-feature
relevance and value projections are charged once per stored feature and
the instruction projection once per episode; without it they are
recharged every step for every stored feature.  Instruction and
panorama encoder costs are left out of the accounting.
"""

from __future__ import annotations

from dataclasses import dataclass, field


def flops_matmul(m: int, k: int, n: int) -> int:
    """Cost of an (m x k) @ (k x n) product."""
    if min(m, k, n) < 0:
        raise ValueError(f"dimensions must be non-negative, got {(m, k, n)}")
    return 2 * m * k * n


def flops_mlp(s: int, h: int) -> int:
    """Two-layer MLP over a length-s sequence: expand to 4h, reduce to h."""
    return 16 * s * h * h


def flops_self_attention(s: int, h: int) -> int:
    return 4 * s * s * h + 8 * s * h * h


def flops_cross_attention(s: int, t: int, h: int) -> int:
    """Query length s attending over a key/value sequence of length t."""
    return 4 * s * h * h + 4 * t * h * h + 4 * s * t * h


@dataclass
class CostConfig:
    hidden: int = 768
    relevance_dim: int = 768
    feature_dim: int = 512
    instruction_length: int = 32
    trajectory_length: int = 15
    map_token_count: int = 196
    observation_tokens: int = 17      # stop + views + candidate entries
    candidate_count: int = 4
    stage_one_layers: int = 1
    stage_two_layers: int = 4
    grid_features_per_step: int = 192
    cached: bool = True


@dataclass
class StepCost:
    step: int
    components: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.components.values())


@dataclass
class CostReport:
    cached: bool
    steps: list[StepCost] = field(default_factory=list)
    predicted_feature_reuses: int = 0
    predicted_word_reuses: int = 0

    @property
    def total(self) -> int:
        return sum(s.total for s in self.steps)

    @property
    def total_gflops(self) -> float:
        return self.total / 1e9

    def cumulative_gflops(self) -> list[float]:
        out = []
        running = 0
        for s in self.steps:
            running += s.total
            out.append(running / 1e9)
        return out


def _head_cost(rows: int, h: int) -> int:
    return flops_matmul(rows, h, h) + flops_matmul(rows, h, 1)


def episode_cost(config: CostConfig, steps: int) -> CostReport:
    """Per-step FLOPs over an episode of the given number of steps."""
    if steps < 0:
        raise ValueError(f"steps must be non-negative, got {steps}")
    c = config
    report = CostReport(cached=c.cached)
    per_feature_projection = flops_matmul(1, c.feature_dim, c.relevance_dim) + flops_matmul(
        1, c.feature_dim, c.hidden
    )
    word_projection = flops_matmul(c.instruction_length, c.hidden, c.relevance_dim)
    for t in range(1, steps + 1):
        stored = c.grid_features_per_step * t
        comp: dict[str, int] = {}
        if c.grid_features_per_step > 0:
            new_features = c.grid_features_per_step if c.cached else stored
            comp["feature_projections"] = new_features * per_feature_projection
            charge_words = (t == 1) if c.cached else True
            comp["instruction_projection"] = word_projection if charge_words else 0
            comp["relevance_matrix"] = flops_matmul(
                stored, c.relevance_dim, c.instruction_length
            )
            comp["cell_aggregation"] = 2 * stored * c.hidden
            comp["positional_projection"] = flops_matmul(c.map_token_count, 3, c.hidden)
        n_traj = 1 + t + c.candidate_count
        s1 = c.map_token_count + n_traj
        comp["stage_one"] = c.stage_one_layers * (
            flops_cross_attention(s1, c.instruction_length, c.hidden)
            + flops_self_attention(s1, c.hidden)
            + flops_mlp(s1, c.hidden)
        )
        s2 = c.observation_tokens + n_traj
        kv2 = c.instruction_length + n_traj + c.map_token_count
        comp["stage_two"] = c.stage_two_layers * (
            flops_cross_attention(s2, kv2, c.hidden)
            + flops_self_attention(s2, c.hidden)
            + flops_mlp(s2, c.hidden)
        )
        comp["heads"] = (
            _head_cost(1 + c.candidate_count, c.hidden) * 3      # local, global, HER
            + flops_matmul(1, 2 * c.hidden, c.hidden)
            + flops_matmul(1, c.hidden, 1)
        )
        report.steps.append(StepCost(step=t, components=comp))
        if c.cached and c.grid_features_per_step > 0:
            report.predicted_feature_reuses += c.grid_features_per_step * (t - 1)
            report.predicted_word_reuses += 1 if t > 1 else 0
    return report


@dataclass
class SweepRow:
    trajectory_length: int
    instruction_length: int
    cached_gflops: float
    uncached_gflops: float


def sweep_trajectory_lengths(config: CostConfig, lengths: list[int]) -> list[SweepRow]:
    rows = []
    for steps in lengths:
        cached = episode_cost(_with(config, cached=True), steps)
        uncached = episode_cost(_with(config, cached=False), steps)
        rows.append(
            SweepRow(
                trajectory_length=steps,
                instruction_length=config.instruction_length,
                cached_gflops=cached.total_gflops,
                uncached_gflops=uncached.total_gflops,
            )
        )
    return rows


def sweep_instruction_lengths(
    config: CostConfig, lengths: list[int], steps: int | None = None
) -> list[SweepRow]:
    steps = config.trajectory_length if steps is None else steps
    rows = []
    for length in lengths:
        cached = episode_cost(_with(config, cached=True, instruction_length=length), steps)
        uncached = episode_cost(_with(config, cached=False, instruction_length=length), steps)
        rows.append(
            SweepRow(
                trajectory_length=steps,
                instruction_length=length,
                cached_gflops=cached.total_gflops,
                uncached_gflops=uncached.total_gflops,
            )
        )
    return rows


def _with(config: CostConfig, **kwargs) -> CostConfig:
    data = {f: getattr(config, f) for f in config.__dataclass_fields__}
    data.update(kwargs)
    return CostConfig(**data)
