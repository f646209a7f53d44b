"""Losses, the pseudo-interactive demonstrator labels, and DAgger training.

Rollouts execute a coin-flip mix of expert and sampled policy actions
but always record the expert's choice as the supervision target.  The
action-prediction loss is the summed cross-entropy of the fused scores
against those targets; the historical-reasoning loss applies the same
targets to the map-and-trajectory-only score head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .errors import TrainingDivergedError
from .geometry import WorldPose, bearing
from .model import NavigationModel, StepInput
from .nn import Parameter, cross_entropy
from .reasoner import select_action
from .simulator import (
    EnvironmentGraph,
    EpisodeSpec,
    PolicyAgent,
    StepContext,
    World,
    build_episode_set,
    build_step_input,
    distances_from,
    pseudo_demonstrator_action,
    run_episode,
    sample_episode,
    step_cap_for,
)


def sap_loss(fused_scores: list[np.ndarray], actions: list[int]) -> float:
    """Summed cross-entropy of the fused scores against expert actions."""
    if len(fused_scores) != len(actions):
        raise ValueError(f"{len(fused_scores)} score vectors for {len(actions)} actions")
    return float(sum(cross_entropy(s, a) for s, a in zip(fused_scores, actions)))


def her_loss(her_scores: list[np.ndarray], actions: list[int]) -> float:
    """Same objective evaluated on the historical-reasoning scores."""
    return sap_loss(her_scores, actions)


class SGD:
    """Plain stochastic gradient descent with momentum."""

    def __init__(self, params: dict[str, Parameter], learning_rate: float,
                 momentum: float = 0.9, grad_clip: float = 0.0) -> None:
        self.params = params
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity = {name: np.zeros_like(p.value) for name, p in params.items()}

    def step(self, scale: float = 1.0) -> None:
        if self.grad_clip > 0.0:
            total = math.sqrt(
                sum(float(np.sum((p.grad * scale) ** 2)) for p in self.params.values())
            )
            clip = min(1.0, self.grad_clip / (total + 1e-12))
        else:
            clip = 1.0
        for name, p in self.params.items():
            g = p.grad * (scale * clip)
            v = self.velocity[name]
            v *= self.momentum
            v -= self.learning_rate * g
            p.value += v.astype(p.value.dtype)


@dataclass
class Rollout:
    step_inputs: list[StepInput]
    labels: list[int]
    executed_nodes: list[int]
    truncated: bool
    instruction: list[int]
    start_pose: WorldPose


def dagger_rollout(
    model: NavigationModel,
    env: EnvironmentGraph,
    world: World,
    instruction: list[int],
    start: int,
    destination: int,
    beta: float,
    rng: np.random.Generator,
    step_cap: int,
    train: bool = True,
) -> Rollout:
    """Execute expert actions with probability beta, policy samples
    otherwise; labels are the expert actions regardless."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    dist_to_goal = distances_from(env, destination)
    start_pose = WorldPose(env.positions[start][0], env.positions[start][1], 0.0)
    model.begin_episode(instruction, start_pose, train=train)
    node = start
    heading = 0.0
    traveled = 0.0
    executed = [start]
    step_inputs: list[StepInput] = []
    labels: list[int] = []
    truncated = True
    for step in range(1, step_cap + 1):
        pano = world.observe(env, node, heading)
        pose = WorldPose(env.positions[node][0], env.positions[node][1], heading)
        ctx = StepContext(
            panorama=pano, pose=pose, node=node, step=step,
            traveled=traveled, start_pose=start_pose,
        )
        step_input = build_step_input(ctx)
        step_inputs.append(step_input)
        scores = model.step(step_input)

        expert = pseudo_demonstrator_action(env, node, destination, dist_to_goal)
        label = 0 if expert is None else 1 + pano.candidate_ids.index(expert)
        labels.append(label)

        if rng.random() < beta:
            action = expert
        else:
            action = select_action(scores, "sample", rng)
        if action is None:
            truncated = False
            break
        traveled += env.edge_length(node, action)
        heading = bearing(pose.x, pose.y, *env.positions[action])
        node = action
        executed.append(node)
    return Rollout(
        step_inputs=step_inputs,
        labels=labels,
        executed_nodes=executed,
        truncated=truncated,
        instruction=instruction,
        start_pose=start_pose,
    )


@dataclass
class EpochRecord:
    epoch: int
    beta: float
    sap: float
    her: float
    sr: float
    spl: float
    ne: float

    def to_row(self) -> list:
        return [self.epoch, self.beta, self.sap, self.her, self.sr, self.spl, self.ne]


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_spl: float
    best_epoch: int
    best_params: dict[str, np.ndarray] = field(default_factory=dict)


def evaluate_policy(
    model: NavigationModel,
    envs: list[EnvironmentGraph],
    episodes: list[EpisodeSpec],
    world: World,
    config: Config,
    jobs: int = 1,
) -> dict[str, float]:
    """Greedy evaluation over a fixed episode set; order-independent means."""
    results = []

    def run_one(spec: EpisodeSpec):
        env = envs[spec.env_index]
        agent = PolicyAgent(model, mode="greedy")
        cap = step_cap_for(
            env, spec.start, spec.destination,
            config.training.step_cap_factor, config.training.step_cap_extra,
        )
        trace = run_episode(
            agent, env, world, spec.instruction, spec.start, spec.destination,
            cap, config.simulator.success_radius,
        )
        return trace.metrics

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_one, episodes))
    else:
        results = [run_one(spec) for spec in episodes]
    return {
        "sr": float(np.mean([m.sr for m in results])),
        "spl": float(np.mean([m.spl for m in results])),
        "ne": float(np.mean([m.ne for m in results])),
        "tl": float(np.mean([m.tl for m in results])),
        "osr": float(np.mean([m.osr for m in results])),
    }


def train(
    config: Config,
    train_envs: list[EnvironmentGraph],
    heldout_envs: list[EnvironmentGraph],
    world: World,
    seed: int | None = None,
    log=None,
) -> tuple[NavigationModel, TrainResult]:
    """SGD on the weighted sum of both losses with a DAgger schedule."""
    seed = config.seed if seed is None else seed
    tc = config.training
    model = NavigationModel(config.model, len(world.vocab), seed=seed)
    optimizer = SGD(
        model.named_parameters(), tc.learning_rate, tc.momentum, tc.grad_clip
    )
    master = np.random.SeedSequence([seed, 90210])
    rollout_rng = np.random.Generator(np.random.PCG64(master.spawn(1)[0]))
    eval_episodes = build_episode_set(
        heldout_envs, tc.eval_episodes, seed, tc.min_path_hops, tc.max_path_hops,
        2.0 * config.simulator.success_radius, world.vocab,
        config.model.max_instruction_length,
    )

    history: list[EpochRecord] = []
    best_spl = -1.0
    best_epoch = -1
    best_params: dict[str, np.ndarray] = {}
    batches = max(1, tc.episodes_per_epoch // tc.batch_episodes)
    for epoch in range(1, tc.epochs + 1):
        frac = 0.0 if tc.epochs <= 1 else (epoch - 1) / (tc.epochs - 1)
        beta = tc.beta_start + (tc.beta_end - tc.beta_start) * frac
        sap_sum = 0.0
        her_sum = 0.0
        episode_count = 0
        for _ in range(batches):
            model.zero_grad()
            for _ in range(tc.batch_episodes):
                env = train_envs[int(rollout_rng.integers(0, len(train_envs)))]
                start, dest, _, instruction = sample_episode(
                    env, rollout_rng, tc.min_path_hops, tc.max_path_hops,
                    2.0 * config.simulator.success_radius, world.vocab,
                    config.model.max_instruction_length,
                )
                cap = step_cap_for(env, start, dest, tc.step_cap_factor, tc.step_cap_extra)
                rollout = dagger_rollout(
                    model, env, world, instruction, start, dest, beta, rollout_rng, cap
                )
                sap, her = model.backward_episode(
                    rollout.labels, tc.weight_sap, tc.weight_her, tc.her_enabled
                )
                if not (math.isfinite(sap) and math.isfinite(her)):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}: sap={sap}, her={her}; "
                        f"episode start={start} dest={dest} env_seed={env.seed}"
                    )
                sap_sum += sap
                her_sum += her
                episode_count += 1
            optimizer.step(scale=1.0 / tc.batch_episodes)
            model.param_version += 1
        record = EpochRecord(
            epoch=epoch, beta=beta,
            sap=sap_sum / max(episode_count, 1), her=her_sum / max(episode_count, 1),
            sr=math.nan, spl=math.nan, ne=math.nan,
        )
        if epoch % tc.eval_every == 0 or epoch == tc.epochs:
            stats = evaluate_policy(model, heldout_envs, eval_episodes, world, config)
            record.sr = stats["sr"]
            record.spl = stats["spl"]
            record.ne = stats["ne"]
            if stats["spl"] > best_spl:
                best_spl = stats["spl"]
                best_epoch = epoch
                best_params = {
                    name: p.value.copy() for name, p in model.named_parameters().items()
                }
        history.append(record)
        if log is not None:
            log(record)
    if best_params:
        for name, p in model.named_parameters().items():
            p.value[...] = best_params[name]
    return model, TrainResult(
        history=history, best_spl=best_spl, best_epoch=best_epoch, best_params=best_params
    )
