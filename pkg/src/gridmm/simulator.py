"""Synthetic discrete navigation environments and the episode runner.

Environments are random geometric graphs over a square area: nodes keep
a minimum spacing, edges connect nodes within a radius (patched to
connectivity through closest cross-component pairs), and every node
carries a landmark whose appearance vectors are drawn from a library
shared across environments, so associations learned on training
environments transfer to held-out ones.

Observations are panoramas of K views spanning the full circle.  Every
view carries an H x W grid of elements; each element looks along its
column direction, picks the angularly nearest node within range (or a
background appearance at maximum range), and reports that appearance
plus noise together with a slant depth consistent with the element's
elevation.  Candidates mark the adjacent graph nodes with exact
geometry, so projecting a candidate's ray recovers the node position.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .config import SimulatorConfig
from .encoders import ObservationInput
from .errors import GenerationError, ReachabilityError
from .geometry import WorldPose, bearing, normalize_heading
from .model import NavigationModel, StepInput
from .reasoner import ActionScores, select_action

ENVIRONMENT_SCHEMA = "gridmm-environment/1"
VOCAB_SCHEMA = "gridmm-vocabulary/1"
TRACE_SCHEMA = "gridmm-trace/1"

FILLER_WORDS = [
    "walk", "to", "the", "then", "past", "toward", "reach", "stop", "at",
    "and", "go", "by", "near", "until", "find",
]


class Vocabulary:
    """Filler words followed by landmark tokens."""

    def __init__(self, landmark_count: int) -> None:
        self.tokens = list(FILLER_WORDS) + [f"obj_{i:02d}" for i in range(landmark_count)]
        self.landmark_start = len(FILLER_WORDS)
        self.landmark_count = landmark_count

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def filler_ids(self) -> list[int]:
        return list(range(self.landmark_start))

    @property
    def landmark_ids(self) -> list[int]:
        return list(range(self.landmark_start, self.landmark_start + self.landmark_count))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(
                {
                    "schema": VOCAB_SCHEMA,
                    "tokens": self.tokens,
                    "landmark_start": self.landmark_start,
                }
            )
        )

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        data = json.loads(Path(path).read_text())
        vocab = cls(len(data["tokens"]) - data["landmark_start"])
        if vocab.tokens != data["tokens"]:
            vocab.tokens = data["tokens"]
            vocab.landmark_start = data["landmark_start"]
            vocab.landmark_count = len(data["tokens"]) - data["landmark_start"]
        return vocab


@dataclass
class EnvironmentGraph:
    seed: int
    positions: np.ndarray                  # (n, 2) meters
    edges: list[tuple[int, int]]           # undirected, u < v
    landmarks: list[int]                   # landmark token id per node
    area: float
    config: dict = field(default_factory=dict)
    adjacency: dict[int, list[tuple[int, float]]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.adjacency:
            adj: dict[int, list[tuple[int, float]]] = {i: [] for i in range(len(self.positions))}
            for u, v in self.edges:
                length = float(np.hypot(*(self.positions[u] - self.positions[v])))
                adj[u].append((v, length))
                adj[v].append((u, length))
            for node in adj:
                adj[node].sort()
            self.adjacency = adj

    @property
    def node_count(self) -> int:
        return int(self.positions.shape[0])

    def neighbors(self, node: int) -> list[tuple[int, float]]:
        return self.adjacency[node]

    def edge_length(self, u: int, v: int) -> float:
        for nbr, length in self.adjacency[u]:
            if nbr == v:
                return length
        raise ReachabilityError(f"no edge between {u} and {v}")

    def to_dict(self) -> dict:
        return {
            "schema": ENVIRONMENT_SCHEMA,
            "seed": self.seed,
            "area": self.area,
            "nodes": [
                {"id": i, "x": float(x), "y": float(y), "landmark": int(self.landmarks[i])}
                for i, (x, y) in enumerate(self.positions)
            ],
            "edges": [[u, v] for u, v in self.edges],
            "config": self.config,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "EnvironmentGraph":
        data = json.loads(Path(path).read_text())
        if data.get("schema") != ENVIRONMENT_SCHEMA:
            raise ValueError(f"unsupported environment schema {data.get('schema')!r}")
        nodes = sorted(data["nodes"], key=lambda n: n["id"])
        return cls(
            seed=data["seed"],
            positions=np.array([[n["x"], n["y"]] for n in nodes], dtype=np.float64),
            edges=[tuple(e) for e in data["edges"]],
            landmarks=[n["landmark"] for n in nodes],
            area=data["area"],
            config=data.get("config", {}),
        )


def _components(n: int, edges: Iterable[tuple[int, int]]) -> list[set[int]]:
    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for u, v in edges:
        ra, rb = find(u), find(v)
        if ra != rb:
            parent[ra] = rb
    groups: dict[int, set[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), set()).add(i)
    return list(groups.values())


def generate_environment(
    seed: int, cfg: SimulatorConfig, vocab: Vocabulary
) -> EnvironmentGraph:
    """Random geometric graph with spaced nodes, patched to connectivity."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n = cfg.node_count
    if n < 2:
        raise GenerationError("environments need at least two nodes")
    positions: list[np.ndarray] = []
    attempts = 0
    max_attempts = 400 * n
    while len(positions) < n:
        attempts += 1
        if attempts > max_attempts:
            raise GenerationError(
                f"could not place {n} nodes with spacing {cfg.min_node_spacing} "
                f"in a {cfg.area} m area after {max_attempts} attempts"
            )
        p = rng.uniform(0.0, cfg.area, size=2)
        if all(np.hypot(*(p - q)) >= cfg.min_node_spacing for q in positions):
            positions.append(p)
    pos = np.array(positions)

    edges = [
        (u, v)
        for u in range(n)
        for v in range(u + 1, n)
        if np.hypot(*(pos[u] - pos[v])) <= cfg.connect_radius
    ]
    # patch disconnected components through their closest cross pairs
    comps = _components(n, edges)
    while len(comps) > 1:
        best = None
        for i in range(len(comps)):
            for j in range(i + 1, len(comps)):
                for u in comps[i]:
                    for v in comps[j]:
                        d = float(np.hypot(*(pos[u] - pos[v])))
                        key = (d, min(u, v), max(u, v))
                        if best is None or key < best:
                            best = key
        _, u, v = best
        edges.append((min(u, v), max(u, v)))
        comps = _components(n, edges)

    ids = vocab.landmark_ids
    if len(ids) >= n:
        landmarks = [int(t) for t in rng.choice(ids, size=n, replace=False)]
    else:
        landmarks = [int(t) for t in rng.choice(ids, size=n, replace=True)]
    return EnvironmentGraph(
        seed=seed,
        positions=pos,
        edges=sorted(edges),
        landmarks=landmarks,
        area=cfg.area,
        config={
            "node_count": n,
            "connect_radius": cfg.connect_radius,
            "min_node_spacing": cfg.min_node_spacing,
        },
    )


class FeatureLibrary:
    """Landmark appearance vectors shared across all environments."""

    def __init__(self, landmark_count: int, feature_dim: int, view_dim: int, seed: int) -> None:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 11])))
        self.grid = rng.normal(size=(landmark_count, feature_dim))
        self.view = rng.normal(size=(landmark_count, view_dim))
        self.background_grid = rng.normal(size=feature_dim)
        self.background_view = rng.normal(size=view_dim)

    def grid_appearance(self, landmark_index: int | None) -> np.ndarray:
        return self.background_grid if landmark_index is None else self.grid[landmark_index]

    def view_appearance(self, landmark_index: int | None) -> np.ndarray:
        return self.background_view if landmark_index is None else self.view[landmark_index]


@dataclass
class Panorama:
    node: int
    heading: float
    view_features: np.ndarray         # (K, view_dim)
    view_headings: np.ndarray         # (K,) relative to agent heading
    element_features: np.ndarray      # (I, feature_dim)
    element_headings: np.ndarray      # (I,) relative
    element_elevations: np.ndarray    # (I,)
    element_depths: np.ndarray        # (I,) slant depths
    candidate_ids: list[int]
    candidate_headings: np.ndarray    # (C,) relative
    candidate_distances: np.ndarray   # (C,)
    candidate_views: np.ndarray       # (C,) containing view index
    candidate_features: np.ndarray    # (C, view_dim)


class World:
    """Bundles the vocabulary, appearance library, and observation rules."""

    def __init__(self, cfg: SimulatorConfig, feature_dim: int, view_dim: int) -> None:
        self.cfg = cfg
        self.feature_dim = feature_dim
        self.view_dim = view_dim
        self.vocab = Vocabulary(cfg.landmark_count)
        self.library = FeatureLibrary(cfg.landmark_count, feature_dim, view_dim, cfg.feature_seed)

    def landmark_index(self, env: EnvironmentGraph, node: int) -> int:
        return env.landmarks[node] - self.vocab.landmark_start

    def observe(self, env: EnvironmentGraph, node: int, heading: float) -> Panorama:
        cfg = self.cfg
        k, rows, cols = cfg.views, cfg.grid_rows, cfg.grid_cols
        heading = normalize_heading(heading)
        pos = env.positions[node]
        others = np.array([i for i in range(env.node_count) if i != node])
        rel_pos = env.positions[others] - pos
        dists = np.hypot(rel_pos[:, 0], rel_pos[:, 1])
        bearings = np.arctan2(rel_pos[:, 1], rel_pos[:, 0])

        noise_rng = np.random.Generator(
            np.random.PCG64(
                np.random.SeedSequence(
                    [env.seed & 0x7FFFFFFF, node, int(round(heading * 1e8)) & 0x7FFFFFFF, 181]
                )
            )
        )

        view_span = 2.0 * math.pi / k
        view_rel = np.array([normalize_heading(i * view_span) for i in range(k)])

        def pick_target(direction_abs: float) -> int | None:
            """Index into ``others`` of the best node along a direction."""
            in_range = dists <= cfg.max_range
            if not in_range.any():
                return None
            diffs = np.abs(
                np.remainder(bearings - direction_abs + math.pi, 2.0 * math.pi) - math.pi
            )
            diffs = np.where(in_range, diffs, np.inf)
            best = int(np.argmin(diffs))
            if diffs[best] <= cfg.angle_window:
                return best
            return None

        view_features = np.zeros((k, self.view_dim))
        for i in range(k):
            target = pick_target(heading + view_rel[i])
            app = self.library.view_appearance(
                None if target is None else self.landmark_index(env, int(others[target]))
            )
            view_features[i] = app + cfg.view_noise * noise_rng.normal(size=self.view_dim)

        count = k * rows * cols
        element_features = np.zeros((count, self.feature_dim))
        element_headings = np.zeros(count)
        element_elevations = np.zeros(count)
        element_depths = np.zeros(count)
        elevations = (
            (np.arange(rows) + 0.5) / rows - 0.5
        ) * cfg.elevation_span if rows > 1 else np.zeros(1)
        idx = 0
        for i in range(k):
            for w in range(cols):
                offset = ((w + 0.5) / cols - 0.5) * view_span
                rel_dir = normalize_heading(view_rel[i] + offset)
                target = pick_target(heading + rel_dir)
                if target is None:
                    line = cfg.max_range
                    app = self.library.grid_appearance(None)
                else:
                    line = float(dists[target])
                    app = self.library.grid_appearance(self.landmark_index(env, int(others[target])))
                for h in range(rows):
                    elev = float(elevations[h]) if rows > 1 else 0.0
                    element_features[idx] = app + cfg.grid_noise * noise_rng.normal(
                        size=self.feature_dim
                    )
                    element_headings[idx] = rel_dir
                    element_elevations[idx] = elev
                    element_depths[idx] = line / math.cos(elev)
                    idx += 1

        cand_ids = sorted(nbr for nbr, _ in env.neighbors(node))
        cand_headings = []
        cand_distances = []
        cand_views = []
        cand_features = np.zeros((len(cand_ids), self.view_dim))
        for j, nbr in enumerate(cand_ids):
            rel = normalize_heading(bearing(pos[0], pos[1], *env.positions[nbr]) - heading)
            cand_headings.append(rel)
            cand_distances.append(float(np.hypot(*(env.positions[nbr] - pos))))
            cand_views.append(int(round(rel / view_span)) % k)
            cand_features[j] = self.library.view_appearance(
                self.landmark_index(env, nbr)
            ) + cfg.view_noise * noise_rng.normal(size=self.view_dim)
        return Panorama(
            node=node,
            heading=heading,
            view_features=view_features,
            view_headings=view_rel,
            element_features=element_features,
            element_headings=element_headings,
            element_elevations=element_elevations,
            element_depths=element_depths,
            candidate_ids=cand_ids,
            candidate_headings=np.array(cand_headings),
            candidate_distances=np.array(cand_distances),
            candidate_views=np.array(cand_views, dtype=np.int64),
            candidate_features=cand_features,
        )


def generate_instruction(
    env: EnvironmentGraph,
    path: list[int],
    vocab: Vocabulary,
    rng: np.random.Generator,
    max_len: int = 64,
) -> list[int]:
    """Landmark tokens of the path nodes in order, interleaved with fillers."""
    fillers = vocab.filler_ids
    tokens: list[int] = [int(rng.choice(fillers))]
    for node in path:
        tokens.append(int(rng.choice(fillers)))
        tokens.append(int(env.landmarks[node]))
    tokens.append(int(rng.choice(fillers)))
    return tokens[:max_len]


def shortest_path(env: EnvironmentGraph, a: int, b: int) -> tuple[list[int], float]:
    """Dijkstra path and its metric length, ties broken by node id."""
    if not (0 <= a < env.node_count and 0 <= b < env.node_count):
        raise ReachabilityError(f"nodes {a}, {b} outside environment of {env.node_count}")
    dist, parent = _dijkstra(env, a)
    if math.isinf(dist[b]):
        raise ReachabilityError(f"no path from {a} to {b}")
    path = [b]
    while path[-1] != a:
        path.append(parent[path[-1]])
    path.reverse()
    return path, dist[b]


def _dijkstra(env: EnvironmentGraph, source: int) -> tuple[np.ndarray, list[int]]:
    dist = np.full(env.node_count, np.inf)
    parent = [-1] * env.node_count
    dist[source] = 0.0
    heap = [(0.0, source)]
    done = np.zeros(env.node_count, dtype=bool)
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for v, length in env.neighbors(u):
            nd = d + length
            if nd < dist[v] or (nd == dist[v] and parent[v] > u):
                dist[v] = nd
                parent[v] = u
                heapq.heappush(heap, (nd, v))
    return dist, parent


def distances_from(env: EnvironmentGraph, source: int) -> np.ndarray:
    dist, _ = _dijkstra(env, source)
    return dist


@dataclass
class Metrics:
    tl: float
    ne: float
    sr: int
    osr: int
    spl: float

    def to_dict(self) -> dict:
        return {"tl": self.tl, "ne": self.ne, "sr": self.sr, "osr": self.osr, "spl": self.spl}


def compute_metrics(
    executed_nodes: list[int],
    env: EnvironmentGraph,
    start: int,
    destination: int,
    success_radius: float,
) -> Metrics:
    tl = 0.0
    for u, v in zip(executed_nodes, executed_nodes[1:]):
        tl += env.edge_length(u, v)
    goal = env.positions[destination]
    final = env.positions[executed_nodes[-1]]
    ne = float(np.hypot(*(final - goal)))
    sr = int(ne <= success_radius)
    osr = int(
        any(
            float(np.hypot(*(env.positions[n] - goal))) <= success_radius
            for n in executed_nodes
        )
    )
    _, shortest = shortest_path(env, start, destination)
    if shortest <= 0.0:
        spl = float(sr)
    else:
        spl = sr * shortest / max(shortest, tl)
    return Metrics(tl=tl, ne=ne, sr=sr, osr=osr, spl=spl)


@dataclass
class StepContext:
    panorama: Panorama
    pose: WorldPose
    node: int
    step: int
    traveled: float
    start_pose: WorldPose


def build_step_input(ctx: StepContext) -> StepInput:
    """Assemble the model-facing step input from one observation."""
    pano = ctx.panorama
    pose = ctx.pose
    d_start = math.hypot(pose.x - ctx.start_pose.x, pose.y - ctx.start_pose.y)
    if d_start > 0.0:
        start_heading = normalize_heading(
            bearing(pose.x, pose.y, ctx.start_pose.x, ctx.start_pose.y) - pose.heading
        )
    else:
        start_heading = 0.0
    obs = ObservationInput(
        view_features=pano.view_features,
        view_headings=pano.view_headings,
        view_elevations=np.zeros_like(pano.view_headings),
        candidate_features=pano.candidate_features,
        candidate_headings=pano.candidate_headings,
        candidate_elevations=np.zeros_like(pano.candidate_headings),
        candidate_distances=pano.candidate_distances,
        candidate_ids=list(pano.candidate_ids),
        start_heading=start_heading,
        start_elevation=0.0,
        progress=(d_start, ctx.traveled, float(ctx.step - 1)),
    )
    line = pano.element_depths * np.cos(pano.element_elevations)
    world_angles = pose.heading + pano.element_headings
    points = np.stack(
        [pose.x + line * np.cos(world_angles), pose.y + line * np.sin(world_angles)], axis=1
    )
    return StepInput(
        obs=obs,
        grid_features=pano.element_features,
        grid_points=points,
        pose=pose,
        node=ctx.node,
        step=ctx.step,
    )


class PolicyAgent:
    """Drives the learned model; keeps the last scores for tracing."""

    def __init__(self, model: NavigationModel, mode: str = "greedy",
                 rng: np.random.Generator | None = None) -> None:
        self.model = model
        self.mode = mode
        self.rng = rng
        self.last_scores: ActionScores | None = None

    def begin(self, instruction: list[int], start_pose: WorldPose) -> None:
        self.model.begin_episode(instruction, start_pose, train=False)
        self.last_scores = None

    def act(self, ctx: StepContext) -> int | None:
        scores = self.model.step(build_step_input(ctx))
        self.last_scores = scores
        return select_action(scores, self.mode, self.rng)


class DemonstratorAgent:
    """Greedy-on-true-distance expert; optimal on the graph."""

    def __init__(self, env: EnvironmentGraph, destination: int) -> None:
        self.env = env
        self.destination = destination
        self.dist_to_goal = distances_from(env, destination)
        self.last_scores = None

    def begin(self, instruction: list[int], start_pose: WorldPose) -> None:
        pass

    def act(self, ctx: StepContext) -> int | None:
        return pseudo_demonstrator_action(
            self.env, ctx.node, self.destination, self.dist_to_goal
        )


def pseudo_demonstrator_action(
    env: EnvironmentGraph,
    current: int,
    destination: int,
    dist_to_goal: np.ndarray | None = None,
) -> int | None:
    """Next waypoint minimizing edge length plus remaining shortest distance."""
    if dist_to_goal is None:
        dist_to_goal = distances_from(env, destination)
    if math.isinf(dist_to_goal[current]):
        raise ReachabilityError(f"destination {destination} unreachable from {current}")
    if current == destination:
        return None
    best = None
    for nbr, length in env.neighbors(current):  # adjacency sorted by id: lowest-id ties win
        total = length + dist_to_goal[nbr]
        if best is None or total < best[0]:
            best = (total, nbr)
    return best[1]


class RandomAgent:
    """Uniform choice over stop plus the current candidates."""

    def __init__(self, rng: np.random.Generator) -> None:
        self.rng = rng
        self.last_scores = None

    def begin(self, instruction: list[int], start_pose: WorldPose) -> None:
        pass

    def act(self, ctx: StepContext) -> int | None:
        options = [None] + list(ctx.panorama.candidate_ids)
        return options[int(self.rng.integers(0, len(options)))]


@dataclass
class TraceStep:
    step: int
    node: int
    heading: float
    x: float
    y: float
    action: int | None
    fused_scores: list[float] | None = None
    side_length: float | None = None
    max_cell_population: int | None = None


@dataclass
class EpisodeTrace:
    start: int
    destination: int
    instruction: list[int]
    success_radius: float
    steps: list[TraceStep]
    executed_nodes: list[int]
    truncated: bool
    metrics: Metrics
    env_ref: str | None = None


def run_episode(
    agent,
    env: EnvironmentGraph,
    world: World,
    instruction: list[int],
    start: int,
    destination: int,
    step_cap: int,
    success_radius: float,
) -> EpisodeTrace:
    """Drive one episode: observe, decide, move, until stop or the cap."""
    node = start
    heading = 0.0
    traveled = 0.0
    executed = [start]
    start_pose = WorldPose(env.positions[start][0], env.positions[start][1], 0.0)
    agent.begin(instruction, start_pose)
    steps: list[TraceStep] = []
    truncated = True
    for step in range(1, step_cap + 1):
        pano = world.observe(env, node, heading)
        pose = WorldPose(env.positions[node][0], env.positions[node][1], heading)
        ctx = StepContext(
            panorama=pano, pose=pose, node=node, step=step,
            traveled=traveled, start_pose=start_pose,
        )
        action = agent.act(ctx)
        scores = getattr(agent, "last_scores", None)
        record = TraceStep(
            step=step, node=node, heading=heading, x=pose.x, y=pose.y, action=action,
            fused_scores=None if scores is None else [float(s) for s in scores.fused],
        )
        model = getattr(agent, "model", None)
        if model is not None and model.map_snapshots:
            snap = model.map_snapshots[-1]
            record.side_length = float(snap.side_length)
            record.max_cell_population = int(snap.populations().max())
        steps.append(record)
        if action is None:
            truncated = False
            break
        if action not in [nbr for nbr, _ in env.neighbors(node)]:
            raise ReachabilityError(f"action {action} is not adjacent to node {node}")
        traveled += env.edge_length(node, action)
        heading = bearing(pose.x, pose.y, *env.positions[action])
        node = action
        executed.append(node)
    metrics = compute_metrics(executed, env, start, destination, success_radius)
    return EpisodeTrace(
        start=start,
        destination=destination,
        instruction=list(instruction),
        success_radius=success_radius,
        steps=steps,
        executed_nodes=executed,
        truncated=truncated,
        metrics=metrics,
    )


def write_trace(trace: EpisodeTrace, path: str | Path) -> None:
    """One JSON object per line: header, steps, metrics."""
    with open(path, "w") as fh:
        header = {
            "type": "header",
            "schema": TRACE_SCHEMA,
            "env": trace.env_ref,
            "start": trace.start,
            "destination": trace.destination,
            "instruction": trace.instruction,
            "success_radius": trace.success_radius,
        }
        fh.write(json.dumps(header) + "\n")
        for s in trace.steps:
            fh.write(
                json.dumps(
                    {
                        "type": "step",
                        "step": s.step,
                        "node": s.node,
                        "heading": s.heading,
                        "pose": [s.x, s.y, s.heading],
                        "action": s.action,
                        "scores": s.fused_scores,
                        "side_length": s.side_length,
                        "max_cell_population": s.max_cell_population,
                    }
                )
                + "\n"
            )
        footer = {
            "type": "metrics",
            "truncated": trace.truncated,
            "executed_nodes": trace.executed_nodes,
        }
        footer.update(trace.metrics.to_dict())
        fh.write(json.dumps(footer) + "\n")


def read_trace(path: str | Path) -> dict:
    """Parsed trace: {'header': ..., 'steps': [...], 'metrics': ...}."""
    header = None
    steps = []
    metrics = None
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if obj["type"] == "header":
            header = obj
        elif obj["type"] == "step":
            steps.append(obj)
        elif obj["type"] == "metrics":
            metrics = obj
    if header is None or metrics is None:
        raise ValueError(f"trace {path} is missing its header or metrics line")
    return {"header": header, "steps": steps, "metrics": metrics}


@dataclass
class EpisodeSpec:
    env_index: int
    start: int
    destination: int
    instruction: list[int]


def sample_episode(
    env: EnvironmentGraph,
    rng: np.random.Generator,
    min_hops: int,
    max_hops: int,
    min_goal_distance: float,
    vocab: Vocabulary,
    max_instruction_len: int = 64,
) -> tuple[int, int, list[int], list[int]]:
    """Pick (start, destination, expert path, instruction tokens)."""
    for _ in range(200):
        start = int(rng.integers(0, env.node_count))
        dist, parent = _dijkstra(env, start)
        options = []
        for node in range(env.node_count):
            if node == start or math.isinf(dist[node]):
                continue
            path = [node]
            while path[-1] != start:
                path.append(parent[path[-1]])
            hops = len(path) - 1
            euclid = float(np.hypot(*(env.positions[node] - env.positions[start])))
            if min_hops <= hops <= max_hops and euclid >= min_goal_distance:
                options.append((node, list(reversed(path))))
        if options:
            node, path = options[int(rng.integers(0, len(options)))]
            instruction = generate_instruction(env, path, vocab, rng, max_instruction_len)
            return start, node, path, instruction
    raise GenerationError(
        f"no start/destination pair with {min_hops}-{max_hops} hop paths found"
    )


def build_episode_set(
    envs: list[EnvironmentGraph],
    count: int,
    seed: int,
    min_hops: int,
    max_hops: int,
    min_goal_distance: float,
    vocab: Vocabulary,
    max_instruction_len: int = 64,
) -> list[EpisodeSpec]:
    """A deterministic episode list cycling over the environment set."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 4242])))
    specs = []
    for i in range(count):
        env = envs[i % len(envs)]
        start, dest, _, instruction = sample_episode(
            env, rng, min_hops, max_hops, min_goal_distance, vocab, max_instruction_len
        )
        specs.append(
            EpisodeSpec(
                env_index=i % len(envs), start=start, destination=dest, instruction=instruction
            )
        )
    return specs


def step_cap_for(env: EnvironmentGraph, start: int, destination: int,
                 factor: int, extra: int) -> int:
    path, _ = shortest_path(env, start, destination)
    return factor * (len(path) - 1) + extra
