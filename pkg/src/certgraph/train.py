"""REINFORCE training of the softmax-linear controller on synthetic episodes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .certify import ConformalCalibrator
from .controller import (
    ACTIONS,
    Action,
    CostModel,
    EpisodeSample,
    LearnedPolicy,
    PolicyParams,
    RewardBaseline,
    episode_cost,
    reinforce_update,
    steps_from_trace,
)
from .dsl import NodeType
from .engine import CPMode, EngineConfig, execute
from .planner import plan_graph
from .seeding import derive_seed, rng_for
from .world import DIFFICULTIES, NoiseConfig, WorldInstance, default_noise, generate_instance

BUDGET_GRID = (8.0, 12.0, 16.0, 24.0)
_SEED_MASK = (1 << 63) - 1


def initial_params(accept_bias: float = 1.0, expand_bias: float = -1.0, abort_bias: float = -3.0) -> PolicyParams:
    """Bias-only start: mostly ACCEPT, some RETRY, rare EXPAND and ABORT.

    A sizeable abort probability at init makes every extra decision (and
    so every retry) look costly, and the policy then collapses onto ACCEPT.
    """
    params = PolicyParams()
    params.weights[0, ACTIONS.index(Action.ACCEPT)] = accept_bias
    params.weights[0, ACTIONS.index(Action.EXPAND)] = expand_bias
    params.weights[0, ACTIONS.index(Action.ABORT)] = abort_bias
    return params


def training_world(seed: int, index: int, noise: NoiseConfig | None = None) -> WorldInstance:
    difficulty = DIFFICULTIES[index % len(DIFFICULTIES)]
    wseed = derive_seed("train-world", seed, index) & _SEED_MASK
    return generate_instance(wseed, difficulty, noise=default_noise(difficulty, noise) if noise else None)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1500
    batch_size: int = 128
    lr: float = 0.3
    budgets: tuple[float, ...] = BUDGET_GRID
    n_worlds: int = 1200
    seed: int = 0
    cp_mode: CPMode = CPMode.NODE
    cost: CostModel = field(default_factory=CostModel)
    decay: float = 0.9
    noise: NoiseConfig | None = None


@dataclass
class TrainResult:
    params: PolicyParams
    baseline: RewardBaseline
    mean_rewards: list[float]


def run_batch(
    params: PolicyParams,
    worlds: Sequence[WorldInstance],
    budgets: Sequence[float],
    calibrators: Mapping[NodeType, ConformalCalibrator],
    config: EngineConfig,
    seeds: Sequence[int],
    greedy: bool,
) -> list[EpisodeSample]:
    policy = LearnedPolicy(params, greedy=greedy)
    out = []
    for w, b, s in zip(worlds, budgets, seeds):
        record, trace = execute(plan_graph(w), w, calibrators, policy, b, s, config)
        c, _, _ = episode_cost(trace, record, w.gold_answer, config.cost)
        out.append(EpisodeSample(steps_from_trace(trace), -c))
    return out


def train_policy(
    calibrators: Mapping[NodeType, ConformalCalibrator],
    config: TrainConfig | None = None,
    init: PolicyParams | None = None,
    on_iteration: Callable[[int, PolicyParams, float], None] | None = None,
) -> TrainResult:
    """Sampled episodes over a fixed training suite, one update per batch.

    Budgets are drawn from ``config.budgets`` so one policy covers the whole
    grid (remaining budget is a policy feature). The step size is divided
    by the batch size, i.e. ``lr`` is per episode.
    """
    config = config or TrainConfig()
    engine_cfg = EngineConfig(cost=config.cost, cp_mode=config.cp_mode, training=True)
    worlds = [training_world(config.seed, i, config.noise) for i in range(config.n_worlds)]
    rng = rng_for("train-sampler", config.seed, config.cp_mode.value)
    params = (init or initial_params()).copy()
    baseline = RewardBaseline(0.0, config.decay)
    history = []
    for it in range(config.iterations):
        idx = [rng.randrange(len(worlds)) for _ in range(config.batch_size)]
        budgets = [rng.choice(config.budgets) for _ in idx]
        seeds = [derive_seed("train-episode", config.seed, it, j) for j in range(config.batch_size)]
        batch = run_batch(params, [worlds[i] for i in idx], budgets, calibrators, engine_cfg, seeds, greedy=False)
        params, baseline = reinforce_update(batch, params, baseline, config.lr / config.batch_size)
        history.append(float(np.mean([ep.reward for ep in batch])))
        if on_iteration is not None:
            on_iteration(it, params, history[-1])
    return TrainResult(params, baseline, history)
