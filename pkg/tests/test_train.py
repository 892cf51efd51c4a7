from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import ttest_rel

from certgraph.controller import ACTIONS, Action, masked_softmax
from certgraph.engine import EngineConfig
from certgraph.seeding import derive_seed
from certgraph.train import TrainConfig, initial_params, run_batch, train_policy, training_world


@pytest.fixture(scope="module")
def trained(calibrators):
    return train_policy(calibrators, TrainConfig(iterations=200, batch_size=32, n_worlds=300, seed=1))


def eval_reward(params, calibrators, seed: int, n: int = 30) -> float:
    worlds = [training_world(1000 + seed, i) for i in range(n)]
    seeds = [derive_seed("eval", seed, i) for i in range(n)]
    batch = run_batch(params, worlds, [12.0] * n, calibrators, EngineConfig(), seeds, greedy=True)
    return float(np.mean([e.reward for e in batch]))


class TestInit:
    def test_bias_only(self):
        p = initial_params()
        assert np.count_nonzero(p.weights[1:]) == 0
        probs = masked_softmax(p.weights[0], np.ones(4, dtype=bool))
        assert probs.argmax() == ACTIONS.index(Action.ACCEPT)
        assert probs[ACTIONS.index(Action.ABORT)] < 0.05

    def test_training_world_deterministic(self):
        assert training_world(3, 7) == training_world(3, 7)
        assert training_world(3, 7) != training_world(3, 8)


class TestTraining:
    def test_history_and_callback(self, calibrators):
        seen = []
        res = train_policy(
            calibrators,
            TrainConfig(iterations=3, batch_size=4, n_worlds=10),
            on_iteration=lambda it, params, r: seen.append(it),
        )
        assert seen == [0, 1, 2] and len(res.mean_rewards) == 3
        assert np.all(np.isfinite(res.params.weights))

    def test_deterministic(self, calibrators):
        cfg = TrainConfig(iterations=3, batch_size=8, n_worlds=20, seed=2)
        a = train_policy(calibrators, cfg)
        b = train_policy(calibrators, cfg)
        assert np.array_equal(a.params.weights, b.params.weights)
        assert a.baseline.value == b.baseline.value

    def test_improves_on_initialization(self, trained, calibrators):
        learned = [eval_reward(trained.params, calibrators, s) for s in range(20)]
        init = [eval_reward(initial_params(), calibrators, s) for s in range(20)]
        assert np.mean(learned) >= np.mean(init)
        assert ttest_rel(learned, init, alternative="greater").pvalue < 0.05
