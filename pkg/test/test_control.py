import itertools
import unittest

import numpy as np
import torch

from src.mvrl.config import ExperimentConfig, PlanConfig, ViewSpec
from src.mvrl.control import (
    ControlError,
    EpisodeRecord,
    ExperienceDataset,
    LatentObservationEncoder,
    MissingRewardEvaluatorError,
    MLPDynamicsModel,
    MLPDynamicsTrainer,
    MPCAgent,
    OracleCartPoleModel,
    build_planning_model,
    candidate_sequences,
    collect_random,
    mvpt_act,
    mvpt_train,
    plan_from_latent,
    record_episode,
    reward_evaluators_for,
    run_mb_loop,
)
from src.mvrl.envs import CartPoleEnv, CartPoleState, cartpole_dynamics
from src.mvrl.mvmodel import MultiViewModel, UnknownViewError
from src.mvrl.policy_mf import PolicyNetwork
from src.mvrl.utils import SeedBank
from src.mvrl.views import MultiViewEnv


class _LineModel:
    """1-D toy dynamics: action 0 moves by -0.5, action 1 by +0.5."""

    action_count = 2

    def initial_belief(self, batch_size):
        return torch.zeros(batch_size, 1)

    def infer(self, view_id, h, o):
        return o

    def step_belief(self, s, h, a):
        return s + (a.to(s.dtype) - 0.5).unsqueeze(-1)

    def predict_latent(self, h):
        return h

    def decode(self, view_id, s):
        return s


def _distance_reward(target):
    return lambda predicted, actions: -np.abs(predicted[:, 0] - target)


def _brute_force_first_action(start, target, horizon):
    best, best_score = None, -np.inf
    for sequence in itertools.product((0, 1), repeat=horizon):
        s, score = start, 0.0
        for a in sequence:
            s += a - 0.5
            score += -abs(s - target)
        if score > best_score:
            best, best_score = sequence, score
    return best[0]


def _two_view_env() -> MultiViewEnv:
    return MultiViewEnv(CartPoleEnv(), [ViewSpec(view_id=1), ViewSpec(view_id=2, kind="dummy_noise")])


def _record(length: int, offset: float = 0.0) -> EpisodeRecord:
    canonical = np.arange((length + 1) * 4, dtype=np.float64).reshape(length + 1, 4) * 0.01 + offset
    return EpisodeRecord(np.ones(length + 1, dtype=np.int64), canonical,
                         np.arange(length, dtype=np.int64) % 2, np.ones(length))


class TestCandidates(unittest.TestCase):

    def test_enumerates_when_affordable(self):
        print("\nTesting exhaustive lexicographic candidate enumeration...")
        candidates = candidate_sequences(2, PlanConfig(horizon=3, candidates=8), np.random.default_rng(0))
        self.assertEqual(candidates.shape, (8, 3))
        np.testing.assert_array_equal(candidates[0], [0, 0, 0])
        np.testing.assert_array_equal(candidates[1], [0, 0, 1])
        np.testing.assert_array_equal(candidates[-1], [1, 1, 1])

    def test_random_shooting_otherwise(self):
        print("\nTesting random candidates when enumeration does not fit...")
        candidates = candidate_sequences(3, PlanConfig(horizon=4, candidates=5), np.random.default_rng(0))
        self.assertEqual(candidates.shape, (5, 4))
        self.assertTrue(np.all((candidates >= 0) & (candidates < 3)))


class TestPlanner(unittest.TestCase):

    def test_planner_matches_brute_force(self):
        print("\nTesting the planner against brute-force search on a toy line model...")
        plan = PlanConfig(horizon=3, candidates=8)
        for target in (1.2, -1.2, 0.7, -0.3):
            with self.subTest(target=target):
                # --- ACT ---
                action = plan_from_latent(_LineModel(), torch.zeros(1, 1), torch.zeros(1, 1), plan,
                                          np.random.default_rng(0), {1: _distance_reward(target)})

                # --- ASSERT ---
                self.assertEqual(action, _brute_force_first_action(0.0, target, 3))

    def test_ties_pick_the_lowest_index(self):
        print("\nTesting equal scores resolve to the first candidate...")
        action = plan_from_latent(_LineModel(), torch.zeros(1, 1), torch.zeros(1, 1),
                                  PlanConfig(horizon=1, candidates=2), np.random.default_rng(0),
                                  {1: _distance_reward(0.0)})
        self.assertEqual(action, 0)

    def test_single_random_candidate(self):
        print("\nTesting a single random candidate is executed as drawn...")
        plan = PlanConfig(horizon=3, candidates=1)
        expected = np.random.default_rng(4).integers(2, size=(1, 3))[0, 0]
        action = plan_from_latent(_LineModel(), torch.zeros(1, 1), torch.zeros(1, 1), plan,
                                  np.random.default_rng(4), {1: _distance_reward(5.0)})
        self.assertEqual(action, expected)

    def test_missing_reward_evaluator(self):
        print("\nTesting planning without a reward evaluator for the planning view...")
        with self.assertRaises(MissingRewardEvaluatorError):
            plan_from_latent(_LineModel(), torch.zeros(1, 1), torch.zeros(1, 1), PlanConfig(canonical_view=2),
                             np.random.default_rng(0), {1: _distance_reward(0.0)})

    def test_reward_evaluators_need_identity_view(self):
        print("\nTesting reward evaluators exist only for an identity planning view...")
        env = _two_view_env()
        self.assertEqual(list(reward_evaluators_for(env, PlanConfig(canonical_view=1))), [1])
        self.assertEqual(reward_evaluators_for(env, PlanConfig(canonical_view=2)), {})


class TestOracle(unittest.TestCase):

    def test_oracle_follows_true_dynamics(self):
        print("\nTesting the oracle model steps the true cart-pole dynamics...")
        model = OracleCartPoleModel()
        s = torch.tensor([[0.0, 0.1, 0.02, -0.1]])
        stepped = model.step_belief(s, model.initial_belief(1), torch.tensor([1]))
        np.testing.assert_allclose(stepped.numpy(), cartpole_dynamics(s.numpy(), np.array([1.0])))

    def test_oracle_reads_only_canonical_view(self):
        print("\nTesting the oracle rejects non-canonical views...")
        with self.assertRaises(UnknownViewError):
            OracleCartPoleModel(view_id=1).infer(2, torch.zeros(1, 4), torch.zeros(1, 6))

    def test_oracle_mpc_balances_the_pole(self):
        print("\nTesting MPC with the oracle keeps the pole up for 100 steps...")
        # --- ARRANGE ---
        env = MultiViewEnv(CartPoleEnv(planning_reward="upright"), [ViewSpec(view_id=1)])
        agent = MPCAgent(OracleCartPoleModel(), PlanConfig(horizon=4, candidates=16),
                         {1: env.base.reward_from_observation}, np.random.default_rng(0))
        obs, vid = env.reset(np.random.default_rng(0))
        total = 0.0

        # --- ACT ---
        for _ in range(100):
            result = env.step(agent.act(obs, vid))
            total += result.reward
            obs, vid = result.observation, result.view_id
            if result.done:
                break

        # --- ASSERT ---
        self.assertEqual(total, 100.0)

    def test_oracle_requires_identity_cartpole_view(self):
        print("\nTesting the oracle planning model configuration check...")
        config = ExperimentConfig(kind="mb-mpc", views=[ViewSpec(view_id=1, kind="dummy_noise"), ViewSpec(view_id=2)],
                                  mb={"model": "oracle"})
        env = MultiViewEnv(CartPoleEnv(), config.views)
        with self.assertRaises(ControlError):
            build_planning_model(config, env)


class TestExperienceDataset(unittest.TestCase):

    def setUp(self):
        self.env = _two_view_env()

    def test_capacity_evicts_oldest_episode_across_pools(self):
        print("\nTesting eviction drops the oldest episode whichever pool holds it...")
        # --- ARRANGE ---
        dataset = ExperienceDataset(self.env, capacity=25)

        # --- ACT ---
        dataset.add(_record(10, 0.0), "rl")
        dataset.add(_record(10, 1.0), "rand")
        dataset.add(_record(10, 2.0), "rl")

        # --- ASSERT ---
        self.assertEqual(len(dataset.pools["rand"]), 1)
        self.assertEqual(len(dataset.pools["rl"]), 1)
        self.assertEqual(dataset.pools["rl"][0].canonical[0, 0], 2.0)
        self.assertEqual(dataset.total_steps, 20)
        self.assertEqual(dataset.collected_steps, 30)

    def test_random_pool_evicted_when_oldest(self):
        print("\nTesting random episodes collected first are evicted first...")
        dataset = ExperienceDataset(self.env, capacity=25)
        dataset.add(_record(10), "rand")
        dataset.add(_record(10), "rl")
        dataset.add(_record(10), "rl")
        self.assertEqual(len(dataset.pools["rand"]), 0)
        self.assertEqual(len(dataset.pools["rl"]), 2)

    def test_view_steps_count_acting_views(self):
        print("\nTesting per-view interaction counts survive eviction...")
        # --- ARRANGE ---
        dataset = ExperienceDataset(self.env, capacity=5)
        record = _record(4)
        record.view_ids[:] = [2, 2, 2, 2, 1]

        # --- ACT ---
        dataset.add(_record(3))
        dataset.add(record)

        # --- ASSERT ---
        self.assertEqual(len(dataset), 1)
        self.assertEqual(dataset.view_steps[1], 3)
        self.assertEqual(dataset.view_steps[2], 4)
        self.assertEqual(dataset.steps_in_views([2]), 4)
        self.assertEqual(dataset.steps_in_views([1, 2, 2]), 7)

    def test_unknown_pool(self):
        print("\nTesting an unknown pool name...")
        with self.assertRaises(ValueError):
            ExperienceDataset(self.env, 10).add(_record(3), "expert")

    def test_empty_dataset_cannot_sample(self):
        print("\nTesting sampling from an empty dataset...")
        with self.assertRaises(ControlError):
            ExperienceDataset(self.env, 10).sample_sequences(2, 5, np.random.default_rng(0))

    def test_corresponding_batches_share_rows(self):
        print("\nTesting corresponding batches replay one trajectory through every view...")
        # --- ARRANGE ---
        dataset = ExperienceDataset(self.env, 1000)
        for offset in (0.0, 1.0, 2.0):
            dataset.add(_record(9, offset))

        # --- ACT ---
        batch = dataset.sample_sequences(4, 6, np.random.default_rng(0), corresponding=True)

        # --- ASSERT ---
        self.assertEqual(tuple(batch.observations[1].shape), (4, 6, 4))
        self.assertEqual(tuple(batch.observations[2].shape), (4, 6, 6))
        self.assertEqual(tuple(batch.actions[1].shape), (4, 5))
        torch.testing.assert_close(batch.actions[1], batch.actions[2])
        self.assertTrue(batch.corresponding)

    def test_sequence_length_capped_by_median_episode(self):
        print("\nTesting the sequence length cap from the median episode length...")
        dataset = ExperienceDataset(self.env, 1000)
        for length in (3, 4, 20):
            dataset.add(_record(length))
        batch = dataset.sample_sequences(2, 50, np.random.default_rng(0), corresponding=False)
        self.assertEqual(batch.observations[1].shape[1], 5)
        self.assertFalse(batch.corresponding)

    def test_transitions_cover_every_step(self):
        print("\nTesting transitions enumerate every stored step...")
        dataset = ExperienceDataset(self.env, 1000)
        dataset.add(_record(4))
        dataset.add(_record(6), "rl")
        obs, actions, nxt = dataset.transitions(1)
        self.assertEqual(tuple(obs.shape), (10, 4))
        self.assertEqual(tuple(actions.shape), (10,))
        torch.testing.assert_close(obs[1:4], nxt[0:3])

    def test_record_episode_keeps_canonical_states(self):
        print("\nTesting recorded episodes hold T+1 canonical observations...")
        record, episode_return = record_episode(self.env, lambda obs, vid: 1, np.random.default_rng(0), 30)
        self.assertEqual(record.canonical.shape, (record.length + 1, 4))
        self.assertEqual(len(record.view_ids), record.length + 1)
        self.assertEqual(episode_return, float(record.rewards.sum()))

    def test_collect_random_fills_random_pool(self):
        print("\nTesting random collection...")
        dataset = collect_random(self.env, 5, np.random.default_rng(0), 40)
        self.assertEqual(len(dataset.pools["rand"]), 5)
        self.assertEqual(len(dataset.pools["rl"]), 0)

    def test_collect_random_stops_at_sample_cap(self):
        print("\nTesting random collection honours an interaction cap...")
        # --- ACT ---
        dataset = collect_random(self.env, 50, np.random.default_rng(0), 20, max_samples=45)

        # --- ASSERT ---
        self.assertEqual(dataset.collected_steps, 45)
        self.assertEqual(dataset.total_steps, 45)
        self.assertLess(len(dataset), 50)
        self.assertEqual(sum(dataset.view_steps.values()), 45)


class TestMLPBaseline(unittest.TestCase):

    def test_trainer_records_losses(self):
        print("\nTesting the MLP dynamics baseline trainer...")
        # --- ARRANGE ---
        env = _two_view_env()
        dataset = collect_random(env, 5, np.random.default_rng(0), 40)
        torch.manual_seed(0)
        model = MLPDynamicsModel(4, 2, hidden=16)
        trainer = MLPDynamicsTrainer(model, stepsize=1e-2, batch_size=32, steps_per_iteration=5)

        # --- ACT ---
        curves = trainer.train(dataset, 20, np.random.default_rng(1), torch.Generator().manual_seed(0))

        # --- ASSERT ---
        self.assertEqual([r.iteration for r in curves], list(range(1, 21)))
        self.assertTrue(all(r.loss_name == "L_mlp" and r.view_id == 1 for r in curves))
        self.assertLess(curves[-1].value, curves[0].value)

    def test_mlp_model_is_single_view(self):
        print("\nTesting the MLP baseline rejects other views...")
        with self.assertRaises(UnknownViewError):
            MLPDynamicsModel(4, 2).decode(2, torch.zeros(1, 4))


class TestModelBasedLoop(unittest.TestCase):

    def test_zero_iterations_collect_random_data_only(self):
        print("\nTesting the model-based loop with max_iter=0...")
        # --- ARRANGE ---
        config = ExperimentConfig(kind="mb-mpc", views=[ViewSpec(view_id=1), ViewSpec(view_id=2, kind="dummy_noise")],
                                  mb={"max_iter": 0, "random_rollouts": 3})
        env, eval_env = _two_view_env(), _two_view_env()

        # --- ACT ---
        result = run_mb_loop(env, eval_env, config, SeedBank(0))

        # --- ASSERT ---
        self.assertEqual(result.curve, [])
        self.assertEqual(result.losses, [])
        self.assertGreater(result.interactions, 0)
        self.assertIsNone(result.interactions_to_success)

    def test_random_phase_is_capped_and_logged_by_module_logger(self):
        print("\nTesting the random phase stops at the sample budget and logs through the control logger...")
        # --- ARRANGE ---
        config = ExperimentConfig(kind="mb-mpc", views=[ViewSpec(view_id=1), ViewSpec(view_id=2, kind="dummy_noise")],
                                  sample_budget=30, mb={"max_iter": 0, "random_rollouts": 50})

        # --- ACT ---
        with self.assertLogs("src.mvrl.control", level="INFO") as logs:
            result = run_mb_loop(_two_view_env(), _two_view_env(), config, SeedBank(0))

        # --- ASSERT ---
        self.assertEqual(result.interactions, 30)
        self.assertTrue(any("=" * 80 in line for line in logs.output))
        self.assertTrue(any("Model-based loop" in line for line in logs.output))

    def test_oracle_loop_evaluates_canonical_view(self):
        print("\nTesting one oracle model-based iteration...")
        config = ExperimentConfig(kind="mb-mpc", views=[ViewSpec(view_id=1)], sample_budget=1000,
                                  env={"planning_reward": "upright"},
                                  mb={"model": "oracle", "max_iter": 1, "random_rollouts": 2,
                                      "success_threshold": 1e9},
                                  plan={"horizon": 3, "candidates": 8}, eval={"episodes": 1})
        env = MultiViewEnv(CartPoleEnv(planning_reward="upright", max_steps=20), config.views)
        eval_env = MultiViewEnv(CartPoleEnv(planning_reward="upright", max_steps=20), config.views)
        points = []
        result = run_mb_loop(env, eval_env, config, SeedBank(0), on_point=points.extend)
        self.assertEqual([p.view_id for p in result.curve], [1, "all", 1, "all"])
        self.assertEqual(points, result.curve)
        self.assertGreater(result.curve[-1].samples, result.curve[0].samples)


class TestLatentPolicy(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)
        self.model = MultiViewModel({1: 4, 2: 6}, 2, latent_dim=3, belief_dim=5, hidden_dim=8)
        self.policy = PolicyNetwork(3, 2, (8,))

    def test_mvpt_act_uses_view_encoder(self):
        print("\nTesting latent-policy actions through each view's encoder...")
        h = self.model.initial_belief(1)
        for vid, dim in ((1, 4), (2, 6)):
            action, s = mvpt_act(self.model, self.policy, h, np.zeros(dim), vid)
            self.assertIn(action, (0, 1))
            self.assertEqual(tuple(s.shape), (1, 3))
        with self.assertRaises(UnknownViewError):
            mvpt_act(self.model, self.policy, h, np.zeros(4), 3)

    def test_latent_encoder_mean_at_evaluation(self):
        print("\nTesting the latent encoder is deterministic outside training...")
        encoder = LatentObservationEncoder(self.model, torch.Generator().manual_seed(0))
        first = encoder.encode(None, np.ones(4), 1, training=False)
        encoder.reset()
        second = encoder.encode(None, np.ones(4), 1, training=False)
        np.testing.assert_array_equal(first, second)
        encoder.observe_action(1)
        self.assertFalse(torch.equal(encoder.h, self.model.initial_belief(1)))


def _transfer_config(sample_budget: int, random_rollouts: int, policy_samples: int) -> ExperimentConfig:
    return ExperimentConfig.model_validate({
        "kind": "mvpt", "sample_budget": sample_budget,
        "views": [{"view_id": 1}, {"view_id": 2, "kind": "dummy_noise"}],
        "mvpt": {"source_views": [1], "target_views": [2], "random_rollouts": random_rollouts,
                 "rollout_max_steps": 20, "model_iterations": 1, "policy_samples": policy_samples},
        "model": {"latent_dim": 3, "belief_dim": 5, "hidden_dim": 8, "batch_size": 2, "seq_len": 4,
                  "prediction_steps": 1, "reconstruction_steps": 1},
        "policy": {"hidden_sizes": [8]},
        "ppo": {"horizon": 32, "minibatch": 16, "epochs": 1},
        "eval": {"episodes": 1, "every_samples": 32},
    })


class TestPolicyTransfer(unittest.TestCase):

    def _envs(self):
        views = [ViewSpec(view_id=1), ViewSpec(view_id=2, kind="dummy_noise")]
        return (MultiViewEnv(CartPoleEnv(max_steps=50), views),
                MultiViewEnv(CartPoleEnv(max_steps=50), views[:1]),
                MultiViewEnv(CartPoleEnv(max_steps=50), views))

    def test_curve_counts_model_learning_interactions(self):
        print("\nTesting transfer curve points include the model-learning interactions...")
        # --- ARRANGE ---
        config = _transfer_config(sample_budget=10_000, random_rollouts=3, policy_samples=64)
        env, policy_env, eval_env = self._envs()

        # --- ACT ---
        with self.assertLogs("src.mvrl.control", level="INFO") as logs:
            result = mvpt_train(env, policy_env, eval_env, config, SeedBank(0))

        # --- ASSERT ---
        model_samples = result.model_samples
        self.assertGreater(model_samples, 0)
        self.assertEqual(result.samples, 64)
        self.assertEqual(result.interactions, model_samples + 64)
        pooled = [p.samples for p in result.curve if p.view_id == "all"]
        self.assertEqual(pooled, [model_samples, model_samples + 32, model_samples + 64])
        # the policy environment only emits the source view
        self.assertGreater(result.target_samples, 0)
        self.assertLess(result.target_samples, model_samples)
        self.assertTrue(any("target views [2]" in line for line in logs.output))

    def test_budget_caps_random_data_and_policy_learning(self):
        print("\nTesting the sample budget covers both transfer phases...")
        # --- ARRANGE ---
        config = _transfer_config(sample_budget=60, random_rollouts=50, policy_samples=1000)
        env, policy_env, eval_env = self._envs()

        # --- ACT ---
        result = mvpt_train(env, policy_env, eval_env, config, SeedBank(0))

        # --- ASSERT ---
        self.assertEqual(result.model_samples, 60)
        self.assertEqual(result.samples, 0)
        self.assertEqual({p.samples for p in result.curve}, {60})
        self.assertGreater(result.target_samples, 0)
        self.assertLess(result.target_samples, 60)

    def test_target_views_select_the_counted_interactions(self):
        print("\nTesting target-view accounting follows the configured target views...")
        # --- ARRANGE ---
        config = _transfer_config(sample_budget=10_000, random_rollouts=4, policy_samples=32)
        config = config.model_copy(update={"mvpt": config.mvpt.model_copy(update={"target_views": [1, 2]})})
        env, policy_env, eval_env = self._envs()

        # --- ACT ---
        result = mvpt_train(env, policy_env, eval_env, config, SeedBank(0))

        # --- ASSERT ---
        self.assertEqual(result.target_samples, result.interactions)


if __name__ == '__main__':
    unittest.main()
