import math
import unittest

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from src.mvrl.autodiff import GraphShapeError, gradient_check
from src.mvrl.config import ModelConfig
from src.mvrl.mvmodel import (
    AlignmentUnavailableError,
    LossRecord,
    ModelTrainer,
    MultiViewModel,
    SequenceBatch,
    SequenceOutput,
    UnknownViewError,
    alignment_terms,
    elbo,
    jaccard,
    key_element_analysis,
    loss_alignment,
    loss_prediction,
    loss_reconstruction,
    select_salient,
    transform_losses,
    validate_pred_transform,
    validate_transform,
)

VIEW_DIMS = {1: 4, 2: 6}


def _model(view_dims=None, latent_dim=3, seed=0) -> MultiViewModel:
    torch.manual_seed(seed)
    return MultiViewModel(view_dims or VIEW_DIMS, action_count=2, latent_dim=latent_dim, belief_dim=5, hidden_dim=8)


def _batch(view_dims=None, batch_size=2, steps=3, corresponding=True, seed=0) -> SequenceBatch:
    generator = torch.Generator().manual_seed(seed)
    dims = view_dims or VIEW_DIMS
    actions = torch.randint(0, 2, (batch_size, steps - 1), generator=generator)
    observations = {vid: torch.randn(batch_size, steps, d, generator=generator) for vid, d in dims.items()}
    return SequenceBatch(observations, {vid: actions.clone() for vid in dims}, corresponding)


class _FixedSource:
    """Batch source that always serves the same batch."""

    def __init__(self, batch: SequenceBatch):
        self.batch = batch
        self.calls = 0

    def sample_sequences(self, batch_size, seq_len, rng, corresponding):
        self.calls += 1
        return self.batch


def _parameter_check(module: nn.Module, args) -> bool:
    """Finite-difference check of ``module(*args)`` with respect to every parameter."""
    names = [name for name, _ in module.named_parameters()]
    values = [p.detach().clone().requires_grad_(True) for p in module.parameters()]
    return gradient_check(lambda *params: functional_call(module, dict(zip(names, params)), args), values)


def _output(latent, recon=None, mu_q=None, prior_mu=None) -> SequenceOutput:
    """A hand-written filter output; unspecified tensors are zeros."""
    zeros = torch.zeros_like(latent)
    return SequenceOutput(
        mu_q=zeros if mu_q is None else mu_q,
        logvar_q=zeros,
        latent=latent,
        recon=zeros if recon is None else recon,
        prior_mu=zeros if prior_mu is None else prior_mu,
        prior_logvar=zeros,
        beliefs=zeros,
    )


def _scalar_model() -> MultiViewModel:
    """One view, one latent, belief and hidden unit, for values worked out by hand."""
    model = MultiViewModel({1: 1}, action_count=2, latent_dim=1, belief_dim=1, hidden_dim=1)
    encoder, decoder = model.encoders["1"].net, model.decoders["1"].net
    with torch.no_grad():
        encoder[0].weight.copy_(torch.tensor([[1.0, 0.5]]))
        encoder[0].bias.zero_()
        encoder[2].weight.copy_(torch.tensor([[2.0], [0.0]]))
        encoder[2].bias.copy_(torch.tensor([0.0, -1.0]))
        decoder[0].weight.fill_(1.5)
        decoder[0].bias.zero_()
        decoder[2].weight.fill_(-2.0)
        decoder[2].bias.fill_(0.1)
        model.memory.weight_ih.copy_(torch.tensor([[0.5, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, -1.0]]))
        model.memory.weight_hh.copy_(torch.tensor([[0.2], [0.3], [0.4]]))
        model.memory.bias_ih.zero_()
        model.memory.bias_hh.copy_(torch.tensor([0.0, 0.0, 0.1]))
    return model


def _linear_gaussian_model(weight: float, bias: float, gain: float, offset: float, variance: float) -> MultiViewModel:
    """
    s ~ N(0, 1), o | s ~ N(weight * s + bias, 1) and
    q(s | o) = N(gain * o + offset, variance): both networks made linear.
    """
    model = MultiViewModel({1: 1}, action_count=2, latent_dim=1, belief_dim=1, hidden_dim=1)
    encoder, decoder = model.encoders["1"].net, model.decoders["1"].net
    encoder[1] = nn.Identity()
    decoder[1] = nn.Identity()
    with torch.no_grad():
        encoder[0].weight.copy_(torch.tensor([[1.0, 0.0]]))
        encoder[0].bias.zero_()
        encoder[2].weight.copy_(torch.tensor([[gain], [0.0]]))
        encoder[2].bias.copy_(torch.tensor([offset, math.log(variance)]))
        decoder[0].weight.fill_(weight)
        decoder[0].bias.fill_(bias)
        decoder[2].weight.fill_(1.0)
        decoder[2].bias.zero_()
    return model


class TestMultiViewModel(unittest.TestCase):

    def setUp(self):
        self.model = _model()
        self.batch = _batch()

    def test_sequence_output_shapes(self):
        print("\nTesting per-step output shapes of a filtered sequence...")
        # --- ACT ---
        out = self.model.observe_sequence(2, self.batch.observations[2], self.batch.actions[2], sample=False)

        # --- ASSERT ---
        self.assertEqual(tuple(out.mu_q.shape), (2, 3, 3))
        self.assertEqual(tuple(out.recon.shape), (2, 3, 6))
        self.assertEqual(tuple(out.beliefs.shape), (2, 3, 5))
        torch.testing.assert_close(out.prior_mu[:, 0], torch.zeros(2, 3))
        torch.testing.assert_close(out.latent, out.mu_q)

    def test_wrong_observation_width_raises(self):
        print("\nTesting the encoder rejects a mis-sized observation...")
        with self.assertRaises(GraphShapeError):
            self.model.encode(1, self.model.initial_belief(2), torch.zeros(2, 6))

    def test_unknown_view_raises(self):
        print("\nTesting an undeclared view id...")
        with self.assertRaises(UnknownViewError):
            self.model.decode(3, torch.zeros(1, 3))

    def test_short_action_sequence_raises(self):
        print("\nTesting a sequence with too few actions...")
        with self.assertRaises(GraphShapeError):
            self.model.observe_sequence(1, self.batch.observations[1], torch.zeros(2, 1, dtype=torch.long))

    def test_metadata_round_trip(self):
        print("\nTesting model reconstruction from metadata...")
        clone = MultiViewModel.from_metadata(self.model.metadata())
        self.assertEqual(clone.view_dims, self.model.view_dims)
        self.assertEqual(clone.latent_dim, 3)
        self.assertEqual(self.model.reference_view, 1)

    def test_planner_surface(self):
        print("\nTesting infer, step_belief and predict_latent...")
        h = self.model.initial_belief(1)
        s = self.model.infer(1, h, torch.zeros(1, 4))
        h_next = self.model.step_belief(s, h, torch.tensor([1]))
        self.assertEqual(tuple(self.model.predict_latent(h_next).shape), (1, 3))
        one_hot = self.model.step_belief(s, h, torch.tensor([[0.0, 1.0]]))
        torch.testing.assert_close(h_next, one_hot)


class TestLosses(unittest.TestCase):

    def setUp(self):
        self.model = _model()
        self.batch = _batch()

    def test_alignment_single_view_is_zero(self):
        print("\nTesting the alignment loss with a single view...")
        model = _model({1: 4})
        batch = _batch({1: 4})
        outputs = model.observe_batch(batch)
        self.assertEqual(float(loss_alignment(outputs)), 0.0)
        self.assertEqual(alignment_terms(outputs), {})

    def test_losses_are_non_negative(self):
        print("\nTesting every loss is non-negative...")
        outputs = self.model.observe_batch(self.batch, torch.Generator().manual_seed(1))
        self.assertGreaterEqual(float(loss_alignment(outputs)), 0.0)
        self.assertGreaterEqual(float(loss_reconstruction(outputs, self.batch)), 0.0)
        self.assertGreaterEqual(float(loss_prediction(outputs)), 0.0)

    def test_alignment_of_identical_views_is_zero(self):
        print("\nTesting alignment of two views with identical encoders and inputs...")
        model = _model({1: 4, 2: 4})
        model.encoders["2"].load_state_dict(model.encoders["1"].state_dict())
        batch = _batch({1: 4})
        batch = SequenceBatch({1: batch.observations[1], 2: batch.observations[1].clone()},
                              {1: batch.actions[1], 2: batch.actions[1].clone()})
        outputs = model.observe_batch(batch, sample=False)
        self.assertAlmostEqual(float(loss_alignment(outputs)), 0.0)

    def test_alignment_needs_corresponding_batches(self):
        print("\nTesting alignment refuses non-corresponding batches...")
        outputs = self.model.observe_batch(_batch(corresponding=False))
        with self.assertRaises(AlignmentUnavailableError):
            loss_alignment(outputs, corresponding=False)
        self.assertGreaterEqual(float(loss_alignment(outputs, False, require_corresponding=False)), 0.0)

    def test_transform_single_view_is_zero(self):
        print("\nTesting the transform validation losses with a single view...")
        model = _model({1: 4})
        batch = _batch({1: 4})
        self.assertEqual(transform_losses(model, batch), {})
        self.assertEqual(validate_transform(model, batch), 0.0)
        self.assertEqual(validate_pred_transform(model, batch), 0.0)

    def test_transform_losses_per_target_view(self):
        print("\nTesting the transform validation losses cover every target view...")
        losses = transform_losses(self.model, self.batch)
        self.assertEqual(list(losses), [2])
        self.assertGreater(losses[2], 0.0)
        self.assertGreater(validate_pred_transform(self.model, self.batch), 0.0)

    def test_elbo_is_finite(self):
        print("\nTesting the ELBO estimate...")
        value = elbo(self.model, self.batch, torch.Generator().manual_seed(0))
        self.assertTrue(torch.isfinite(value))


class TestHandComputedValues(unittest.TestCase):

    def setUp(self):
        self.model = _scalar_model()

    def test_encode(self):
        print("\nTesting the encoder on hand-set weights...")
        # --- ACT ---
        mu, logvar = self.model.encode(1, torch.tensor([[0.2]]), torch.tensor([[0.4]]))

        # --- ASSERT ---
        # hidden = tanh(1.0 * 0.4 + 0.5 * 0.2)
        self.assertAlmostEqual(float(mu), 2.0 * math.tanh(0.5), places=12)
        self.assertAlmostEqual(float(logvar), -1.0, places=12)

    def test_decode(self):
        print("\nTesting the decoder on hand-set weights...")
        value = self.model.decode(1, torch.tensor([[0.3]]))
        self.assertAlmostEqual(float(value), -2.0 * math.tanh(0.45) + 0.1, places=12)

    def test_memory_step_is_one_gru_update(self):
        print("\nTesting one memory step against a GRU update worked by hand...")
        # --- ARRANGE ---
        # input (s, one_hot(a)) = (0.6, 0, 1), previous belief 0.5
        sigmoid = lambda x: 1.0 / (1.0 + math.exp(-x))
        reset = sigmoid(0.5 * 0.6 + 0.2 * 0.5)
        update = sigmoid(0.3 * 0.5)
        candidate = math.tanh(0.6 - 1.0 + reset * (0.4 * 0.5 + 0.1))
        expected = (1.0 - update) * candidate + update * 0.5

        # --- ACT ---
        h = self.model.memory_step(torch.tensor([[0.6]]), torch.tensor([[0.5]]), torch.tensor([1]))

        # --- ASSERT ---
        self.assertAlmostEqual(float(h), expected, places=12)

    def test_reconstruction_loss(self):
        print("\nTesting the reconstruction loss on hand-written outputs...")
        # --- ARRANGE ---
        obs = torch.tensor([[[3.0, 4.0], [0.0, 1.0]]])
        batch = SequenceBatch({1: obs}, {1: torch.zeros(1, 1, dtype=torch.long)})
        outputs = {1: _output(torch.zeros(1, 2, 1), recon=torch.zeros(1, 2, 2))}

        # --- ACT / ASSERT ---
        self.assertAlmostEqual(float(loss_reconstruction(outputs, batch)), 5.0 + 1.0)
        self.assertAlmostEqual(float(loss_reconstruction(outputs, batch, squared=True)), 25.0 + 1.0)

    def test_prediction_loss_skips_first_step(self):
        print("\nTesting the prediction loss on hand-written outputs...")
        latent = torch.tensor([[[0.0, 0.0], [0.0, 0.0], [0.0, -2.0]]])
        prior_mu = torch.tensor([[[9.0, 9.0], [1.0, 0.0], [0.0, 0.0]]])
        outputs = {1: _output(latent, prior_mu=prior_mu)}
        self.assertAlmostEqual(float(loss_prediction(outputs)), 1.0 + 2.0)
        self.assertAlmostEqual(float(loss_prediction(outputs, squared=True)), 1.0 + 4.0)

    def test_alignment_loss_uses_batch_means(self):
        print("\nTesting the alignment loss on hand-written posterior means...")
        # --- ARRANGE ---
        latent = torch.zeros(2, 1, 2)
        outputs = {
            1: _output(latent, mu_q=torch.tensor([[[1.0, 0.0]], [[3.0, 0.0]]])),
            2: _output(latent, mu_q=torch.tensor([[[2.0, 3.0]], [[2.0, 5.0]]])),
            3: _output(latent, mu_q=torch.tensor([[[2.0, 0.0]], [[2.0, 0.0]]])),
        }

        # --- ACT ---
        terms = alignment_terms(outputs)

        # --- ASSERT ---
        self.assertEqual(sorted(terms), [2, 3])
        self.assertAlmostEqual(float(terms[2]), 4.0)
        self.assertAlmostEqual(float(terms[3]), 0.0)
        self.assertAlmostEqual(float(loss_alignment(outputs)), 4.0)


class TestLinearGaussianElbo(unittest.TestCase):
    """Single-step model where the evidence and the bound have closed forms."""

    WEIGHT, BIAS, OBS = 1.5, 0.2, 1.0
    SAMPLES = 20_000

    def _log_evidence(self) -> float:
        variance = self.WEIGHT ** 2 + 1.0
        return -0.5 * math.log(2 * math.pi * variance) - (self.OBS - self.BIAS) ** 2 / (2 * variance)

    def _analytic_bound(self, mean: float, variance: float) -> float:
        expected_log_lik = -0.5 * math.log(2 * math.pi) - 0.5 * (
            (self.OBS - self.BIAS - self.WEIGHT * mean) ** 2 + self.WEIGHT ** 2 * variance)
        kl = 0.5 * (variance + mean ** 2 - 1.0 - math.log(variance))
        return expected_log_lik - kl

    def test_estimate_approaches_bound_below_evidence(self):
        print("\nTesting the ELBO estimate against its closed form and the exact log-evidence...")
        # --- ARRANGE ---
        w, b = self.WEIGHT, self.BIAS
        batch = SequenceBatch({1: torch.full((self.SAMPLES, 1, 1), self.OBS)},
                              {1: torch.zeros(self.SAMPLES, 0, dtype=torch.long)})
        log_evidence = self._log_evidence()
        bounds = []

        for fraction in (0.0, 0.5, 1.0):
            with self.subTest(fraction=fraction):
                # interpolates q from the prior to the exact posterior
                gain = fraction * w / (w ** 2 + 1.0)
                offset = -fraction * w * b / (w ** 2 + 1.0)
                variance = (1.0 - fraction) + fraction / (w ** 2 + 1.0)
                model = _linear_gaussian_model(w, b, gain, offset, variance)

                # --- ACT ---
                estimate = float(elbo(model, batch, torch.Generator().manual_seed(0))) / self.SAMPLES
                bound = self._analytic_bound(gain * self.OBS + offset, variance)
                bounds.append(bound)

                # --- ASSERT ---
                self.assertAlmostEqual(estimate, bound, delta=0.03)
                self.assertLessEqual(bound, log_evidence + 1e-12)
                self.assertLessEqual(estimate, log_evidence + 0.03)

        self.assertAlmostEqual(bounds[-1], log_evidence, places=10)
        self.assertLess(bounds[0], bounds[1])
        self.assertLess(bounds[1], bounds[2])


class TestGradientChecks(unittest.TestCase):
    """Reverse mode against central finite differences on ten random instances each."""

    SEEDS = range(10)

    def _instances(self):
        for seed in self.SEEDS:
            yield seed, _model(seed=seed), _batch(seed=seed)

    def test_reconstruction_loss(self):
        print("\nTesting the reconstruction loss gradient by finite differences...")
        for seed, model, batch in self._instances():
            for squared in (True, False):
                with self.subTest(seed=seed, squared=squared):
                    obs = batch.observations[1].clone().requires_grad_(True)

                    def fn(o):
                        single = SequenceBatch({1: o}, {1: batch.actions[1]})
                        return loss_reconstruction(model.observe_batch(single, sample=False), single, squared)

                    self.assertTrue(gradient_check(fn, [obs]))

    def test_prediction_loss(self):
        print("\nTesting the prediction loss gradient by finite differences...")
        for seed, model, batch in self._instances():
            with self.subTest(seed=seed):
                inputs = [batch.observations[v].clone().requires_grad_(True) for v in (1, 2)]

                def fn(o1, o2):
                    return loss_prediction(model.observe_batch(SequenceBatch({1: o1, 2: o2}, batch.actions),
                                                               sample=False))

                self.assertTrue(gradient_check(fn, inputs))

    def test_alignment_loss(self):
        print("\nTesting the alignment loss gradient by finite differences...")
        for seed, model, batch in self._instances():
            with self.subTest(seed=seed):
                obs = batch.observations[2].clone().requires_grad_(True)

                def fn(o):
                    both = SequenceBatch({1: batch.observations[1], 2: o}, batch.actions)
                    return loss_alignment(model.observe_batch(both, sample=False))

                self.assertTrue(gradient_check(fn, [obs]))

    def test_elbo(self):
        print("\nTesting the ELBO gradient by finite differences under a fixed noise draw...")
        for seed, model, batch in self._instances():
            with self.subTest(seed=seed):
                inputs = [batch.observations[v].clone().requires_grad_(True) for v in (1, 2)]

                def fn(o1, o2):
                    return elbo(model, SequenceBatch({1: o1, 2: o2}, batch.actions),
                                torch.Generator().manual_seed(seed))

                self.assertTrue(gradient_check(fn, inputs))

    def test_memory_cell(self):
        print("\nTesting the GRU memory gradient by finite differences...")
        for seed, model, _ in self._instances():
            with self.subTest(seed=seed):
                s = torch.randn(3, model.latent_dim, requires_grad=True)
                h = torch.randn(3, model.belief_dim, requires_grad=True)
                a = torch.rand(3, model.action_count, requires_grad=True)
                self.assertTrue(gradient_check(model.memory_step, [s, h, a]))
                self.assertTrue(_parameter_check(model.memory, (torch.cat([s, a], dim=-1).detach(), h.detach())))

    def test_prior_head(self):
        print("\nTesting the prior head gradient by finite differences...")
        for seed, model, _ in self._instances():
            with self.subTest(seed=seed):
                h = torch.randn(3, model.belief_dim, requires_grad=True)
                self.assertTrue(gradient_check(model.prior_params, [h]))
                self.assertTrue(_parameter_check(model.prior, (h.detach(),)))

    def test_view_encoders_and_decoders(self):
        print("\nTesting every view's encoder and decoder gradients by finite differences...")
        for seed, model, _ in self._instances():
            for vid, dim in VIEW_DIMS.items():
                with self.subTest(seed=seed, view=vid):
                    h = torch.randn(3, model.belief_dim, requires_grad=True)
                    o = torch.randn(3, dim, requires_grad=True)
                    s = torch.randn(3, model.latent_dim, requires_grad=True)
                    self.assertTrue(gradient_check(lambda hh, oo: model.encode(vid, hh, oo), [h, o]))
                    self.assertTrue(gradient_check(lambda ss: model.decode(vid, ss), [s]))
                    self.assertTrue(_parameter_check(model.encoders[str(vid)], (h.detach(), o.detach())))
                    self.assertTrue(_parameter_check(model.decoders[str(vid)], (s.detach(),)))


class TestModelTrainer(unittest.TestCase):

    def setUp(self):
        self.config = ModelConfig(batch_size=2, seq_len=3, prediction_steps=1, reconstruction_steps=1,
                                  validation_every=1)

    def test_zero_iterations_leave_model_unchanged(self):
        print("\nTesting training for zero iterations...")
        # --- ARRANGE ---
        model = _model()
        before = {k: v.clone() for k, v in model.state_dict().items()}
        trainer = ModelTrainer(model, self.config)

        # --- ACT ---
        curves = trainer.train(_FixedSource(_batch()), 0, np.random.default_rng(0), torch.Generator().manual_seed(0))

        # --- ASSERT ---
        for key, value in model.state_dict().items():
            torch.testing.assert_close(value, before[key])
        self.assertTrue(all(r.iteration == 0 for r in curves))
        self.assertEqual({r.loss_name for r in curves}, {"L_r", "L_p", "L_H"})

    def test_training_records_every_iteration(self):
        print("\nTesting the trainer records losses per iteration...")
        # --- ARRANGE ---
        model = _model()
        source = _FixedSource(_batch())
        trainer = ModelTrainer(model, self.config)

        # --- ACT ---
        curves = trainer.train(source, 3, np.random.default_rng(0), torch.Generator().manual_seed(0),
                               validation=_batch(seed=1))

        # --- ASSERT ---
        self.assertEqual(trainer.iteration, 3)
        self.assertEqual(source.calls, 1 + 3 * 2)
        names = {(r.iteration, r.loss_name) for r in curves if r.view_id == "all"}
        for iteration in (1, 2, 3):
            for name in ("L_p", "L_r", "L_H", "L_t", "L_pt"):
                self.assertIn((iteration, name), names)
        self.assertTrue(all(np.isfinite(r.value) for r in curves))
        self.assertIsInstance(curves[0], LossRecord)

    def test_training_reduces_reconstruction_on_fixed_batch(self):
        print("\nTesting reconstruction improves on a fixed batch...")
        config = ModelConfig(batch_size=2, seq_len=3, prediction_steps=0, reconstruction_steps=1,
                             alignment_weight=0.0, stepsize=1e-2)
        model = _model()
        batch = _batch()
        trainer = ModelTrainer(model, config)
        curves = trainer.train(_FixedSource(batch), 60, np.random.default_rng(0), torch.Generator().manual_seed(0))
        recon = [r.value for r in curves if r.loss_name == "L_r" and r.view_id == "all"]
        self.assertLess(recon[-1], recon[0])


class TestKeyElements(unittest.TestCase):

    def _synthetic_model(self) -> MultiViewModel:
        model = _model(latent_dim=6)
        with torch.no_grad():
            for encoder in model.encoders.values():
                head = encoder.net[-1]
                head.weight.zero_()
                head.bias.zero_()
                head.bias[6:8] = -5.0
            # only latent dims 0 and 1 reach any decoder
            for decoder in model.decoders.values():
                first = decoder.first_layer.weight
                first.zero_()
                first[:, 0] = 0.5
                first[:, 1] = -0.5
        return model

    def test_low_variance_dims_form_key_set(self):
        print("\nTesting key elements on a model with two confident latent dims...")
        # --- ARRANGE ---
        model = self._synthetic_model()

        # --- ACT ---
        report = key_element_analysis(model, _batch(), percentile=20.0, saliency_ratio=0.5)

        # --- ASSERT ---
        self.assertEqual(report.key_set, {0, 1})
        self.assertEqual(report.low_variance[1], {0, 1})
        self.assertEqual(report.overlap[2], 1.0)
        np.testing.assert_allclose(report.logvar[2], [-5, -5, 0, 0, 0, 0])
        np.testing.assert_allclose(report.distance[2], np.zeros(6), atol=1e-12)
        self.assertEqual(report.decoder_weight[1].shape, (6,))
        self.assertEqual(report.decoder_gradient[2].shape, (6,))

    def test_decoder_saliency_matches_the_wired_dims(self):
        print("\nTesting weight and gradient saliency agree on the dims the decoders read...")
        # --- ACT ---
        report = key_element_analysis(self._synthetic_model(), _batch(), saliency_ratio=0.5)

        # --- ASSERT ---
        for vid in VIEW_DIMS:
            with self.subTest(view=vid):
                by_weight = select_salient(report.decoder_weight[vid], 0.5)
                by_gradient = select_salient(report.decoder_gradient[vid], 0.5)
                self.assertEqual(by_weight, {0, 1})
                self.assertEqual(by_gradient, {0, 1})
                self.assertEqual(report.weight_salient[vid], {0, 1})
                self.assertEqual(report.gradient_salient[vid], {0, 1})
                np.testing.assert_allclose(report.decoder_weight[vid][2:], np.zeros(4))
                np.testing.assert_allclose(report.decoder_gradient[vid][2:], np.zeros(4))

    def test_distance_skipped_without_correspondence(self):
        print("\nTesting cross-view distances need corresponding batches...")
        report = key_element_analysis(self._synthetic_model(), _batch(corresponding=False))
        self.assertEqual(report.distance, {})

    def test_jaccard(self):
        print("\nTesting the Jaccard overlap...")
        self.assertEqual(jaccard({0, 1}, {1, 2}), 1 / 3)
        self.assertEqual(jaccard(set(), set()), 1.0)

    def test_select_salient(self):
        print("\nTesting saliency selection against the maximum...")
        self.assertEqual(select_salient(np.array([1.0, 0.4, 0.6, 0.0]), 0.5), {0, 2})
        self.assertEqual(select_salient(np.zeros(3), 0.5), set())


if __name__ == '__main__':
    unittest.main()
