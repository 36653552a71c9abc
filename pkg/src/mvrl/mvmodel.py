"""
Multi-view latent dynamics model.

Every view has its own encoder q(s_t | h_t, o_t) and decoder p(o_t | s_t).
The recurrent memory h_t = g(s_{t-1}, h_{t-1}, a_{t-1}) and the Gaussian
prior head p(s_t | h_t) are shared, so all views are filtered into one
latent space. Training alternates latent-prediction and reconstruction
phases, both optionally regularised by a cross-view alignment term that
pulls the batch-mean posterior means of every view onto view 1's.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Set, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.func import jacrev, vmap

from .autodiff import (
    AdamOptimizer,
    GraphShapeError,
    NonFiniteGradientError,
    check_last_dim,
    clamp_logvar,
    gaussian_log_prob,
    kl_diag_gaussians,
    reparam_sample,
)
from .config import ModelConfig

logger = logging.getLogger(__name__)


class ModelError(Exception):
    """Base class for multi-view model failures."""


class AlignmentUnavailableError(ModelError):
    """The alignment loss was asked for without corresponding view batches."""


class ModelDivergenceError(ModelError):
    """A training loss or gradient became non-finite."""


class UnknownViewError(ModelError):
    pass


# ── networks ──────────────────────────────────────────────────────────

class ViewEncoder(nn.Module):
    """(h_t, o_t) to the mean and log-variance of q(s_t | h_t, o_t)."""

    def __init__(self, obs_dim: int, belief_dim: int, hidden_dim: int, latent_dim: int):
        super().__init__()
        self.obs_dim = obs_dim
        self.belief_dim = belief_dim
        self.net = nn.Sequential(nn.Linear(obs_dim + belief_dim, hidden_dim), nn.Tanh(),
                                 nn.Linear(hidden_dim, 2 * latent_dim))

    def forward(self, h: torch.Tensor, o: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        mu, logvar = self.net(torch.cat([o, h], dim=-1)).chunk(2, dim=-1)
        return mu, clamp_logvar(logvar)


class ViewDecoder(nn.Module):
    """s_t to the mean of the unit-variance Gaussian p(o_t | s_t)."""

    def __init__(self, latent_dim: int, hidden_dim: int, obs_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(latent_dim, hidden_dim), nn.Tanh(), nn.Linear(hidden_dim, obs_dim))

    @property
    def first_layer(self) -> nn.Linear:
        return self.net[0]

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return self.net(s)


@dataclass
class SequenceOutput:
    """Per-step tensors of one filtered batch, all shaped (B, T, ...)."""

    mu_q: torch.Tensor
    logvar_q: torch.Tensor
    latent: torch.Tensor
    recon: torch.Tensor
    prior_mu: torch.Tensor
    prior_logvar: torch.Tensor
    beliefs: torch.Tensor


@dataclass
class SequenceBatch:
    """
    Per-view observation sequences (B, T, D_i) and their actions (B, T-1).

    With ``corresponding`` set, row b of every view renders the same hidden
    trajectory and the action tensors are identical.
    """

    observations: Dict[int, torch.Tensor]
    actions: Dict[int, torch.Tensor]
    corresponding: bool = True

    @property
    def view_ids(self) -> List[int]:
        return sorted(self.observations)


class MultiViewModel(nn.Module):
    def __init__(self, view_dims: Mapping[int, int], action_count: int, latent_dim: int,
                 belief_dim: int, hidden_dim: int):
        super().__init__()
        self.view_dims = {int(k): int(v) for k, v in sorted(view_dims.items())}
        self.action_count = action_count
        self.latent_dim = latent_dim
        self.belief_dim = belief_dim
        self.hidden_dim = hidden_dim
        self.encoders = nn.ModuleDict({str(v): ViewEncoder(d, belief_dim, hidden_dim, latent_dim)
                                       for v, d in self.view_dims.items()})
        self.decoders = nn.ModuleDict({str(v): ViewDecoder(latent_dim, hidden_dim, d)
                                       for v, d in self.view_dims.items()})
        self.memory = nn.GRUCell(latent_dim + action_count, belief_dim)
        self.prior = nn.Sequential(nn.Linear(belief_dim, hidden_dim), nn.Tanh(), nn.Linear(hidden_dim, 2 * latent_dim))

    @property
    def view_ids(self) -> List[int]:
        return list(self.view_dims)

    @property
    def reference_view(self) -> int:
        return self.view_ids[0]

    def metadata(self) -> Dict[str, object]:
        return {
            "view_dims": {str(k): v for k, v in self.view_dims.items()},
            "action_count": self.action_count,
            "latent_dim": self.latent_dim,
            "belief_dim": self.belief_dim,
            "hidden_dim": self.hidden_dim,
        }

    @classmethod
    def from_metadata(cls, metadata: Mapping[str, object]) -> "MultiViewModel":
        return cls({int(k): int(v) for k, v in metadata["view_dims"].items()}, int(metadata["action_count"]),
                   int(metadata["latent_dim"]), int(metadata["belief_dim"]), int(metadata["hidden_dim"]))

    def _check_view(self, view_id: int) -> str:
        if view_id not in self.view_dims:
            raise UnknownViewError(f"Model has no encoder/decoder for view {view_id} (views: {self.view_ids})")
        return str(view_id)

    # -- primitive operations --

    def initial_belief(self, batch_size: int) -> torch.Tensor:
        return torch.zeros(batch_size, self.belief_dim)

    def encode(self, view_id: int, h: torch.Tensor, o: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        key = self._check_view(view_id)
        check_last_dim(f"encoder[{view_id}].observation", o, self.view_dims[view_id])
        check_last_dim(f"encoder[{view_id}].belief", h, self.belief_dim)
        return self.encoders[key](h, o)

    def decode(self, view_id: int, s: torch.Tensor) -> torch.Tensor:
        key = self._check_view(view_id)
        check_last_dim(f"decoder[{view_id}].latent", s, self.latent_dim)
        return self.decoders[key](s)

    def _action_input(self, a: torch.Tensor) -> torch.Tensor:
        if a.dtype in (torch.int64, torch.int32):
            return nn.functional.one_hot(a, self.action_count).to(torch.get_default_dtype())
        check_last_dim("memory.action", a, self.action_count)
        return a

    def memory_step(self, s_prev: torch.Tensor, h_prev: torch.Tensor, a_prev: torch.Tensor) -> torch.Tensor:
        check_last_dim("memory.latent", s_prev, self.latent_dim)
        return self.memory(torch.cat([s_prev, self._action_input(a_prev)], dim=-1), h_prev)

    def prior_params(self, h: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        mu, logvar = self.prior(h).chunk(2, dim=-1)
        return mu, clamp_logvar(logvar)

    # -- planner surface --

    def infer(self, view_id: int, h: torch.Tensor, o: torch.Tensor, sample: bool = False,
              generator: Optional[torch.Generator] = None) -> torch.Tensor:
        mu, logvar = self.encode(view_id, h, o)
        return reparam_sample(mu, logvar, generator) if sample else mu

    def step_belief(self, s: torch.Tensor, h: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        return self.memory_step(s, h, a)

    def predict_latent(self, h: torch.Tensor) -> torch.Tensor:
        return self.prior_params(h)[0]

    # -- sequences --

    def observe_sequence(self, view_id: int, obs: torch.Tensor, actions: torch.Tensor,
                         generator: Optional[torch.Generator] = None, sample: bool = True) -> SequenceOutput:
        """Filters a (B, T, D) batch of one view; ``actions`` holds at least T-1 steps."""
        batch, steps = obs.shape[0], obs.shape[1]
        if steps > 1 and actions.shape[1] < steps - 1:
            raise GraphShapeError("observe_sequence.actions", f"(B, >={steps - 1})", tuple(actions.shape))
        h = self.initial_belief(batch)
        zeros = torch.zeros(batch, self.latent_dim)
        keys = ("mu_q", "logvar_q", "latent", "recon", "prior_mu", "prior_logvar", "beliefs")
        out: Dict[str, List[torch.Tensor]] = {k: [] for k in keys}
        s = None
        for t in range(steps):
            if t > 0:
                h = self.memory_step(s, h, actions[:, t - 1])
                prior_mu, prior_logvar = self.prior_params(h)
            else:
                prior_mu, prior_logvar = zeros, zeros
            mu, logvar = self.encode(view_id, h, obs[:, t])
            s = reparam_sample(mu, logvar, generator) if sample else mu
            for key, value in zip(keys, (mu, logvar, s, self.decode(view_id, s), prior_mu, prior_logvar, h)):
                out[key].append(value)
        return SequenceOutput(**{k: torch.stack(v, dim=1) for k, v in out.items()})

    def observe_batch(self, batch: SequenceBatch, generator: Optional[torch.Generator] = None,
                      sample: bool = True) -> Dict[int, SequenceOutput]:
        return {vid: self.observe_sequence(vid, batch.observations[vid], batch.actions[vid], generator, sample)
                for vid in batch.view_ids}


# ── losses ────────────────────────────────────────────────────────────

def _norm(x: torch.Tensor, squared: bool) -> torch.Tensor:
    if squared:
        return torch.sum(x ** 2, dim=-1)
    return torch.linalg.vector_norm(x, dim=-1)


def reconstruction_terms(outputs: Mapping[int, SequenceOutput], batch: SequenceBatch,
                         squared: bool = False) -> Dict[int, torch.Tensor]:
    return {vid: torch.sum(_norm(out.recon - batch.observations[vid], squared)) for vid, out in outputs.items()}


def prediction_terms(outputs: Mapping[int, SequenceOutput], squared: bool = False) -> Dict[int, torch.Tensor]:
    """Prior mean vs posterior sample from the second step on (step 1 has the fixed prior)."""
    return {vid: torch.sum(_norm(out.prior_mu[:, 1:] - out.latent[:, 1:], squared)) for vid, out in outputs.items()}


def alignment_terms(outputs: Mapping[int, SequenceOutput], corresponding: bool = True,
                    require_corresponding: bool = True) -> Dict[int, torch.Tensor]:
    """Per view i >= 2: sum_t || mean_b mu_q^i[b, t] - mean_b mu_q^1[b, t] ||."""
    view_ids = sorted(outputs)
    if len(view_ids) < 2:
        return {}
    if not corresponding and require_corresponding:
        raise AlignmentUnavailableError("Alignment loss needs corresponding batches across views")
    reference = outputs[view_ids[0]].mu_q.mean(dim=0)
    terms = {}
    for vid in view_ids[1:]:
        other = outputs[vid].mu_q.mean(dim=0)
        steps = min(other.shape[0], reference.shape[0])
        terms[vid] = torch.sum(torch.linalg.vector_norm(other[:steps] - reference[:steps], dim=-1))
    return terms


def loss_reconstruction(outputs: Mapping[int, SequenceOutput], batch: SequenceBatch,
                        squared: bool = False) -> torch.Tensor:
    return sum(reconstruction_terms(outputs, batch, squared).values(), torch.zeros(()))


def loss_prediction(outputs: Mapping[int, SequenceOutput], squared: bool = False) -> torch.Tensor:
    return sum(prediction_terms(outputs, squared).values(), torch.zeros(()))


def loss_alignment(outputs: Mapping[int, SequenceOutput], corresponding: bool = True,
                   require_corresponding: bool = True) -> torch.Tensor:
    return sum(alignment_terms(outputs, corresponding, require_corresponding).values(), torch.zeros(()))


def elbo(model: MultiViewModel, batch: SequenceBatch, generator: Optional[torch.Generator] = None,
         outputs: Optional[Mapping[int, SequenceOutput]] = None) -> torch.Tensor:
    """Single-sample estimate of sum_views sum_t [log p(o_t | s_t) - KL(q_t || p_t)]."""
    outputs = outputs if outputs is not None else model.observe_batch(batch, generator)
    total = torch.zeros(())
    for vid, out in outputs.items():
        log_lik = torch.sum(gaussian_log_prob(batch.observations[vid], out.recon))
        total = total + log_lik - kl_diag_gaussians(out.mu_q, out.logvar_q, out.prior_mu, out.prior_logvar)
    return total


# ── validation ────────────────────────────────────────────────────────

def transform_losses(model: MultiViewModel, batch: SequenceBatch) -> Dict[int, float]:
    """Per target view: filter along view 1, decode with view i, distance to o^i."""
    reference = model.reference_view
    if len(batch.view_ids) < 2:
        return {}
    with torch.no_grad():
        filtered = model.observe_sequence(reference, batch.observations[reference], batch.actions[reference],
                                          sample=False)
        return {vid: float(torch.sum(torch.linalg.vector_norm(model.decode(vid, filtered.mu_q)
                                                              - batch.observations[vid], dim=-1)))
                for vid in batch.view_ids if vid != reference}


def prediction_transform_losses(model: MultiViewModel, batch: SequenceBatch) -> Dict[int, float]:
    """Per target view: prior-predicted latent from view-1 history, decoded with view i (steps >= 2)."""
    reference = model.reference_view
    if len(batch.view_ids) < 2:
        return {}
    with torch.no_grad():
        filtered = model.observe_sequence(reference, batch.observations[reference], batch.actions[reference],
                                          sample=False)
        predicted = filtered.prior_mu[:, 1:]
        return {vid: float(torch.sum(torch.linalg.vector_norm(model.decode(vid, predicted)
                                                              - batch.observations[vid][:, 1:], dim=-1)))
                for vid in batch.view_ids if vid != reference}


def validate_transform(model: MultiViewModel, batch: SequenceBatch) -> float:
    return float(sum(transform_losses(model, batch).values()))


def validate_pred_transform(model: MultiViewModel, batch: SequenceBatch) -> float:
    return float(sum(prediction_transform_losses(model, batch).values()))


# ── training ──────────────────────────────────────────────────────────

class BatchSource(Protocol):
    def sample_sequences(self, batch_size: int, seq_len: int, rng: np.random.Generator,
                         corresponding: bool) -> SequenceBatch: ...


@dataclass(frozen=True)
class LossRecord:
    iteration: int
    loss_name: str
    view_id: Union[int, str]
    value: float


class ModelTrainer:
    """
    Alternating-phase optimiser for a MultiViewModel.

    One iteration runs ``prediction_steps`` minibatch steps on the latent
    prediction loss and then ``reconstruction_steps`` on the reconstruction
    loss. The alignment loss joins both phases, or only the reconstruction
    phase when ``alignment_in_both_phases`` is off.
    """

    def __init__(self, model: MultiViewModel, config: ModelConfig):
        self.model = model
        self.config = config
        self.optimizer = AdamOptimizer(model.parameters(), lr=config.stepsize,
                                       max_grad_norm=config.max_grad_norm, name="mvmodel")
        self.iteration = 0
        self.curves: List[LossRecord] = []

    def _record(self, name: str, terms: Mapping[int, float]) -> None:
        for vid, value in sorted(terms.items()):
            self.curves.append(LossRecord(self.iteration, name, vid, float(value)))
        if terms:
            self.curves.append(LossRecord(self.iteration, name, "all", float(sum(terms.values()))))

    def _phase_loss(self, batch: SequenceBatch, phase: str, generator: torch.Generator
                    ) -> Tuple[torch.Tensor, Dict[str, Dict[int, float]]]:
        cfg = self.config
        outputs = self.model.observe_batch(batch, generator)
        if phase == "prediction":
            main_name, main = "L_p", prediction_terms(outputs, cfg.squared_norm)
            weight = cfg.prediction_weight
            with_alignment = cfg.alignment_in_both_phases
        else:
            main_name, main = "L_r", reconstruction_terms(outputs, batch, cfg.squared_norm)
            weight = cfg.reconstruction_weight
            with_alignment = True
        loss = weight * sum(main.values(), torch.zeros(()))
        parts = {main_name: {vid: float(v.detach()) for vid, v in main.items()}}
        if with_alignment and cfg.alignment_weight > 0:
            align = alignment_terms(outputs, batch.corresponding, require_corresponding=cfg.corresponding)
            loss = loss + cfg.alignment_weight * sum(align.values(), torch.zeros(()))
            parts["L_H"] = {vid: float(v.detach()) for vid, v in align.items()}
        return loss, parts

    def _step(self, batch: SequenceBatch, phase: str, generator: torch.Generator) -> Dict[str, Dict[int, float]]:
        loss, parts = self._phase_loss(batch, phase, generator)
        if not torch.isfinite(loss):
            raise ModelDivergenceError(
                f"Non-finite {phase} loss at iteration {self.iteration}: components {parts}"
            )
        try:
            self.optimizer.minimize(loss)
        except NonFiniteGradientError as e:
            raise ModelDivergenceError(f"{phase} phase diverged at iteration {self.iteration}: {e}") from e
        return parts

    def evaluate(self, batch: SequenceBatch, generator: torch.Generator) -> Dict[str, Dict[int, float]]:
        with torch.no_grad():
            outputs = self.model.observe_batch(batch, generator)
            result = {
                "L_r": {v: float(x) for v, x in reconstruction_terms(outputs, batch, self.config.squared_norm).items()},
                "L_p": {v: float(x) for v, x in prediction_terms(outputs, self.config.squared_norm).items()},
            }
            if batch.corresponding or not self.config.corresponding:
                result["L_H"] = {v: float(x) for v, x in
                                 alignment_terms(outputs, batch.corresponding, require_corresponding=False).items()}
        return result

    def validate(self, batch: SequenceBatch) -> Dict[str, Dict[int, float]]:
        return {"L_t": transform_losses(self.model, batch), "L_pt": prediction_transform_losses(self.model, batch)}

    def train(self, source: BatchSource, iterations: int, rng: np.random.Generator, generator: torch.Generator,
              validation: Optional[SequenceBatch] = None) -> List[LossRecord]:
        cfg = self.config
        corresponding = cfg.corresponding
        if self.iteration == 0:
            initial = self.evaluate(source.sample_sequences(cfg.batch_size, cfg.seq_len, rng, corresponding), generator)
            for name, terms in initial.items():
                self._record(name, terms)
            if validation is not None:
                for name, terms in self.validate(validation).items():
                    self._record(name, terms)

        end = self.iteration + iterations
        for _ in range(iterations):
            self.iteration += 1
            sums: Dict[str, Dict[int, float]] = {}
            counts: Dict[str, int] = {}
            for phase, steps in (("prediction", cfg.prediction_steps), ("reconstruction", cfg.reconstruction_steps)):
                for _ in range(steps):
                    batch = source.sample_sequences(cfg.batch_size, cfg.seq_len, rng, corresponding)
                    for name, terms in self._step(batch, phase, generator).items():
                        bucket = sums.setdefault(name, {})
                        for vid, value in terms.items():
                            bucket[vid] = bucket.get(vid, 0.0) + value
                        counts[name] = counts.get(name, 0) + 1
            for name, terms in sums.items():
                self._record(name, {vid: total / counts[name] for vid, total in terms.items()})

            if validation is not None and (self.iteration % cfg.validation_every == 0 or self.iteration == end):
                validated = self.validate(validation)
                for name, terms in validated.items():
                    self._record(name, terms)
            if self.iteration % cfg.validation_every == 0:
                summary = ", ".join(f"{name}={sum(t.values()):.4f}" for name, t in sums.items())
                logger.info(f"Model iteration {self.iteration}: {summary}")
        return self.curves


def train_model(model: MultiViewModel, source: BatchSource, config: ModelConfig, rng: np.random.Generator,
                generator: torch.Generator, iterations: Optional[int] = None,
                validation: Optional[SequenceBatch] = None) -> Tuple[MultiViewModel, List[LossRecord]]:
    trainer = ModelTrainer(model, config)
    curves = trainer.train(source, config.iterations if iterations is None else iterations, rng, generator, validation)
    return model, curves


# ── key elements ──────────────────────────────────────────────────────

def jaccard(a: Set[int], b: Set[int]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def select_salient(scores: np.ndarray, ratio: float) -> Set[int]:
    """Dimensions scoring at least ``ratio`` times the maximum."""
    top = float(np.max(scores)) if scores.size else 0.0
    return {int(i) for i in np.flatnonzero(scores >= ratio * top)} if top > 0 else set()


@dataclass
class KeyElementReport:
    logvar: Dict[int, np.ndarray]
    distance: Dict[int, np.ndarray]
    low_variance: Dict[int, Set[int]]
    key_set: Set[int]
    overlap: Dict[int, float]
    decoder_weight: Dict[int, np.ndarray]
    decoder_gradient: Dict[int, np.ndarray]
    weight_salient: Dict[int, Set[int]] = field(default_factory=dict)
    gradient_salient: Dict[int, Set[int]] = field(default_factory=dict)


def decoder_input_gradient(model: MultiViewModel, view_id: int, latents: torch.Tensor) -> np.ndarray:
    """Mean |d decode(s) / d s| per latent dim over samples and output coordinates."""
    decoder = model.decoders[model._check_view(view_id)]
    flat = latents.reshape(-1, model.latent_dim).detach()
    jacobians = vmap(jacrev(decoder))(flat)
    return torch.mean(torch.abs(jacobians), dim=(0, 1)).detach().numpy()


def key_element_analysis(model: MultiViewModel, batch: SequenceBatch, percentile: float = 20.0,
                         saliency_ratio: float = 0.5) -> KeyElementReport:
    """
    Which latent dimensions carry the shared dynamics.

    A dimension is low-variance for a view when its mean posterior
    log-variance is at or below the view's ``percentile``; the key set is
    the dimensions low-variance in every view.
    """
    with torch.no_grad():
        outputs = model.observe_batch(batch, sample=False)
    logvar = {vid: out.logvar_q.mean(dim=(0, 1)).numpy() for vid, out in outputs.items()}
    low_variance = {vid: {int(i) for i in np.flatnonzero(lv <= np.percentile(lv, percentile))}
                    for vid, lv in logvar.items()}
    view_ids = sorted(outputs)
    reference = view_ids[0]
    key_set = set.intersection(*low_variance.values()) if low_variance else set()

    distance = {}
    if batch.corresponding:
        ref_mean = outputs[reference].mu_q.mean(dim=0)
        for vid in view_ids[1:]:
            distance[vid] = torch.abs(outputs[vid].mu_q.mean(dim=0) - ref_mean).mean(dim=0).numpy()
    overlap = {vid: jaccard(low_variance[vid], low_variance[reference]) for vid in view_ids[1:]}

    decoder_weight, decoder_gradient = {}, {}
    for vid in view_ids:
        first = model.decoders[str(vid)].first_layer.weight.detach()
        decoder_weight[vid] = torch.sum(torch.abs(first), dim=0).numpy()
        decoder_gradient[vid] = decoder_input_gradient(model, vid, outputs[vid].mu_q)
    return KeyElementReport(
        logvar=logvar,
        distance=distance,
        low_variance=low_variance,
        key_set=key_set,
        overlap=overlap,
        decoder_weight=decoder_weight,
        decoder_gradient=decoder_gradient,
        weight_salient={vid: select_salient(w, saliency_ratio) for vid, w in decoder_weight.items()},
        gradient_salient={vid: select_salient(g, saliency_ratio) for vid, g in decoder_gradient.items()},
    )
