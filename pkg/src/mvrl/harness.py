"""
Experiment orchestration: one entry point per experiment kind, shared
artifact bookkeeping, run comparison and checkpoint analysis.
"""

import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import yaml
from torch import nn

from .autodiff import load_checkpoint, load_into, save_checkpoint
from .config import ExperimentConfig
from .control import (
    MLPDynamicsModel,
    build_multiview_model,
    build_planning_model,
    collect_random,
    mvpt_train,
    run_mb_loop,
)
from .envs import make_env
from .mvmodel import KeyElementReport, LossRecord, ModelTrainer, MultiViewModel, UnknownViewError, key_element_analysis
from .paths import RunPaths, resolve_run_paths
from .policy_mf import (
    CurvePoint,
    FusedObservationEncoder,
    PolicyController,
    RolloutBatch,
    RolloutCollector,
    SingleViewEncoder,
    evaluate_controller,
    evaluate_views,
    make_learner,
)
from .reports import (
    LOSSES_HEADERS,
    METRICS_HEADERS,
    TIMINGS_HEADERS,
    append_metrics,
    append_timing,
    generate_analysis_report,
    init_csv,
    plot_learning_curve,
    plot_losses,
    read_csv,
    write_losses,
    write_summary,
)
from .utils import SeedBank, get_project_root
from .views import MultiViewEnv, ObservationNormalizer

logger = logging.getLogger(__name__)

NOT_REACHED = "not reached (budget)"


class HarnessError(Exception):
    """Raised for experiment-level failures (bad checkpoints, missing runs)."""


@dataclass
class RunResult:
    paths: RunPaths
    kind: str
    curve: List[CurvePoint] = field(default_factory=list)
    losses: List[LossRecord] = field(default_factory=list)
    interactions_to_success: Optional[int] = None
    counters: Dict[str, int] = field(default_factory=dict)


class RunRecorder:
    """
    Owns the CSV artifacts of one run.

    Headers are written up front and rows appended as they are produced,
    so a failed run still leaves every row recorded before the failure.
    """

    def __init__(self, paths: RunPaths, seed: int):
        self.paths = paths
        self.seed = seed
        self.curve: List[CurvePoint] = []
        self.losses: List[LossRecord] = []
        self.counters: Dict[str, int] = {}
        self._started = time.perf_counter()
        init_csv(paths.metrics, METRICS_HEADERS)
        init_csv(paths.timings, TIMINGS_HEADERS)
        init_csv(paths.losses, LOSSES_HEADERS)

    def record(self, points: Sequence[CurvePoint]) -> None:
        if not points:
            return
        append_metrics(self.paths.metrics, points, self.seed)
        append_timing(self.paths.timings, points[0].samples, time.perf_counter() - self._started)
        self.curve.extend(points)

    def record_losses(self, records: Sequence[LossRecord]) -> None:
        self.losses = list(records)
        write_losses(self.paths.losses, self.losses)


def first_success(points: Sequence[CurvePoint], threshold: float) -> Optional[int]:
    """Samples at the first ``all`` point whose mean return reaches ``threshold``."""
    for point in points:
        if point.view_id == "all" and point.mean >= threshold:
            return point.samples
    return None


# ── construction helpers ──────────────────────────────────────────────

def build_env(config: ExperimentConfig, view_ids: Optional[Sequence[int]] = None) -> MultiViewEnv:
    views = [v for v in config.views if view_ids is None or v.view_id in view_ids]
    return MultiViewEnv(make_env(config.env), views, config.schedule.mode)


def _actor_envs(config: ExperimentConfig, count: int) -> List[MultiViewEnv]:
    """Parallel-actor environments sharing one set of running normalizers."""
    envs = [build_env(config) for _ in range(count)]
    for env in envs[1:]:
        env.normalizers = envs[0].normalizers
    return envs


def _module_tensors(modules: Dict[str, nn.Module], prefix: str = "") -> Dict[str, torch.Tensor]:
    return {f"{prefix}{name}.{key}": value for name, module in modules.items()
            for key, value in module.state_dict().items()}


def _normalizer_state(env: MultiViewEnv) -> Dict[str, object]:
    return {str(vid): normalizer.to_dict() for vid, normalizer in env.normalizers.items()}


def save_model_checkpoint(path: Path, model: nn.Module, config: ExperimentConfig,
                          env: Optional[MultiViewEnv] = None) -> Path:
    metadata: Dict[str, object] = {
        "kind": config.kind,
        "env": config.env.name,
        "view_ids": config.view_ids,
        "model_type": "mlp" if isinstance(model, MLPDynamicsModel) else "multiview",
    }
    if isinstance(model, MultiViewModel):
        metadata["model"] = model.metadata()
    if env is not None:
        metadata["normalizers"] = _normalizer_state(env)
    return save_checkpoint(path, model.state_dict(), metadata)


def save_policy_checkpoint(path: Path, modules: Dict[str, nn.Module], config: ExperimentConfig,
                           input_dim: Union[int, Dict[int, int]]) -> Path:
    metadata = {
        "kind": config.kind,
        "env": config.env.name,
        "view_ids": config.view_ids,
        "algorithm": config.mf.algorithm,
        "input_dim": input_dim,
        "hidden_sizes": list(config.policy.hidden_sizes),
    }
    return save_checkpoint(path, _module_tensors(modules), metadata)


def _policy_loop(config: ExperimentConfig, train_round: Callable[[], int],
                 evaluate: Callable[[int], None], budget: Optional[int] = None) -> int:
    """Trains until the sample budget, evaluating at start, every ``eval.every_samples`` and at the end."""
    budget = config.sample_budget if budget is None else budget
    samples = 0
    if budget <= 0:
        return samples
    evaluate(samples)
    next_eval = config.eval.every_samples
    while samples < budget:
        samples += train_round()
        if samples >= next_eval or samples >= budget:
            evaluate(samples)
            while next_eval <= samples:
                next_eval += config.eval.every_samples
    return samples


# ── pipelines ─────────────────────────────────────────────────────────

def _run_train_mf(config: ExperimentConfig, paths: RunPaths, recorder: RunRecorder, seeds: SeedBank) -> None:
    actors = config.ppo.actors if config.mf.algorithm == "ppo" else 1
    envs = _actor_envs(config, actors)
    eval_env = build_env(config)
    input_dim = FusedObservationEncoder(envs[0]).input_dim
    seeds.seed_torch_init("policy-init")
    generator = seeds.torch("policy")
    learner = make_learner(config.mf.algorithm, input_dim, envs[0].action_count, config.policy,
                           config.ppo, config.reinforce, generator)
    collectors = [RolloutCollector(env, FusedObservationEncoder(env), seeds.numpy(f"env-{i}"), generator)
                  for i, env in enumerate(envs)]
    eval_rng = seeds.numpy("eval")

    logger.info("=" * 80)
    logger.info(f"Fusion learner ({config.mf.algorithm}) on views {config.view_ids}, "
                f"fused input of {input_dim} dims, {actors} actor(s)")
    logger.info("=" * 80)

    def train_round() -> int:
        batch = RolloutBatch()
        for collector in collectors:
            batch.extend(collector.collect(learner.policy, **learner.collect_kwargs))
        stats = learner.update(batch)
        logger.debug(f"Update on {batch.samples} samples: {stats}")
        return batch.samples

    def evaluate(samples: int) -> None:
        eval_env.sync_normalizers(envs[0])
        controller = PolicyController(eval_env, learner.policy, FusedObservationEncoder(eval_env))
        recorder.record(evaluate_views(eval_env, controller, eval_env.view_ids, config.eval.episodes,
                                       eval_rng, samples))

    _policy_loop(config, train_round, evaluate)
    save_policy_checkpoint(paths.policy_checkpoint, learner.modules(), config, input_dim)


def _run_train_mf_independent(config: ExperimentConfig, paths: RunPaths, recorder: RunRecorder,
                              seeds: SeedBank) -> None:
    """One learner per view; sample counts aggregate across views."""
    envs = {vid: build_env(config) for vid in config.view_ids}
    eval_env = build_env(config)
    eval_rng = seeds.numpy("eval")
    learners, collectors = {}, {}
    for vid, env in envs.items():
        seeds.seed_torch_init(f"policy-init-{vid}")
        generator = seeds.torch(f"policy-{vid}")
        learners[vid] = make_learner(config.mf.algorithm, env.observation_dim(vid), env.action_count,
                                     config.policy, config.ppo, config.reinforce, generator)
        collectors[vid] = RolloutCollector(env, SingleViewEncoder(env, vid), seeds.numpy(f"env-{vid}"),
                                           generator, view_id=vid)

    logger.info("=" * 80)
    logger.info(f"Independent {config.mf.algorithm} learners on views {config.view_ids}")
    logger.info("=" * 80)

    def train_round() -> int:
        taken = 0
        for vid, learner in learners.items():
            batch = collectors[vid].collect(learner.policy, **learner.collect_kwargs)
            learner.update(batch)
            taken += batch.samples
        return taken

    def evaluate(samples: int) -> None:
        points, pooled = [], []
        for vid, learner in learners.items():
            eval_env.sync_normalizers(envs[vid])
            controller = PolicyController(eval_env, learner.policy, SingleViewEncoder(eval_env, vid))
            returns = evaluate_controller(eval_env, controller, config.eval.episodes, eval_rng, view_id=vid)
            pooled.append(returns)
            points.append(CurvePoint(samples, vid, float(returns.mean()), float(returns.std())))
        everything = np.concatenate(pooled)
        points.append(CurvePoint(samples, "all", float(everything.mean()), float(everything.std())))
        logger.info(f"Evaluation at {samples} samples: "
                    + ", ".join(f"view {p.view_id}: {p.mean:.1f}" for p in points))
        recorder.record(points)

    _policy_loop(config, train_round, evaluate)
    modules = {f"view{vid}.{name}": module for vid, learner in learners.items()
               for name, module in learner.modules().items()}
    save_policy_checkpoint(paths.policy_checkpoint, modules, config,
                           {vid: env.observation_dim(vid) for vid, env in envs.items()})


def _run_train_model(config: ExperimentConfig, paths: RunPaths, recorder: RunRecorder, seeds: SeedBank) -> None:
    env = build_env(config)
    seeds.seed_torch_init("model-init")
    model = build_multiview_model(config, env)
    if config.sample_budget == 0:
        logger.info("Sample budget is 0: saving the untrained model only.")
        save_model_checkpoint(paths.model_checkpoint, model, config, env)
        return

    max_steps = config.model.rollout_max_steps or env.base.max_steps
    data_rng = seeds.numpy("data")
    logger.info("=" * 80)
    logger.info(f"Model learning on views {config.view_ids}: {config.model.random_rollouts} random rollouts")
    logger.info("=" * 80)
    dataset = collect_random(env, config.model.random_rollouts, data_rng, max_steps,
                             capacity=config.mb.dataset_capacity, max_samples=config.sample_budget)
    validation_rng = seeds.numpy("validation")
    held_out = collect_random(env, max(2, config.model.random_rollouts // 5), validation_rng, max_steps,
                              capacity=config.mb.dataset_capacity)
    env.freeze()
    validation = held_out.sample_sequences(config.model.batch_size, config.model.seq_len, validation_rng,
                                           corresponding=True)

    trainer = ModelTrainer(model, config.model)
    trainer.train(dataset, config.model.iterations, data_rng, seeds.torch("model"), validation)
    recorder.record_losses(trainer.curves)
    save_model_checkpoint(paths.model_checkpoint, model, config, env)

    report = key_element_analysis(model, validation, config.analysis.percentile, config.analysis.saliency_ratio)
    generate_analysis_report(paths.root / "analysis", report)


def _run_mb_mpc(config: ExperimentConfig, paths: RunPaths, recorder: RunRecorder, seeds: SeedBank) -> None:
    env = build_env(config)
    if config.sample_budget == 0:
        seeds.seed_torch_init("model-init")
        model, _ = build_planning_model(config, env)
        if isinstance(model, nn.Module):
            save_model_checkpoint(paths.model_checkpoint, model, config, env)
        return

    result = run_mb_loop(env, build_env(config), config, seeds, on_point=recorder.record)
    recorder.record_losses(result.losses)
    recorder.counters["interactions"] = result.interactions
    if isinstance(result.model, nn.Module):
        save_model_checkpoint(paths.model_checkpoint, result.model, config, env)
    if result.interactions_to_success is None:
        logger.warning(f"No success within {result.interactions} interactions.")


def _run_mvpt(config: ExperimentConfig, paths: RunPaths, recorder: RunRecorder, seeds: SeedBank) -> None:
    env = build_env(config)
    if config.sample_budget == 0:
        seeds.seed_torch_init("model-init")
        save_model_checkpoint(paths.model_checkpoint, build_multiview_model(config, env), config, env)
        return

    result = mvpt_train(env, build_env(config, config.mvpt.source_views), build_env(config), config, seeds,
                        on_point=recorder.record)
    recorder.record_losses(result.losses)
    save_model_checkpoint(paths.model_checkpoint, result.model, config, env)
    save_policy_checkpoint(paths.policy_checkpoint, result.learner.modules(), config, result.model.latent_dim)
    recorder.counters.update(model_samples=result.model_samples, policy_samples=result.samples,
                             target_view_samples=result.target_samples)
    logger.info(f"Transfer run used {result.model_samples} model-learning samples and {result.samples} "
                f"policy samples; {result.target_samples} of them in target views {config.mvpt.target_views}.")


def _run_analyze(config: ExperimentConfig, paths: RunPaths, recorder: RunRecorder, seeds: SeedBank) -> None:
    if config.analysis.checkpoint is None:
        raise HarnessError("The analyze experiment needs analysis.checkpoint (or --checkpoint)")
    analyze_model(config.analysis.checkpoint, config, paths.root, seed=seeds.seed)


_PIPELINES: Dict[str, Callable[[ExperimentConfig, RunPaths, RunRecorder, SeedBank], None]] = {
    "train-mf": _run_train_mf,
    "train-mf-independent": _run_train_mf_independent,
    "train-model": _run_train_model,
    "mb-mpc": _run_mb_mpc,
    "mvpt": _run_mvpt,
    "analyze": _run_analyze,
}


def run_experiment(config: ExperimentConfig, out_dir: Optional[Path] = None,
                   seed: Optional[int] = None) -> RunResult:
    """
    Runs the pipeline named by ``config.kind`` and writes its artifacts.

    On failure a ``FAILED`` marker with the traceback is left next to the
    partial artifacts and the exception is re-raised.

    Args:
        config: The validated experiment configuration.
        out_dir: Overrides ``config.output_dir``.
        seed: Overrides ``config.seed``.

    Returns:
        A RunResult with the evaluation curve and loss records.
    """
    if seed is not None:
        config = config.model_copy(update={"seed": seed})
    paths = resolve_run_paths(out_dir or config.output_dir, config.run_name, config.seed, get_project_root())
    if paths.failure_marker.exists():
        paths.failure_marker.unlink()
    paths.config_resolved.write_text(config.to_yaml(), encoding="utf-8")

    seeds = SeedBank(config.seed)
    recorder = RunRecorder(paths, config.seed)
    logger.info("=" * 80)
    logger.info(f"  Experiment '{config.run_name}' ({config.kind}), seed {config.seed}")
    logger.info("=" * 80)
    try:
        _PIPELINES[config.kind](config, paths, recorder, seeds)
    except Exception as e:
        paths.failure_marker.write_text(traceback.format_exc(), encoding="utf-8")
        logger.critical(f"Run '{config.run_name}' failed: {e}. Partial artifacts are in {paths.root}")
        raise

    if recorder.curve:
        plot_learning_curve(paths.plot("learning_curve"), recorder.curve, config.eval.success_threshold,
                            title=f"{config.run_name} (seed {config.seed})")
    if recorder.losses:
        plot_losses(paths.plot("losses"), recorder.losses)

    result = RunResult(paths, config.kind, recorder.curve, recorder.losses,
                       first_success(recorder.curve, config.eval.success_threshold), dict(recorder.counters))
    _log_summary(config, result)
    return result


def _log_summary(config: ExperimentConfig, result: RunResult) -> None:
    logger.info("=" * 80)
    logger.info("  Run Summary")
    logger.info("=" * 80)
    logger.info(f"Artifacts: {result.paths.root}")
    logger.info(f"Evaluation points: {len(result.curve)}")
    logger.info(f"Loss records: {len(result.losses)}")
    for name, value in sorted(result.counters.items()):
        logger.info(f"{name}: {value}")
    if result.curve:
        final = [p for p in result.curve if p.view_id == "all"][-1]
        logger.info(f"Final return over all views: {final.mean:.1f} ± {final.std:.1f} at {final.samples} samples")
        reached = result.interactions_to_success
        logger.info(f"Interactions to {config.eval.success_threshold}: {reached if reached is not None else NOT_REACHED}")


# ── comparison ────────────────────────────────────────────────────────

def _expand_run_dirs(run_dirs: Sequence[Path]) -> List[Path]:
    """Accepts run directories or parents of ``seed_*`` run directories."""
    found = []
    for run_dir in map(Path, run_dirs):
        if (run_dir / "metrics.csv").is_file():
            found.append(run_dir)
        else:
            children = sorted(p.parent for p in run_dir.glob("*/metrics.csv"))
            if not children:
                raise HarnessError(f"No metrics.csv in '{run_dir}' or its subdirectories")
            found.extend(children)
    return found


def _method_name(run_dir: Path) -> str:
    resolved = run_dir / "config.resolved"
    if resolved.is_file():
        data = yaml.safe_load(resolved.read_text(encoding="utf-8")) or {}
        return str(data.get("name") or data.get("kind") or run_dir.parent.name)
    return run_dir.parent.name


def interactions_to_success(metrics_path: Path, threshold: float) -> Optional[int]:
    for row in read_csv(metrics_path):
        if row["view_id"] == "all" and float(row["eval_return_mean"]) >= threshold:
            return int(row["samples"])
    return None


def compare_runs(run_dirs: Sequence[Path], threshold: float, out_path: Optional[Path] = None) -> List[Dict[str, object]]:
    """
    Interactions-to-success per method, mean ± std (population) over the
    runs that reached ``threshold``.

    Runs are grouped by their configured name (or kind).
    """
    grouped: Dict[str, List[Optional[int]]] = {}
    for run_dir in _expand_run_dirs(run_dirs):
        grouped.setdefault(_method_name(run_dir), []).append(
            interactions_to_success(run_dir / "metrics.csv", threshold))

    rows = []
    for method, results in sorted(grouped.items()):
        reached = [r for r in results if r is not None]
        row: Dict[str, object] = {"method": method, "runs": len(results), "reached": len(reached),
                                  "interactions_mean": "", "interactions_std": "", "entry": NOT_REACHED}
        if reached:
            mean, std = float(np.mean(reached)), float(np.std(reached))
            row.update(interactions_mean=mean, interactions_std=std, entry=f"{mean:.1f} ± {std:.1f}")
            if len(reached) < len(results):
                row["entry"] += f" ({len(reached)}/{len(results)} reached)"
        rows.append(row)

    if out_path is not None:
        write_summary(Path(out_path), rows)
    return rows


# ── analysis ──────────────────────────────────────────────────────────

def _loss_view(value: str) -> Union[int, str]:
    return int(value) if value.isdigit() else value


def analyze_model(checkpoint: Path, config: ExperimentConfig, out_dir: Optional[Path] = None,
                  seed: Optional[int] = None) -> KeyElementReport:
    """
    Key-element analysis of a trained multi-view model checkpoint.

    Raises:
        HarnessError: If the checkpoint does not hold a multi-view model.
        UnknownViewError: If the checkpoint's views do not match the config's.
    """
    checkpoint = Path(checkpoint)
    tensors, metadata = load_checkpoint(checkpoint)
    if metadata.get("model_type") != "multiview" or "model" not in metadata:
        raise HarnessError(f"{checkpoint} does not contain a multi-view model")
    stored_views = sorted(int(v) for v in metadata["model"]["view_dims"])
    if stored_views != config.view_ids:
        raise UnknownViewError(f"Checkpoint views {stored_views} do not match configured views {config.view_ids}")

    model = load_into(MultiViewModel.from_metadata(metadata["model"]), tensors)
    env = build_env(config)
    for vid in config.view_ids:
        if env.observation_dim(vid) != model.view_dims[vid]:
            raise UnknownViewError(f"View {vid}: config renders {env.observation_dim(vid)} dims, "
                                   f"checkpoint expects {model.view_dims[vid]}")
    for vid, state in metadata.get("normalizers", {}).items():
        if int(vid) in env.normalizers:
            env.normalizers[int(vid)] = ObservationNormalizer.from_dict(state)
    env.freeze()

    rng = SeedBank(config.seed if seed is None else seed).numpy("analysis")
    max_steps = config.model.rollout_max_steps or env.base.max_steps
    dataset = collect_random(env, config.analysis.episodes, rng, max_steps, capacity=config.mb.dataset_capacity)
    batch = dataset.sample_sequences(config.model.batch_size, config.model.seq_len, rng, corresponding=True)
    report = key_element_analysis(model, batch, config.analysis.percentile, config.analysis.saliency_ratio)

    output_dir = Path(out_dir) if out_dir is not None else checkpoint.parent / "analysis"
    generate_analysis_report(output_dir, report)
    losses_path = checkpoint.parent / "losses.csv"
    if losses_path.is_file():
        records = [LossRecord(int(r["iteration"]), r["loss_name"], _loss_view(r["view_id"]), float(r["value"]))
                   for r in read_csv(losses_path)]
        if records:
            plot_losses(output_dir / "convergence.svg", records)
    return report
