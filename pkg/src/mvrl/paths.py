import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional


@dataclass
class RunPaths:
    root: Path
    metrics: Path
    timings: Path
    losses: Path
    summary: Path
    config_resolved: Path
    model_checkpoint: Path
    policy_checkpoint: Path
    failure_marker: Path
    plots_dir: Path

    def plot(self, stem: str) -> Path:
        return self.plots_dir / f"{stem}.svg"


def resolve_run_paths(out_dir: Optional[Path], run_name: str, seed: int, project_root: Path,
                      create: bool = True) -> RunPaths:
    """
    Resolves every artifact path of one run.

    An explicit ``out_dir`` (CLI ``--out`` or ``output_dir`` in the config) is
    used as-is. Otherwise the run lands in ``<project_root>/runs/<name>/seed_<seed>``
    so seed sweeps never share a directory.

    Args:
        out_dir: The user-provided output directory, if any.
        run_name: The experiment name, used for the default location.
        seed: The run seed, used for the default location.
        project_root: The absolute path to the application's root.
        create: Whether to create the directory tree.

    Returns:
        A RunPaths object with all paths resolved.
    """
    if out_dir is not None:
        root = Path(out_dir)
        logging.info(f"Using user-provided output directory '{root}'.")
    else:
        root = project_root / "runs" / run_name / f"seed_{seed}"
        logging.info(f"No output directory given, using default location '{root}'.")

    if create:
        root.mkdir(parents=True, exist_ok=True)

    return RunPaths(
        root=root,
        metrics=root / "metrics.csv",
        timings=root / "timings.csv",
        losses=root / "losses.csv",
        summary=root / "summary.csv",
        config_resolved=root / "config.resolved",
        model_checkpoint=root / "model.ckpt.json",
        policy_checkpoint=root / "policy.ckpt.json",
        failure_marker=root / "FAILED",
        plots_dir=root,
    )
