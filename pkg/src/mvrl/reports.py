import csv
import logging
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .mvmodel import KeyElementReport, LossRecord  # noqa: E402
from .policy_mf import CurvePoint  # noqa: E402

METRICS_HEADERS = ["samples", "view_id", "eval_return_mean", "eval_return_std", "seed"]
TIMINGS_HEADERS = ["samples", "wall_clock_seconds"]
LOSSES_HEADERS = ["iteration", "loss_name", "view_id", "value"]
SUMMARY_HEADERS = ["method", "runs", "reached", "interactions_mean", "interactions_std", "entry"]
LOGVAR_HEADERS = ["dim", "view_id", "mean_logvar"]
DISTANCE_HEADERS = ["dim", "view_id", "distance"]
SALIENCY_HEADERS = ["dim", "view_id", "decoder_weight", "decoder_gradient"]
KEY_ELEMENTS_HEADERS = ["view_id", "low_variance_dims", "key_set", "jaccard_overlap",
                        "weight_salient", "gradient_salient"]

Row = Mapping[str, Any]

# Fixed salt and no date metadata keep SVG output byte-identical across reruns.
matplotlib.rcParams["svg.hashsalt"] = "mvrl"
_SVG_METADATA = {"Date": None}


class ReportError(Exception):
    """Raised when an artifact cannot be written."""


def _write_csv(output_path: Path, headers: Sequence[str], rows: Iterable[Row], append: bool = False) -> None:
    """Writes (or appends) rows to a CSV file; a fresh file always gets the header."""
    try:
        with open(output_path, 'a' if append else 'w', newline='', encoding='utf-8') as csvfile:
            writer = csv.DictWriter(csvfile, fieldnames=list(headers))
            if not append:
                writer.writeheader()
            for row in rows:
                writer.writerow(row)
    except IOError as e:
        logging.error(f"Failed to write CSV report to {output_path}. Reason: {e}")
        raise ReportError(f"Cannot write {output_path}: {e}") from e


def read_csv(path: Path) -> List[Dict[str, str]]:
    try:
        with open(path, newline='', encoding='utf-8') as csvfile:
            return list(csv.DictReader(csvfile))
    except IOError as e:
        raise ReportError(f"Cannot read {path}: {e}") from e


def init_csv(output_path: Path, headers: Sequence[str]) -> None:
    _write_csv(output_path, headers, [])


def append_metrics(output_path: Path, points: Sequence[CurvePoint], seed: int) -> None:
    _write_csv(output_path, METRICS_HEADERS, (
        {"samples": p.samples, "view_id": p.view_id, "eval_return_mean": p.mean,
         "eval_return_std": p.std, "seed": seed}
        for p in points
    ), append=True)


def append_timing(output_path: Path, samples: int, seconds: float) -> None:
    _write_csv(output_path, TIMINGS_HEADERS, [{"samples": samples, "wall_clock_seconds": round(seconds, 3)}],
               append=True)


def write_losses(output_path: Path, records: Sequence[LossRecord]) -> None:
    _write_csv(output_path, LOSSES_HEADERS, (
        {"iteration": r.iteration, "loss_name": r.loss_name, "view_id": r.view_id, "value": r.value}
        for r in records
    ))
    logging.info(f"Wrote {len(records)} loss records to {output_path}")


def write_summary(output_path: Path, rows: Sequence[Row]) -> None:
    _write_csv(output_path, SUMMARY_HEADERS, rows)
    logging.info(f"Successfully generated summary at: {output_path}")


# ── analysis tables ───────────────────────────────────────────────────

def _dims(values: Iterable[int]) -> str:
    return " ".join(str(d) for d in sorted(values))


def _write_logvar(output_dir: Path, report: KeyElementReport) -> Path:
    path = output_dir / "logvar.csv"
    _write_csv(path, LOGVAR_HEADERS, (
        {"dim": dim, "view_id": vid, "mean_logvar": float(value)}
        for vid, values in sorted(report.logvar.items()) for dim, value in enumerate(values)
    ))
    return path


def _write_distance(output_dir: Path, report: KeyElementReport) -> Path:
    path = output_dir / "distance.csv"
    _write_csv(path, DISTANCE_HEADERS, (
        {"dim": dim, "view_id": vid, "distance": float(value)}
        for vid, values in sorted(report.distance.items()) for dim, value in enumerate(values)
    ))
    return path


def _write_saliency(output_dir: Path, report: KeyElementReport) -> Path:
    path = output_dir / "saliency.csv"
    _write_csv(path, SALIENCY_HEADERS, (
        {"dim": dim, "view_id": vid, "decoder_weight": float(weight),
         "decoder_gradient": float(report.decoder_gradient[vid][dim])}
        for vid, weights in sorted(report.decoder_weight.items()) for dim, weight in enumerate(weights)
    ))
    return path


def _write_key_elements(output_dir: Path, report: KeyElementReport) -> Path:
    path = output_dir / "key_elements.csv"
    rows = [
        {
            "view_id": vid,
            "low_variance_dims": _dims(dims),
            "key_set": _dims(report.key_set),
            "jaccard_overlap": report.overlap.get(vid, 1.0),
            "weight_salient": _dims(report.weight_salient.get(vid, ())),
            "gradient_salient": _dims(report.gradient_salient.get(vid, ())),
        }
        for vid, dims in sorted(report.low_variance.items())
    ]
    _write_csv(path, KEY_ELEMENTS_HEADERS, rows)
    return path


# ── plots ─────────────────────────────────────────────────────────────

def _save(fig: "plt.Figure", output_path: Path) -> Path:
    try:
        fig.savefig(output_path, format="svg", metadata=_SVG_METADATA)
    except OSError as e:
        raise ReportError(f"Cannot write plot {output_path}: {e}") from e
    finally:
        plt.close(fig)
    logging.info(f"Successfully generated plot at: {output_path}")
    return output_path


def plot_learning_curve(output_path: Path, points: Sequence[CurvePoint], threshold: Optional[float] = None,
                        title: str = "Evaluation return") -> Path:
    """Mean ± std evaluation return per view against environment samples."""
    fig, ax = plt.subplots(figsize=(6, 4))
    views: Dict[Union[int, str], List[CurvePoint]] = {}
    for point in points:
        views.setdefault(point.view_id, []).append(point)
    for vid, series in views.items():
        x = np.array([p.samples for p in series], dtype=np.float64)
        mean = np.array([p.mean for p in series])
        std = np.array([p.std for p in series])
        style = "-" if vid == "all" else "--"
        ax.plot(x, mean, style, label=f"view {vid}")
        ax.fill_between(x, mean - std, mean + std, alpha=0.15)
    if threshold is not None:
        ax.axhline(threshold, color="grey", linewidth=0.8, linestyle=":")
    ax.set_xlabel("environment samples")
    ax.set_ylabel("return")
    ax.set_title(title)
    if views:
        ax.legend(loc="best", fontsize="small")
    return _save(fig, output_path)


def plot_losses(output_path: Path, records: Sequence[LossRecord]) -> Path:
    """One panel per loss, summed over views (the ``all`` rows)."""
    names = sorted({r.loss_name for r in records})
    fig, axes = plt.subplots(len(names) or 1, 1, figsize=(6, 2.2 * max(1, len(names))), squeeze=False)
    for ax, name in zip(axes[:, 0], names):
        series = [r for r in records if r.loss_name == name and r.view_id == "all"]
        if not series:
            series = [r for r in records if r.loss_name == name]
        ax.plot([r.iteration for r in series], [r.value for r in series])
        ax.set_ylabel(name)
    axes[-1, 0].set_xlabel("training iteration")
    fig.tight_layout()
    return _save(fig, output_path)


def plot_per_dim(output_path: Path, values: Mapping[int, np.ndarray], ylabel: str, title: str) -> Path:
    """Grouped bars of a per-latent-dimension statistic, one group per view."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    count = max(len(values), 1)
    width = 0.8 / count
    for i, (vid, series) in enumerate(sorted(values.items())):
        dims = np.arange(len(series))
        ax.bar(dims + i * width, series, width=width, label=f"view {vid}")
    ax.set_xlabel("latent dimension")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if values:
        ax.legend(loc="best", fontsize="small")
    return _save(fig, output_path)


_ANALYSIS_WRITERS: Dict[str, Callable[[Path, KeyElementReport], Path]] = {
    "logvar": _write_logvar,
    "distance": _write_distance,
    "saliency": _write_saliency,
    "key_elements": _write_key_elements,
}


def generate_analysis_report(output_dir: Path, report: KeyElementReport) -> Dict[str, Path]:
    """
    Writes the key-element tables and their plots into ``output_dir``.

    Returns:
        A mapping of artifact name to written path.
    """
    output_dir.mkdir(parents=True, exist_ok=True)
    logging.info(f"Generating analysis report for {len(report.logvar)} view(s) in {output_dir}...")
    written = {name: writer(output_dir, report) for name, writer in _ANALYSIS_WRITERS.items()}
    written["logvar_plot"] = plot_per_dim(output_dir / "logvar.svg", report.logvar,
                                          "mean posterior log-variance", "Posterior log-variance per dimension")
    written["distance_plot"] = plot_per_dim(output_dir / "distance.svg", report.distance,
                                            "|mean(view) - mean(reference)|", "Cross-view latent distance")
    written["weight_plot"] = plot_per_dim(output_dir / "decoder_weight.svg", report.decoder_weight,
                                          "sum |W|", "Decoder first-layer weights")
    written["gradient_plot"] = plot_per_dim(output_dir / "decoder_gradient.svg", report.decoder_gradient,
                                            "mean |d output / d s|", "Decoder input gradients")
    logging.info(f"Key set across views: {sorted(report.key_set)}")
    return written
