"""End-to-end orchestration: data in, metrics and checkpoints out.

Ties the preprocessing, training, metrics and storage modules together
for the CLI. Every artifact written here is deterministic for a given
run config: filenames are fixed, floats are serialized with ``repr``
precision, and nothing embeds a timestamp, so re-running an experiment
reproduces every output byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import json

import numpy as np

from . import metrics as metrics_mod
from . import storage
from .errors import ConfigError, InputError
from .model import MixerConfig, forward_batch, predict_batches
from .preprocess import (
    HsiCube,
    LabelMap,
    PatchSet,
    PcaModel,
    extract_patches,
    normalize,
    pca_fit,
    pca_transform,
    stratified_split,
)
from .runconfig import RunConfig
from .storage import Checkpoint, atomic_write_text
from .train import TrainResult, train_loop


@dataclass
class PreparedData:
    cube: HsiCube
    label_map: LabelMap
    pca: PcaModel
    scores: np.ndarray  # normalized (H, W, C)
    patches: PatchSet


def prepare(run_cfg: RunConfig, pca: Optional[PcaModel] = None,
            patch_size: Optional[int] = None) -> PreparedData:
    """Load the dataset and build the patch set.

    ``pca`` and ``patch_size`` default to the run config; evaluation of
    an existing checkpoint passes the stored PCA model and patch size so
    the features match the ones the model was trained on.
    """
    if run_cfg.cube is None or run_cfg.labels is None:
        raise ConfigError("run config needs both 'cube' and 'labels' paths")
    cube = storage.load_cube(run_cfg.cube)
    label_map = storage.load_labels(run_cfg.labels)
    if label_map.labels.shape != (cube.height, cube.width):
        raise InputError(
            f"label grid {label_map.labels.shape} does not match cube "
            f"({cube.height}, {cube.width})"
        )
    if pca is None:
        pca = pca_fit(cube, run_cfg.pca_count)
    scores = normalize(pca_transform(cube, pca))
    patches = extract_patches(scores, label_map, patch_size or run_cfg.patch_size)
    return PreparedData(cube, label_map, pca, scores, patches)


def split_for_run(prepared: PreparedData, run_cfg: RunConfig,
                  run_index: int) -> tuple[PatchSet, PatchSet]:
    return stratified_split(
        prepared.patches,
        run_cfg.train_fraction,
        run_cfg.seed + run_index,
        run_cfg.split_overrides or None,
    )


@dataclass
class RunOutput:
    result: TrainResult
    scores: metrics_mod.ClassificationScores
    confusion: metrics_mod.ConfusionMatrix
    checkpoint_path: Path
    metrics_path: Path


def _format_metrics_lines(scores: metrics_mod.ClassificationScores,
                          result: TrainResult) -> str:
    lines = [
        f"oa={scores.overall_accuracy!r}",
        f"aa={scores.average_accuracy!r}",
        f"kappa={scores.kappa!r}",
    ]
    for idx, value in enumerate(scores.per_class, start=1):
        lines.append(f"class_{idx:02d}={float(value)!r}")
    lines.append(f"epochs={len(result.history)}")
    lines.append(f"best_epoch={result.best_epoch}")
    lines.append(f"best_val_loss={result.best_val_loss!r}")
    lines.append(f"steps={result.total_steps}")
    lines.append(f"stopped_early={result.stopped_early}")
    return "\n".join(lines) + "\n"


def _format_confusion(cm: metrics_mod.ConfusionMatrix) -> str:
    width = max(len(str(int(cm.counts.max()))), 5)
    lines = []
    for row in cm.counts:
        lines.append(" ".join(f"{int(v):>{width}}" for v in row))
    return "\n".join(lines) + "\n"


def execute_run(prepared: PreparedData, run_cfg: RunConfig, run_index: int,
                run_dir: Path) -> RunOutput:
    """One seeded repetition: split, train, score the test split, persist."""
    train_set, test_set = split_for_run(prepared, run_cfg, run_index)
    model_config = run_cfg.mixer_config(prepared.label_map.num_classes)
    train_config = run_cfg.train_config(run_index)
    result = train_loop(train_set, model_config, train_config)

    predicted = predict_batches(test_set.patches, result.params, result.bn_state, model_config)
    cm = metrics_mod.confusion(test_set.labels, predicted, model_config.num_classes)
    run_scores = metrics_mod.scores(cm)

    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / "metrics.txt"
    atomic_write_text(metrics_path, _format_metrics_lines(run_scores, result))
    atomic_write_text(run_dir / "confusion.txt", _format_confusion(cm))
    history_lines = "".join(
        json.dumps(record.to_dict(), sort_keys=True) + "\n" for record in result.history
    )
    atomic_write_text(run_dir / "history.jsonl", history_lines)

    checkpoint_path = run_dir / "model.ckpt"
    storage.save_checkpoint(
        Checkpoint(
            model_config=model_config,
            params=result.params,
            bn_state=result.bn_state,
            pca=prepared.pca,
            train_config=train_config,
            history_summary={
                "epochs": len(result.history),
                "best_epoch": result.best_epoch,
                "best_val_loss": result.best_val_loss,
                "stopped_early": result.stopped_early,
                "total_steps": result.total_steps,
            },
        ),
        checkpoint_path,
    )
    return RunOutput(result, run_scores, cm, checkpoint_path, metrics_path)


@dataclass
class TrainingSummary:
    report: metrics_mod.MetricsReport
    outputs: list
    summary_path: Path


def _format_summary(report: metrics_mod.MetricsReport, run_cfg: RunConfig) -> str:
    fmt = metrics_mod.format_mean_std
    lines = [
        f"runs={len(report.runs)}",
        f"seed={run_cfg.seed}",
        f"oa={fmt(report.oa_mean, report.oa_std)}",
        f"aa={fmt(report.aa_mean, report.aa_std)}",
        f"kappa={fmt(report.kappa_mean, report.kappa_std)}",
    ]
    for idx in range(report.per_class_mean.shape[0]):
        lines.append(
            f"class_{idx + 1:02d}={fmt(float(report.per_class_mean[idx]), float(report.per_class_std[idx]))}"
        )
    lines.append(f"oa_mean={report.oa_mean!r}")
    lines.append(f"oa_std={report.oa_std!r}")
    lines.append(f"aa_mean={report.aa_mean!r}")
    lines.append(f"aa_std={report.aa_std!r}")
    lines.append(f"kappa_mean={report.kappa_mean!r}")
    lines.append(f"kappa_std={report.kappa_std!r}")
    return "\n".join(lines) + "\n"


def run_training(run_cfg: RunConfig) -> TrainingSummary:
    """Run ``runs`` seeded repetitions and write per-run plus summary artifacts."""
    prepared = prepare(run_cfg)
    out_dir = Path(run_cfg.out_dir)
    outputs = []
    for run_index in range(run_cfg.runs):
        run_dir = out_dir / f"run_{run_index + 1:02d}"
        outputs.append(execute_run(prepared, run_cfg, run_index, run_dir))
    report = metrics_mod.MetricsReport.from_runs([o.scores for o in outputs])
    summary_path = out_dir / "summary.txt"
    atomic_write_text(summary_path, _format_summary(report, run_cfg))
    return TrainingSummary(report, outputs, summary_path)


def evaluate_checkpoint(run_cfg: RunConfig, checkpoint_path) -> tuple[
        metrics_mod.ClassificationScores, metrics_mod.ConfusionMatrix]:
    """Score a stored model on the test side of its own split.

    The checkpoint's PCA model, patch size and training seed rebuild the
    exact features and train/test partition of the run that produced it.
    """
    ckpt = storage.load_checkpoint(checkpoint_path)
    prepared = prepare(run_cfg, pca=ckpt.pca, patch_size=ckpt.model_config.patch_size)
    if prepared.label_map.num_classes != ckpt.model_config.num_classes:
        raise InputError(
            f"label file has {prepared.label_map.num_classes} classes, checkpoint "
            f"expects {ckpt.model_config.num_classes}"
        )
    seed = ckpt.train_config.seed if ckpt.train_config is not None else run_cfg.seed
    _, test_set = stratified_split(
        prepared.patches, run_cfg.train_fraction, seed, run_cfg.split_overrides or None
    )
    predicted = predict_batches(test_set.patches, ckpt.params, ckpt.bn_state, ckpt.model_config)
    cm = metrics_mod.confusion(test_set.labels, predicted, ckpt.model_config.num_classes)
    return metrics_mod.scores(cm), cm


def predict_grid(scores: np.ndarray, mask: np.ndarray, ckpt: Checkpoint,
                 batch_size: int = 512) -> np.ndarray:
    """Classify every masked pixel of a normalized score map into a label grid.

    Patches are materialized chunk by chunk so a full scene never holds
    all its patches in memory at once. Unmasked positions stay 0.
    """
    config = ckpt.model_config
    s = config.patch_size
    pad = (s - 1) // 2
    padded = np.pad(scores, ((pad, pad), (pad, pad), (0, 0)), mode="reflect") if pad else scores
    coords = np.argwhere(mask)
    grid = np.zeros(mask.shape, dtype=np.int64)
    for start in range(0, coords.shape[0], batch_size):
        chunk = coords[start:start + batch_size]
        patches = np.empty((chunk.shape[0], s, s, scores.shape[2]), dtype=np.float64)
        for i, (r, c) in enumerate(chunk):
            patches[i] = padded[r:r + s, c:c + s, :]
        labels = predict_batches(patches, ckpt.params, ckpt.bn_state, config,
                                 batch_size=batch_size)
        grid[chunk[:, 0], chunk[:, 1]] = labels
    return grid


def predict_map(run_cfg: RunConfig, checkpoint_path, out_dir, full: bool = False,
                image_format: str = "ppm") -> tuple[Path, Path]:
    """Write a rendered classification map and the raw predicted grid.

    ``full`` classifies every pixel; otherwise only labeled pixels are
    classified and the background stays black in the rendering.
    """
    ckpt = storage.load_checkpoint(checkpoint_path)
    prepared_cube = storage.load_cube(run_cfg.cube) if run_cfg.cube else None
    if prepared_cube is None:
        raise ConfigError("predict-map needs a cube path")
    label_map = storage.load_labels(run_cfg.labels) if run_cfg.labels else None
    scores = normalize(pca_transform(prepared_cube, ckpt.pca))
    if full:
        mask = np.ones((prepared_cube.height, prepared_cube.width), dtype=bool)
    else:
        if label_map is None:
            raise ConfigError("predict-map without --full needs a labels path")
        mask = label_map.labels > 0
    grid = predict_grid(scores, mask, ckpt)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if image_format not in ("ppm", "png"):
        raise ConfigError(f"image format must be 'ppm' or 'png', got {image_format!r}")
    image_path = out_dir / f"map.{image_format}"
    palette = storage.class_palette(ckpt.model_config.num_classes)
    storage.render_map(grid, image_path, palette=palette)
    grid_path = out_dir / "prediction.bin"
    storage.save_prediction(grid, ckpt.model_config.num_classes, grid_path)
    return image_path, grid_path
