"""Classification metrics, significance testing, and cost accounting.

The confusion matrix fixes all conventions: rows are ground truth,
columns are predictions, classes are 1-based ids mapped to 0-based
indices. Overall accuracy, per-class accuracy, average accuracy and
Cohen's kappa all derive from it.

Welch's unequal-variance t-test is implemented from scratch, including
the regularized incomplete beta function used for the two-sided
p-value, so the package has no runtime dependency for its statistics.

Cost accounting counts trainable parameters, multiply-accumulate
operations and floating-point operations per layer from shapes alone.
Conventions: a MAC layer (convolution, dense) performs output-elements
times kernel-taps MACs and two FLOPs per MAC; elementwise layers
(activations, additions, normalization, pooling) cost one FLOP per
element and no MACs; bias additions are folded into the MAC count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegenerateSampleError,
    DegenerateStatisticsError,
    InputError,
    ShapeError,
    UndefinedClassError,
)
from .model import MixerConfig

# ---------------------------------------------------------------------------
# Confusion matrix and scores
# ---------------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """Counts ``(L, L)``: entry ``[i, j]`` is true class i+1 predicted as j+1."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got shape {self.counts.shape}")
        if np.any(self.counts < 0):
            raise InputError("confusion matrix counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(true_labels, predicted_labels, num_classes: int) -> ConfusionMatrix:
    """Tally a confusion matrix from two 1-based label vectors."""
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted_labels = np.asarray(predicted_labels, dtype=np.int64)
    if true_labels.shape != predicted_labels.shape or true_labels.ndim != 1:
        raise ShapeError("label vectors must be 1-D and of equal length")
    if true_labels.size == 0:
        raise InputError("cannot tally an empty label vector")
    for name, vec in (("true", true_labels), ("predicted", predicted_labels)):
        if vec.min() < 1 or vec.max() > num_classes:
            raise InputError(f"{name} labels must lie in 1..{num_classes}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true_labels - 1, predicted_labels - 1), 1)
    return ConfusionMatrix(counts)


@dataclass
class ClassificationScores:
    """Metrics computed from one confusion matrix."""

    overall_accuracy: float
    average_accuracy: float
    kappa: float
    per_class: np.ndarray


def scores(cm: ConfusionMatrix) -> ClassificationScores:
    """Overall/average accuracy, per-class accuracy, and Cohen's kappa.

    Every class must have at least one ground-truth sample, otherwise
    its accuracy (and the average) is undefined.
    """
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise UndefinedClassError("metrics are undefined for an empty confusion matrix")
    row_sums = counts.sum(axis=1)
    empty = np.flatnonzero(row_sums == 0)
    if empty.size:
        raise UndefinedClassError(
            f"classes {[int(i) + 1 for i in empty]} have no ground-truth samples"
        )
    diag = np.diag(counts)
    per_class = diag / row_sums
    oa = float(diag.sum() / total)
    aa = float(per_class.mean())
    col_sums = counts.sum(axis=0)
    expected = float((row_sums * col_sums).sum()) / float(total) ** 2
    if expected >= 1.0:
        raise DegenerateStatisticsError("chance agreement is 1; kappa is undefined")
    kappa = (oa - expected) / (1.0 - expected)
    return ClassificationScores(oa, aa, float(kappa), per_class)


@dataclass
class MetricsReport:
    """Scores from repeated runs plus their mean and sample standard deviation."""

    runs: list
    oa_mean: float
    oa_std: float
    aa_mean: float
    aa_std: float
    kappa_mean: float
    kappa_std: float
    per_class_mean: np.ndarray
    per_class_std: np.ndarray

    @classmethod
    def from_runs(cls, runs: Sequence[ClassificationScores]) -> "MetricsReport":
        if not runs:
            raise InputError("cannot aggregate zero runs")
        widths = {r.per_class.shape[0] for r in runs}
        if len(widths) != 1:
            raise ShapeError(f"runs disagree on class count: {sorted(widths)}")
        oa = np.array([r.overall_accuracy for r in runs])
        aa = np.array([r.average_accuracy for r in runs])
        kp = np.array([r.kappa for r in runs])
        pc = np.stack([r.per_class for r in runs])

        def _std(values: np.ndarray, axis=None):
            if len(runs) < 2:
                return np.zeros_like(values.mean(axis=axis))
            return values.std(axis=axis, ddof=1)

        return cls(
            runs=list(runs),
            oa_mean=float(oa.mean()), oa_std=float(_std(oa)),
            aa_mean=float(aa.mean()), aa_std=float(_std(aa)),
            kappa_mean=float(kp.mean()), kappa_std=float(_std(kp)),
            per_class_mean=pc.mean(axis=0), per_class_std=np.atleast_1d(_std(pc, axis=0)),
        )


def format_mean_std(mean: float, std: float, scale: float = 100.0) -> str:
    """Render as the conventional ``97.81±0.42`` percentage pair."""
    return f"{mean * scale:.2f}±{std * scale:.2f}"


# ---------------------------------------------------------------------------
# Welch's t-test
# ---------------------------------------------------------------------------

_BETA_EPS = 1e-16
_BETA_TINY = 1e-300
_BETA_MAX_ITER = 500


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    # Lentz's algorithm for the continued fraction in the incomplete
    # beta expansion; converges quickly when x < (a + 1) / (a + b + 2).
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _BETA_TINY:
        d = _BETA_TINY
    d = 1.0 / d
    result = d
    for m in range(1, _BETA_MAX_ITER + 1):
        m2 = 2 * m
        numerator = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + numerator * d
        if abs(d) < _BETA_TINY:
            d = _BETA_TINY
        c = 1.0 + numerator / c
        if abs(c) < _BETA_TINY:
            c = _BETA_TINY
        d = 1.0 / d
        result *= d * c
        numerator = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + numerator * d
        if abs(d) < _BETA_TINY:
            d = _BETA_TINY
        c = 1.0 + numerator / c
        if abs(c) < _BETA_TINY:
            c = _BETA_TINY
        d = 1.0 / d
        delta = d * c
        result *= delta
        if abs(delta - 1.0) < _BETA_EPS:
            return result
    raise DegenerateStatisticsError(
        f"incomplete beta continued fraction failed to converge for a={a}, b={b}, x={x}"
    )


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """``I_x(a, b)``, accurate to near machine precision.

    Evaluates the continued fraction directly on the side where it
    converges fast and uses the reflection
    ``I_x(a, b) = 1 - I_(1-x)(b, a)`` on the other side.
    """
    if a <= 0.0 or b <= 0.0:
        raise ConfigError(f"beta parameters must be positive, got a={a}, b={b}")
    if not 0.0 <= x <= 1.0:
        raise ConfigError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        a * math.log(x)
        + b * math.log1p(-x)
        + math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


@dataclass
class WelchResult:
    t_statistic: float
    degrees_of_freedom: float
    p_value: float


def welch_t_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> WelchResult:
    """Two-sided unequal-variance t-test for a difference in means.

    The statistic is ``(mean_a - mean_b)`` over the combined standard
    error; degrees of freedom follow the Welch-Satterthwaite estimate;
    the p-value is ``I_x(df / 2, 1 / 2)`` at ``x = df / (df + t^2)``.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError("samples must be 1-D sequences")
    if a.size < 2 or b.size < 2:
        raise DegenerateSampleError(
            f"each sample needs at least 2 values, got {a.size} and {b.size}"
        )
    var_a = a.var(ddof=1)
    var_b = b.var(ddof=1)
    se_a = var_a / a.size
    se_b = var_b / b.size
    pooled = se_a + se_b
    if pooled == 0.0:
        raise DegenerateStatisticsError("both samples have zero variance")
    t = float((a.mean() - b.mean()) / math.sqrt(pooled))
    df = float(pooled ** 2 / (se_a ** 2 / (a.size - 1) + se_b ** 2 / (b.size - 1)))
    x = df / (df + t * t)
    p = regularized_incomplete_beta(df / 2.0, 0.5, x)
    return WelchResult(t, df, min(max(p, 0.0), 1.0))


# ---------------------------------------------------------------------------
# Complexity accounting
# ---------------------------------------------------------------------------

# Totals for the standard configuration (15x15 patches, 15 channels,
# 9 classes, width 64, 4 blocks, reduction 8) quoted for this
# architecture; used as a regression reference by the CLI and tests.
REFERENCE_TOTALS = {"parameters": 59889, "macs": 9318144, "flops": 19145472}
REFERENCE_CONFIG = MixerConfig(patch_size=15, pca_count=15, num_classes=9)


@dataclass
class LayerCost:
    name: str
    parameters: int
    macs: int
    flops: int


@dataclass
class ComplexityReport:
    rows: list

    @property
    def total_parameters(self) -> int:
        return sum(r.parameters for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def to_table(self) -> str:
        width = max(len(r.name) for r in self.rows + [LayerCost("layer", 0, 0, 0)])
        lines = [f"{'layer':<{width}}  {'params':>10}  {'macs':>12}  {'flops':>12}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.parameters:>10}  {r.macs:>12}  {r.flops:>12}")
        lines.append(
            f"{'total':<{width}}  {self.total_parameters:>10}  "
            f"{self.total_macs:>12}  {self.total_flops:>12}"
        )
        return "\n".join(lines)


def count_complexity(config: MixerConfig) -> ComplexityReport:
    """Per-layer cost breakdown for ``config``; totals are the exact row sums."""
    rows: list[LayerCost] = []
    spatial = config.patch_size * config.patch_size
    f1 = config.stem_filters
    f2 = config.mix_filters

    def mac_layer(name: str, out_elements: int, taps: int, params: int):
        macs = out_elements * taps
        rows.append(LayerCost(name, params, macs, 2 * macs))

    def elem_layer(name: str, elements: int, params: int = 0):
        rows.append(LayerCost(name, params, 0, elements))

    mac_layer("stem.conv", spatial * f1, config.pca_count,
              config.pca_count * f1 + f1)
    elem_layer("stem.gelu", spatial * f1)
    elem_layer("stem.bn", spatial * f1, 2 * f1)

    for i in range(1, config.num_blocks + 1):
        for k in config.kernel_sizes:
            mac_layer(f"block{i}.dw{k}", spatial * f1, k * k, k * k * f1 + f1)
        mac_layer(f"block{i}.branch", spatial * f1, f1, f1 * f1 + f1)
        # one addition per element per summand beyond the first
        elem_layer(f"block{i}.aggregate", (len(config.kernel_sizes) + 1) * spatial * f1)
        mac_layer(f"block{i}.mix", spatial * f2, f1, f1 * f2 + f2)
        elem_layer(f"block{i}.residual", spatial * f2)
        elem_layer(f"block{i}.gelu", spatial * f2)
        elem_layer(f"block{i}.bn", spatial * f2, 2 * f2)

    if config.attention == "ca":
        s = config.patch_size
        squeezed = f1 // config.ca_reduction
        elem_layer("ca.pool", 2 * spatial * f1)
        mac_layer("ca.squeeze", 2 * s * squeezed, f1, f1 * squeezed + squeezed)
        elem_layer("ca.relu", 2 * s * squeezed)
        mac_layer("ca.height", s * f1, squeezed, squeezed * f1 + f1)
        mac_layer("ca.width", s * f1, squeezed, squeezed * f1 + f1)
        elem_layer("ca.sigmoid", 2 * s * f1)
        elem_layer("ca.gate", 2 * spatial * f1)

    elem_layer("pool", spatial * f1)
    mac_layer("head.dense", config.num_classes, f1,
              f1 * config.num_classes + config.num_classes)
    elem_layer("head.softmax", config.num_classes)
    return ComplexityReport(rows)
