"""Overlap metrics, hold-out/LOOCV harnesses, parameter sweeps and reports."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .inference import FusionWeights, skullstrip
from .model import PARAM_ALIASES, NetworkConfig
from .staple import staple
from .training import TrainingHyperparams, build_slice_set, train_all
from .volume import DEFAULT_SPACING, LabelVolume, Volume

log = logging.getLogger(__name__)

Dataset = Mapping[str, Tuple[Volume, LabelVolume]]


@dataclass(frozen=True)
class MaskMetrics:
    subject_id: str
    dice: float
    jaccard: float


def _binary(a, b) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(a, Volume) and isinstance(b, Volume) and not a.same_geometry(b):
        raise ValueError("masks do not share geometry")
    x = np.asarray(getattr(a, "data", a)) != 0
    y = np.asarray(getattr(b, "data", b)) != 0
    if x.shape != y.shape:
        raise ValueError(f"mask shapes differ: {x.shape} vs {y.shape}")
    return x, y


def dice(a, b) -> float:
    """2|A∩B| / (|A| + |B|); two empty masks score 1."""
    x, y = _binary(a, b)
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / total


def jaccard(a, b) -> float:
    """|A∩B| / |A∪B|; two empty masks score 1."""
    x, y = _binary(a, b)
    union = int(np.logical_or(x, y).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(x, y).sum()) / union


def mask_metrics(pred, truth, subject_id: str = "") -> MaskMetrics:
    return MaskMetrics(str(subject_id), dice(pred, truth), jaccard(pred, truth))


@dataclass(frozen=True)
class Summary:
    n: int
    mean: float
    std: float
    min: float
    max: float
    median: float


def summarize(metrics: Sequence[MaskMetrics]) -> Dict[str, Summary]:
    """Mean, population std (ddof=0), min, max and median of dice and jaccard."""
    if not metrics:
        raise ValueError("cannot summarize an empty metric list")
    out = {}
    for name in ("dice", "jaccard"):
        v = np.array([getattr(m, name) for m in metrics], dtype=np.float64)
        out[name] = Summary(len(v), float(v.mean()), float(v.std()), float(v.min()), float(v.max()),
                            float(np.median(v)))
    return out


# -- harnesses ---------------------------------------------------------------

@dataclass
class EvaluationResult:
    metrics: List[MaskMetrics]
    failed: Dict[str, str] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return not self.failed

    @property
    def summary(self) -> Optional[Dict[str, Summary]]:
        return summarize(self.metrics) if self.metrics else None


def holdout(
    dataset: Dataset,
    train_ids: Sequence[str],
    val_ids: Sequence[str],
    test_ids: Sequence[str],
    config: NetworkConfig,
    hyper: TrainingHyperparams,
    target_shape=(256, 256, 256),
    target_spacing=DEFAULT_SPACING,
    weights: Optional[FusionWeights] = None,
    out_dir=None,
    device="cpu",
) -> List[MaskMetrics]:
    """Train a bundle on ``train_ids``/``val_ids`` and score every test subject."""
    for a, b, what in ((train_ids, val_ids, "train/val"), (train_ids, test_ids, "train/test"),
                       (val_ids, test_ids, "val/test")):
        overlap = set(a) & set(b)
        if overlap:
            raise ValueError(f"{what} splits overlap: {sorted(overlap)}")
    train = build_slice_set({s: dataset[s] for s in train_ids}, target_shape, target_spacing)
    val = build_slice_set({s: dataset[s] for s in val_ids}, target_shape, target_spacing)
    bundle = train_all(train, val, config, hyper, out_dir=out_dir, target_shape=target_shape,
                       target_spacing=target_spacing, weights=weights, device=device)
    rows = []
    for sid in test_ids:
        image, truth = dataset[sid]
        mask, _ = skullstrip(bundle, image, device=device)
        rows.append(mask_metrics(mask, truth, sid))
        log.info("%s dice %.4f", sid, rows[-1].dice)
    return rows


def loocv(
    dataset: Dataset,
    config: NetworkConfig,
    hyper: TrainingHyperparams,
    n_val: Optional[int] = None,
    target_shape=(256, 256, 256),
    target_spacing=DEFAULT_SPACING,
    weights: Optional[FusionWeights] = None,
    out_dir=None,
    device="cpu",
) -> EvaluationResult:
    """Leave-one-out cross-validation.

    For fold ``i`` the ``n_val`` subjects following subject ``i`` (cyclically)
    form the validation set and the rest train. A fold that raises is
    recorded in ``failed`` and the run continues.
    """
    ids = list(dataset)
    if len(ids) < 3:
        raise ValueError(f"LOOCV needs at least 3 subjects, got {len(ids)}")
    if n_val is None:
        n_val = max(1, round(0.12 * (len(ids) - 1)))
    n_val = min(n_val, len(ids) - 2)
    out_dir = os.fspath(out_dir) if out_dir else tempfile.mkdtemp(prefix="mvstrip-loocv-")
    result = EvaluationResult([])
    for i, test_id in enumerate(ids):
        rest = ids[i + 1:] + ids[:i]
        val_ids, train_ids = rest[:n_val], rest[n_val:]
        try:
            result.metrics += holdout(dataset, train_ids, val_ids, [test_id], config, hyper, target_shape,
                                      target_spacing, weights, os.path.join(out_dir, test_id), device)
        except Exception as exc:
            log.error("fold %s failed: %s", test_id, exc)
            result.failed[test_id] = f"{type(exc).__name__}: {exc}"
    return result


@dataclass(frozen=True)
class SweepSpec:
    """Vary one network hyperparameter with the rest fixed at ``base``."""

    parameter: str
    values: Tuple
    base: NetworkConfig
    train_ids: Tuple[str, ...]
    val_ids: Tuple[str, ...]
    test_ids: Tuple[str, ...]

    def __post_init__(self):
        name = PARAM_ALIASES.get(self.parameter, self.parameter)
        if name not in PARAM_ALIASES.values():
            raise ValueError(f"sweep parameter must be one of {sorted(PARAM_ALIASES)}, got {self.parameter!r}")
        object.__setattr__(self, "parameter", name)
        if not self.values:
            raise ValueError("sweep needs at least one value")
        splits = [set(self.train_ids), set(self.val_ids), set(self.test_ids)]
        if not all(splits):
            raise ValueError("train, validation and test splits must all be nonempty")
        if sum(len(s) for s in splits) != len(set().union(*splits)):
            raise ValueError("sweep splits must be disjoint")

    def configs(self) -> List[NetworkConfig]:
        return [dataclasses.replace(self.base, **{self.parameter: v}) for v in self.values]


@dataclass
class SweepRow:
    value: object
    metrics: List[MaskMetrics]

    @property
    def box(self) -> Dict[str, float]:
        """Five-number summary of the Dice scores."""
        d = np.array([m.dice for m in self.metrics])
        q = np.percentile(d, [0, 25, 50, 75, 100])
        return dict(zip(("min", "q1", "median", "q3", "max"), (float(x) for x in q)))


def sweep(
    spec: SweepSpec,
    dataset: Dataset,
    hyper: TrainingHyperparams,
    target_shape=(256, 256, 256),
    target_spacing=DEFAULT_SPACING,
    weights: Optional[FusionWeights] = None,
    out_dir=None,
    device="cpu",
) -> List[SweepRow]:
    """One hold-out run per value of the swept parameter, all with ``hyper.seed``."""
    out_dir = os.fspath(out_dir) if out_dir else tempfile.mkdtemp(prefix="mvstrip-sweep-")
    rows = []
    for value, config in zip(spec.values, spec.configs()):
        metrics = holdout(dataset, spec.train_ids, spec.val_ids, spec.test_ids, config, hyper, target_shape,
                          target_spacing, weights, os.path.join(out_dir, f"{spec.parameter}={value}"), device)
        rows.append(SweepRow(value, metrics))
    return rows


def compare_to_consensus(candidate, others: Sequence, include_candidate: bool = True, **staple_kw) -> MaskMetrics:
    """Score ``candidate`` against the STAPLE consensus (posterior > 0.5).

    By default the candidate is itself one of the raters; pass
    ``include_candidate=False`` to build the consensus from ``others`` only.
    """
    raters = ([candidate] if include_candidate else []) + list(others)
    result = staple(raters, **staple_kw)
    return mask_metrics(candidate, result.consensus(), "consensus")


# -- reports -----------------------------------------------------------------

def write_metrics_table(metrics: Sequence[MaskMetrics], path, failed: Optional[Mapping[str, str]] = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["subject_id", "dice", "jaccard"])
        for m in metrics:
            w.writerow([m.subject_id, f"{m.dice:.6f}", f"{m.jaccard:.6f}"])
        for sid in failed or {}:
            w.writerow([sid, "failed", "failed"])


def write_summary(summary: Optional[Mapping[str, Summary]], path, **extra) -> None:
    payload = {k: dataclasses.asdict(v) for k, v in (summary or {}).items()}
    payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def write_sweep_tables(rows: Sequence[SweepRow], parameter: str, out_dir) -> Tuple[str, str]:
    """Write the per-value summary table and long-format boxplot data."""
    table = os.path.join(out_dir, "sweep_summary.tsv")
    box = os.path.join(out_dir, "sweep_boxplot.tsv")
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow([parameter, "n", "min", "q1", "median", "q3", "max", "mean"])
        for row in rows:
            b = row.box
            w.writerow([row.value, len(row.metrics)] + [f"{b[k]:.6f}" for k in ("min", "q1", "median", "q3", "max")]
                       + [f"{np.mean([m.dice for m in row.metrics]):.6f}"])
    with open(box, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow([parameter, "subject_id", "dice"])
        for row in rows:
            for m in row.metrics:
                w.writerow([row.value, m.subject_id, f"{m.dice:.6f}"])
    return table, box


def plot_sweep(rows: Sequence[SweepRow], parameter: str, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.boxplot([[m.dice for m in r.metrics] for r in rows])
    ax.set_xticks(range(1, len(rows) + 1), [str(r.value) for r in rows])
    ax.set_xlabel(parameter)
    ax.set_ylabel("Dice")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
