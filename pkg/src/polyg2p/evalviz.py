"""Cross-validation orchestration, accuracy reports, attention-map cropping,
and PCA projection of encoder features, plus the TSV writers behind them."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import FoldAssignment

log = logging.getLogger(__name__)

METHODS = ("baseline", "bert+fc", "bert+lstm", "bert+transformer")


class EvalError(ValueError):
    pass


@dataclass
class AccuracyReport:
    per_fold: list[float]
    per_char: dict[str, tuple[int, int]]   # char -> (correct, total)
    overall: float
    mean: float
    stddev: float

    @classmethod
    def from_fold_results(cls, fold_results) -> "AccuracyReport":
        """fold_results: per fold, a list of (char, correct?) pairs."""
        per_fold = []
        per_char: dict[str, list[int]] = {}
        for results in fold_results:
            if not results:
                raise EvalError("empty fold result")
            per_fold.append(sum(ok for _, ok in results) / len(results))
            for char, ok in results:
                agg = per_char.setdefault(char, [0, 0])
                agg[0] += int(ok)
                agg[1] += 1
        total_correct = sum(c for c, _ in per_char.values())
        total = sum(t for _, t in per_char.values())
        return cls(per_fold=per_fold,
                   per_char={ch: (c, t) for ch, (c, t) in sorted(per_char.items())},
                   overall=total_correct / total,
                   mean=float(np.mean(per_fold)),
                   stddev=float(np.std(per_fold)))


def accuracy(predictions, gold) -> float:
    """Exact-match accuracy over aligned prediction/gold lists."""
    predictions, gold = list(predictions), list(gold)
    if len(predictions) != len(gold):
        raise EvalError(f"length mismatch: {len(predictions)} predictions, {len(gold)} gold")
    if not gold:
        raise EvalError("empty evaluation set")
    return sum(p == g for p, g in zip(predictions, gold)) / len(gold)


def fold_rotations(folds: FoldAssignment):
    """(fold, train, dev, test) index sets: test = fold, dev = next fold,
    train = the rest."""
    if folds.k < 3:
        raise EvalError(f"need k >= 3 folds for train/dev/test rotations, got {folds.k}")
    rotations = []
    for f in range(folds.k):
        dev_fold = (f + 1) % folds.k
        test_idx = folds.indices(f)
        dev_idx = folds.indices(dev_fold)
        train_idx = np.nonzero((folds.assignment != f)
                               & (folds.assignment != dev_fold))[0]
        assert not (set(train_idx) & set(test_idx)), "train/test folds overlap"
        assert not (set(train_idx) & set(dev_idx)), "train/dev folds overlap"
        assert not (set(dev_idx) & set(test_idx)), "dev/test folds overlap"
        rotations.append((f, train_idx, dev_idx, test_idx))
    return rotations


def cross_validate(factory, samples, folds: FoldAssignment,
                   fold_hook=None) -> AccuracyReport:
    """Rotate train/dev/test over the folds and aggregate accuracy.

    ``samples`` are (sentence, position, char, label) tuples aligned with the
    fold assignment.  ``factory(train, dev, fold)`` returns a predictor
    ``fn(sentence, position, char) -> label``.  ``fold_hook(fold, predictor,
    test)`` runs after each fold's evaluation, e.g. to collect attention.
    """
    samples = list(samples)
    if len(samples) != len(folds.assignment):
        raise EvalError(f"{len(samples)} samples but {len(folds.assignment)} fold entries")
    fold_results = []
    for f, train_idx, dev_idx, test_idx in fold_rotations(folds):
        train = [samples[i] for i in train_idx]
        dev = [samples[i] for i in dev_idx]
        test = [samples[i] for i in test_idx]
        predictor = factory(train, dev, f)
        results = [(char, predictor(sentence, pos, char) == label)
                   for sentence, pos, char, label in test]
        fold_results.append(results)
        log.info("fold %d: accuracy %.4f", f, sum(ok for _, ok in results) / len(results))
        if fold_hook is not None:
            fold_hook(f, predictor, test)
    return AccuracyReport.from_fold_results(fold_results)


@dataclass
class CroppedAttentionMap:
    """Mean attention around the polyphone; the center cell is the polyphone
    attending to itself.  Out-of-bounds cells contribute zero and are tallied
    in ``masked_counts``."""

    weights: np.ndarray          # (2s+1, 2s+1)
    context: int
    n_instances: int
    masked_counts: np.ndarray    # (2s+1, 2s+1) ints

    def __post_init__(self):
        size = 2 * self.context + 1
        if self.weights.shape != (size, size):
            raise EvalError(f"attention crop must be {size}x{size}, got {self.weights.shape}")


def crop_attention(weights: np.ndarray, center: int, s: int):
    """Crop (length, length) attention to (2s+1, 2s+1) around ``center``,
    zero-padded outside the sequence; also returns the out-of-bounds mask."""
    length = weights.shape[0]
    size = 2 * s + 1
    out = np.zeros((size, size))
    masked = np.ones((size, size), dtype=bool)
    for r in range(size):
        for c in range(size):
            i, j = center - s + r, center - s + c
            if 0 <= i < length and 0 <= j < length:
                out[r, c] = weights[i, j]
                masked[r, c] = False
    return out, masked


def extract_attention(attention_provider, instances, s: int) -> CroppedAttentionMap:
    """Average cropped per-head attention over instances.

    ``attention_provider(sentence, position)`` returns (heads, length,
    length) weights and the row/column index of the polyphone within them.
    Heads are averaged first, then instances.
    """
    if s < 1:
        raise EvalError("context size must be >= 1")
    size = 2 * s + 1
    total = np.zeros((size, size))
    masked_counts = np.zeros((size, size), dtype=np.int64)
    n = 0
    for sentence, position in instances:
        weights, center = attention_provider(sentence, position)
        head_mean = weights.mean(axis=0)
        cropped, masked = crop_attention(head_mean, center, s)
        total += cropped
        masked_counts += masked
        n += 1
    if n == 0:
        raise EvalError("no instances to extract attention from")
    return CroppedAttentionMap(total / n, s, n, masked_counts)


def attention_offset_profile(attention_map: CroppedAttentionMap) -> list[tuple[int, float]]:
    """(offset, weight) pairs from the center row: how much the polyphone
    attends to each relative position."""
    s = attention_map.context
    row = attention_map.weights[s]
    return [(offset, float(row[s + offset])) for offset in range(-s, s + 1)]


def _ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    ranks[order] = np.arange(1, len(values) + 1)
    # average ranks over ties
    for v in np.unique(values):
        mask = values == v
        if mask.sum() > 1:
            ranks[mask] = ranks[mask].mean()
    return ranks


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) != len(y) or len(x) < 2:
        raise EvalError("need two aligned sequences of length >= 2")
    rx, ry = _ranks(x), _ranks(y)
    sx, sy = rx.std(), ry.std()
    if sx == 0 or sy == 0:
        return 0.0
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))


def attention_locality(attention_map: CroppedAttentionMap) -> float:
    """Rank correlation between |offset| and the polyphone's attention weight;
    negative values mean closer context gets more attention."""
    profile = attention_offset_profile(attention_map)
    offsets = [abs(off) for off, _ in profile if off != 0]
    weights = [w for off, w in profile if off != 0]
    return spearman(offsets, weights)


def pca_project(features: np.ndarray, dims: int = 2):
    """Mean-centered projection onto the top principal components.

    Returns (coordinates (n, dims), explained-variance ratios (dims,)).
    Components are ordered by eigenvalue; each is signed so its
    largest-magnitude entry is positive.
    """
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[0] < 2:
        raise EvalError(f"need at least 2 feature rows, got {features.shape}")
    n, d = features.shape
    dims = min(dims, d)
    centered = features - features.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:dims]
    components = eigvecs[:, order]
    for k in range(components.shape[1]):
        pivot = np.argmax(np.abs(components[:, k]))
        if components[pivot, k] < 0:
            components[:, k] = -components[:, k]
    coords = centered @ components
    total = eigvals.sum()
    ratios = (eigvals[order] / total) if total > 0 else np.zeros(dims)
    return coords, ratios


# ---- plot-data serialization ------------------------------------------------

def format_attention_tsv(attention_map: CroppedAttentionMap) -> str:
    s = attention_map.context
    lines = [f"# mean attention cropped to +-{s} around the polyphone "
             f"(center row/col {s}), {attention_map.n_instances} instances"]
    for row in attention_map.weights:
        lines.append("\t".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"


def format_pca_tsv(labels, coords) -> str:
    lines = ["label\tx\ty"]
    for label, (x, y) in zip(labels, coords):
        lines.append(f"{label}\t{x:.6f}\t{y:.6f}")
    return "\n".join(lines) + "\n"


def format_accuracy_tsv(reports: dict[str, AccuracyReport]) -> str:
    lines = ["method\tfold\taccuracy"]
    for method in sorted(reports):
        report = reports[method]
        for fold, acc in enumerate(report.per_fold):
            lines.append(f"{method}\t{fold}\t{acc:.6f}")
        lines.append(f"{method}\tmean\t{report.mean:.6f}")
    return "\n".join(lines) + "\n"


def format_locality_tsv(stats: dict[str, float]) -> str:
    lines = ["statistic\tvalue"]
    for name in sorted(stats):
        lines.append(f"{name}\t{stats[name]:.6f}")
    return "\n".join(lines) + "\n"
