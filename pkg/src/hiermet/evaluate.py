"""Boundary and downbeat metrics, plus corpus-level report aggregation.

The evaluation protocol mirrors the two-stage decoding split: levels 1..4
are scored on the full tatum-rate decode, while hypermetrical levels (5 and
up) are scored after subsampling the predicted distributions at ground-truth
downbeats and decoding the remaining layers at measure rate.  All matching
is exact-position; inputs are tatum-quantized already, so a timing tolerance
window would only blur the comparison.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from hiermet.calibrate import Calibration, apply_offset
from hiermet.core import CrfParams, LevelSequence, as_prob_matrix
from hiermet.crf import (
    build_transition_table,
    subsample_to_measure_level,
    viterbi_decode,
)
from hiermet.model import EmissionModel, predict

BEAT_LEVEL = 2
DOWNBEAT_LEVEL = 4
PEAK_THRESHOLD = 0.25


def peak_pick_downbeats(p, beat_positions, threshold: float = PEAK_THRESHOLD) -> np.ndarray:
    """Downbeat flags per beat via measure-boundary mass peak picking.

    Beat ``b`` is flagged iff its P(level >= 4) attains the maximum over the
    four-beat window ``{b-2 .. b+1}`` and exceeds ``threshold``.
    """
    mat = as_prob_matrix(p)
    if mat.shape[1] - 1 < DOWNBEAT_LEVEL:
        raise ValueError(
            f"need at least {DOWNBEAT_LEVEL} layers for downbeat mass, "
            f"got {mat.shape[1] - 1}"
        )
    pos = np.asarray(beat_positions, dtype=np.int64)
    if pos.ndim != 1:
        raise ValueError(f"beat positions must be one-dimensional, got {pos.shape}")
    if pos.size == 0:
        return np.zeros(0, dtype=bool)
    if pos.min() < 0 or pos.max() >= mat.shape[0]:
        raise ValueError(
            f"beat positions must lie in 0..{mat.shape[0] - 1}, got range "
            f"{pos.min()}..{pos.max()}"
        )
    values = mat[pos, DOWNBEAT_LEVEL:].sum(axis=1)
    padded = np.concatenate([[-np.inf, -np.inf], values, [-np.inf]])
    windows = np.lib.stride_tricks.sliding_window_view(padded, 4)
    return (values >= windows.max(axis=1)) & (values > threshold)


def _set_f1(pred_set: np.ndarray, truth_set: np.ndarray) -> tuple[float, float, float]:
    if pred_set.size == 0 and truth_set.size == 0:
        return 1.0, 1.0, 1.0
    tp = np.intersect1d(pred_set, truth_set).size
    precision = tp / pred_set.size if pred_set.size else 0.0
    recall = tp / truth_set.size if truth_set.size else 0.0
    if precision + recall == 0.0:
        return precision, recall, 0.0
    return precision, recall, 2.0 * precision * recall / (precision + recall)


def boundary_f1(
    pred: LevelSequence, truth: LevelSequence, level: int
) -> tuple[float, float, float]:
    """(precision, recall, f1) of level-``level`` boundary positions.

    A position counts as a boundary iff its level is >= ``level``; matching
    is exact.  Empty-vs-empty scores 1.0, empty-vs-nonempty 0.0.
    """
    if len(pred) != len(truth):
        raise ValueError(
            f"prediction length {len(pred)} does not match truth {len(truth)}"
        )
    return _set_f1(pred.boundaries(level), truth.boundaries(level))


def downbeat_f1(flags_pred, flags_truth) -> float:
    """F1 of the positive (downbeat) class; 1.0 when both sides are empty."""
    pred = np.asarray(flags_pred, dtype=bool)
    truth = np.asarray(flags_truth, dtype=bool)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError(
            f"flag shapes must match, got {pred.shape} and {truth.shape}"
        )
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


@dataclass(frozen=True)
class EvalReport:
    """Mean/std F1 per level plus the beat-level downbeat task."""

    per_level_f1: dict[int, tuple[float, float]]
    downbeat_f1: tuple[float, float]
    num_songs: int
    num_skipped: int = 0

    def __post_init__(self) -> None:
        values = [m for m, _ in self.per_level_f1.values()]
        values.append(self.downbeat_f1[0])
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("mean F1 values must lie in [0, 1]")


def _mean_std(scores: list[float]) -> tuple[float, float]:
    if not scores:
        return 0.0, 0.0
    arr = np.asarray(scores, dtype=np.float64)
    # population standard deviation (ddof=0)
    return float(arr.mean()), float(arr.std())


def hyper_crf_params(params: CrfParams) -> CrfParams:
    """Penalty weights for the measure-rate CRF over layers 5..L."""
    if params.num_layers < 5:
        raise ValueError(
            f"hypermetrical decoding needs more than 4 layers, got {params.num_layers}"
        )
    return CrfParams(
        num_layers=params.num_layers - 4,
        w_del=params.w_del[4:],
        w_ins=params.w_ins[4:],
    )


def _score_song(model, song, truth, table, hyper_table, offset, peak_threshold):
    """Per-song metrics: ({level: f1}, downbeat f1 or None)."""
    num_layers = table.num_layers
    if truth.num_layers < num_layers:
        raise ValueError(
            f"ground truth has {truth.num_layers} layers, need {num_layers}"
        )
    assert all(
        np.isin(truth.boundaries(lv + 1), truth.boundaries(lv)).all()
        for lv in range(1, truth.num_layers)
    ), "ground-truth boundary sets must nest"
    p = predict(model, song)
    steps = p.shape[0]
    if len(truth) != steps:
        raise ValueError(
            f"ground truth length {len(truth)} does not match song {steps}"
        )
    level_scores: dict[int, float] = {}
    pred_full = apply_offset(viterbi_decode(table, p), offset)
    for level in range(1, min(DOWNBEAT_LEVEL, num_layers) + 1):
        level_scores[level] = boundary_f1(pred_full, truth, level)[2]

    downbeat_score = None
    if num_layers >= DOWNBEAT_LEVEL:
        beats = truth.boundaries(BEAT_LEVEL)
        beats = beats[(beats - offset >= 0) & (beats - offset < steps)]
        if beats.size:
            flags_pred = peak_pick_downbeats(p, beats - offset, peak_threshold)
            flags_truth = truth.levels[beats] >= DOWNBEAT_LEVEL
            downbeat_score = downbeat_f1(flags_pred, flags_truth)

    if num_layers >= 5:
        downbeats = truth.boundaries(DOWNBEAT_LEVEL)
        keep = (downbeats - offset >= 0) & (downbeats - offset < steps)
        downbeats = downbeats[keep]
        if downbeats.size:
            hyper_p = subsample_to_measure_level(p, downbeats - offset)
            hyper_pred = viterbi_decode(hyper_table, hyper_p)
            hyper_truth = LevelSequence(
                np.maximum(truth.levels[downbeats] - DOWNBEAT_LEVEL, 0),
                truth.num_layers - DOWNBEAT_LEVEL,
            )
            for level in range(5, num_layers + 1):
                score = boundary_f1(hyper_pred, hyper_truth, level - DOWNBEAT_LEVEL)
                level_scores[level] = score[2]
    return level_scores, downbeat_score


def evaluate_corpus(
    model: EmissionModel,
    calibration: Calibration | None,
    corpus,
    params: CrfParams,
    peak_threshold: float = PEAK_THRESHOLD,
    threads: int = 1,
) -> EvalReport:
    """Score a corpus of ``(PianoRoll, LevelSequence | None)`` pairs.

    Songs without ground truth are skipped and counted.  Per song: predict,
    Viterbi-decode, apply the calibration offset, then score levels 1..4 at
    tatum rate and levels 5..L at measure rate on ground-truth downbeats.
    The downbeat task peak-picks measure mass at ground-truth beats.
    Aggregation uses the population standard deviation and corpus order, so
    the report is identical for any ``threads`` value.
    """
    if threads < 1:
        raise ValueError(f"threads must be positive, got {threads}")
    num_layers = params.num_layers
    table = build_transition_table(params)
    hyper_table = (
        build_transition_table(hyper_crf_params(params)) if num_layers >= 5 else None
    )
    offset = calibration.offset if calibration is not None else 0
    annotated = [(song, truth) for song, truth in corpus if truth is not None]
    skipped = sum(1 for _, truth in corpus if truth is None)
    if not annotated:
        raise ValueError("corpus contains no songs with ground truth")

    def score(pair):
        song, truth = pair
        return _score_song(
            model, song, truth, table, hyper_table, offset, peak_threshold
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(score, annotated))
    else:
        results = [score(pair) for pair in annotated]

    per_level: dict[int, list[float]] = {lv: [] for lv in range(1, num_layers + 1)}
    downbeat_scores: list[float] = []
    for level_scores, downbeat_score in results:
        for lv, value in level_scores.items():
            per_level[lv].append(value)
        if downbeat_score is not None:
            downbeat_scores.append(downbeat_score)
    return EvalReport(
        per_level_f1={lv: _mean_std(scores) for lv, scores in per_level.items()},
        downbeat_f1=_mean_std(downbeat_scores),
        num_songs=len(annotated),
        num_skipped=skipped,
    )


def report_json(report: EvalReport) -> dict:
    """Report as a JSON-ready mapping with string level keys."""
    return {
        "per_level": {
            str(lv): {"mean": mean, "std": std}
            for lv, (mean, std) in sorted(report.per_level_f1.items())
        },
        "downbeat": {"mean": report.downbeat_f1[0], "std": report.downbeat_f1[1]},
        "num_songs": report.num_songs,
    }


def report_text(report: EvalReport) -> str:
    """Aligned plain-text table of the report."""
    lines = [f"{'metric':<10}  {'mean F1':>8}  {'std':>8}"]
    for lv, (mean, std) in sorted(report.per_level_f1.items()):
        lines.append(f"{f'level {lv}':<10}  {mean:>8.4f}  {std:>8.4f}")
    mean, std = report.downbeat_f1
    lines.append(f"{'downbeat':<10}  {mean:>8.4f}  {std:>8.4f}")
    lines.append("")
    lines.append(f"songs evaluated: {report.num_songs}")
    lines.append(f"songs skipped:   {report.num_skipped}")
    return "\n".join(lines) + "\n"


def report_csv(report: EvalReport) -> str:
    """Delimited rows (metric, mean, std) for downstream tooling."""
    rows = ["metric,mean,std"]
    for lv, (mean, std) in sorted(report.per_level_f1.items()):
        rows.append(f"level_{lv},{mean:.6f},{std:.6f}")
    mean, std = report.downbeat_f1
    rows.append(f"downbeat,{mean:.6f},{std:.6f}")
    return "\n".join(rows) + "\n"
