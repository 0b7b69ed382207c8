"""Global-offset calibration against one annotated song.

Self-supervised training recovers the metrical hierarchy up to a constant
temporal shift.  Calibration decodes one annotated song, scans every integer
offset in [-32, 32], and keeps the one whose shifted boundaries best match
the annotation.  The offset is a single constant per trained model; it is
applied to every later prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hiermet.core import LevelSequence, as_prob_matrix
from hiermet.crf import ParamsOrTable, _as_table, viterbi_decode

MAX_OFFSET = 32

# Every candidate offset must leave a non-empty overlap to score.
MIN_CALIBRATION_STEPS = 2 * MAX_OFFSET + 1


@dataclass(frozen=True)
class Calibration:
    """Offset in tatums (added to prediction indices) and its F1 score."""

    offset: int
    score: float

    def __post_init__(self) -> None:
        if abs(self.offset) > MAX_OFFSET:
            raise ValueError(f"offset must lie in [-{MAX_OFFSET}, {MAX_OFFSET}]")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def _boundary_f1_on_overlap(
    pred: np.ndarray, truth: np.ndarray, offset: int, level: int
) -> float:
    """F1 of level boundaries after shifting pred by offset, scored only on
    the index range where both sequences are defined."""
    steps = pred.shape[0]
    lo = max(0, offset)
    hi = steps + min(0, offset)
    pred_hits = pred[lo - offset : hi - offset] >= level
    truth_hits = truth[lo:hi] >= level
    tp = int(np.sum(pred_hits & truth_hits))
    fp = int(np.sum(pred_hits & ~truth_hits))
    fn = int(np.sum(~pred_hits & truth_hits))
    if tp == 0:
        return 1.0 if fp == 0 and fn == 0 else 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def calibrate_offset(
    pred, truth: LevelSequence, params: ParamsOrTable, max_level: int = 4
) -> Calibration:
    """Best global offset for aligning decoded predictions with ``truth``.

    ``pred`` holds per-tatum level distributions (N, L + 1).  The decoded
    sequence is shifted by every offset in [-32, 32] and scored by boundary
    F1 at ``max_level`` on the overlapping region.  Ties prefer the smaller
    magnitude, then the negative sign.
    """
    table = _as_table(params)
    mat = as_prob_matrix(pred, table.num_layers)
    if len(truth) != mat.shape[0]:
        raise ValueError(
            f"prediction length {mat.shape[0]} does not match truth {len(truth)}"
        )
    if mat.shape[0] < MIN_CALIBRATION_STEPS:
        raise ValueError(
            f"calibration needs at least {MIN_CALIBRATION_STEPS} steps, "
            f"got {mat.shape[0]}"
        )
    if not 1 <= max_level <= table.num_layers:
        raise ValueError(f"max_level must lie in 1..{table.num_layers}")
    decoded = viterbi_decode(table, mat).levels
    truth_levels = truth.levels
    best = None
    for offset in range(-MAX_OFFSET, MAX_OFFSET + 1):
        score = _boundary_f1_on_overlap(decoded, truth_levels, offset, max_level)
        key = (score, -abs(offset), -offset)
        if best is None or key > best[0]:
            best = (key, offset, score)
    return Calibration(offset=best[1], score=float(best[2]))


def apply_offset(levels: LevelSequence, offset: int) -> LevelSequence:
    """Shift a level sequence by ``offset`` tatums, filling vacated positions
    with level 0 (no boundary).  Length is preserved."""
    steps = len(levels)
    if abs(offset) > steps:
        raise ValueError(f"offset {offset} exceeds sequence length {steps}")
    out = np.zeros(steps, dtype=np.int64)
    lo = max(0, offset)
    hi = steps + min(0, offset)
    out[lo:hi] = levels.levels[lo - offset : hi - offset]
    return LevelSequence(levels=out, num_layers=levels.num_layers)
