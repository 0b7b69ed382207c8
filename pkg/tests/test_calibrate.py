"""Global-offset calibration and offset application."""

import numpy as np
import pytest

from hiermet.calibrate import Calibration, apply_offset, calibrate_offset
from hiermet.core import CrfParams, LevelSequence, default_crf_params
from hiermet.crf import viterbi_decode
from hiermet.ingest import ruler_levels


def one_hot(levels, num_layers):
    mat = np.zeros((len(levels), num_layers + 1))
    mat[np.arange(len(levels)), levels] = 1.0
    return mat


PARAMS = default_crf_params(4)


class TestCalibration:
    def test_offset_range_enforced(self):
        with pytest.raises(ValueError):
            Calibration(offset=33, score=1.0)
        with pytest.raises(ValueError):
            Calibration(offset=-40, score=1.0)

    def test_score_range_enforced(self):
        with pytest.raises(ValueError):
            Calibration(offset=0, score=1.5)


class TestCalibrateOffset:
    def test_perfect_prediction_gives_zero_offset(self):
        levels = ruler_levels(4, 128, phase=0)
        truth = LevelSequence(levels, 4)
        cal = calibrate_offset(one_hot(levels, 4), truth, PARAMS)
        assert cal.offset == 0
        assert cal.score == 1.0

    @pytest.mark.parametrize("shift", [1, 3, 7])
    def test_right_shifted_prediction_needs_negative_offset(self, shift):
        levels = ruler_levels(4, 128, phase=0)
        truth = LevelSequence(levels, 4)
        # prediction delayed by `shift`: the offset ADDED to prediction
        # indices that re-aligns it is -shift
        pred = one_hot(np.roll(levels, shift), 4)
        cal = calibrate_offset(pred, truth, PARAMS)
        assert cal.offset == -shift
        assert cal.score == 1.0

    def test_tie_prefers_smaller_magnitude_then_negative(self):
        # period-16 pattern: offsets -3 and +13 both align perfectly, as do
        # -19 and +29; the smallest magnitude must win
        levels = ruler_levels(4, 128, phase=0)
        truth = LevelSequence(levels, 4)
        cal = calibrate_offset(one_hot(np.roll(levels, 3), 4), truth, PARAMS)
        assert cal.offset == -3
        # symmetric shift ties at |8| between -8 and +8: negative wins
        cal = calibrate_offset(one_hot(np.roll(levels, 8), 4), truth, PARAMS)
        assert cal.offset == -8

    def test_matches_independent_exhaustive_scoring(self):
        # soft weights so that irregular (noise-flipped) one-hot sequences
        # still decode to themselves
        soft = CrfParams(num_layers=4, w_del=np.full(4, 2.0), w_ins=np.full(4, 3.0))
        rng = np.random.default_rng(11)
        levels = ruler_levels(4, 96, phase=5)
        truth_levels = ruler_levels(4, 96, phase=0)
        noisy = levels.copy()
        flips = rng.integers(0, 96, size=12)
        noisy[flips] = rng.integers(0, 5, size=12)
        pred = one_hot(noisy, 4)
        truth = LevelSequence(truth_levels, 4)
        cal = calibrate_offset(pred, truth, soft)

        decoded = viterbi_decode(soft, pred).levels
        best = None
        for offset in range(-32, 33):
            shifted = np.zeros_like(decoded)
            lo, hi = max(0, offset), 96 + min(0, offset)
            shifted[lo:hi] = decoded[lo - offset : hi - offset]
            pred_set = {i for i in range(lo, hi) if shifted[i] >= 4}
            truth_set = {i for i in range(lo, hi) if truth_levels[i] >= 4}
            if not pred_set and not truth_set:
                f1 = 1.0
            elif not pred_set or not truth_set:
                f1 = 0.0
            else:
                tp = len(pred_set & truth_set)
                prec, rec = tp / len(pred_set), tp / len(truth_set)
                f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
            key = (f1, -abs(offset), -offset)
            if best is None or key > best[0]:
                best = (key, offset, f1)
        assert cal.offset == best[1]
        assert cal.score == pytest.approx(best[2], abs=1e-12)

    def test_short_sequence_rejected(self):
        levels = ruler_levels(4, 64, phase=0)
        with pytest.raises(ValueError, match="at least 65"):
            calibrate_offset(one_hot(levels, 4), LevelSequence(levels, 4), PARAMS)

    def test_length_mismatch_rejected(self):
        levels = ruler_levels(4, 80, phase=0)
        truth = LevelSequence(ruler_levels(4, 96, phase=0), 4)
        with pytest.raises(ValueError, match="does not match"):
            calibrate_offset(one_hot(levels, 4), truth, PARAMS)


class TestApplyOffset:
    def seq(self):
        levels = np.zeros(32, dtype=np.int64)
        levels[10] = 4
        return LevelSequence(levels, 4)

    def test_zero_offset_is_identity(self):
        seq = self.seq()
        assert apply_offset(seq, 0).levels.tolist() == seq.levels.tolist()

    def test_positive_offset_moves_boundary_right(self):
        shifted = apply_offset(self.seq(), 2)
        assert shifted.levels[12] == 4
        assert int((shifted.levels != 0).sum()) == 1
        assert len(shifted) == 32

    def test_round_trip_restores_interior(self):
        seq = LevelSequence(ruler_levels(4, 32, phase=0), 4)
        there_and_back = apply_offset(apply_offset(seq, 3), -3)
        interior = slice(3, 29)
        assert (
            there_and_back.levels[interior].tolist()
            == seq.levels[interior].tolist()
        )

    def test_vacated_positions_are_level_zero(self):
        shifted = apply_offset(self.seq(), 5)
        assert not shifted.levels[:5].any()
        shifted = apply_offset(self.seq(), -5)
        assert not shifted.levels[-5:].any()

    def test_offset_beyond_length_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            apply_offset(self.seq(), 40)
