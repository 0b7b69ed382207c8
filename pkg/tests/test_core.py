import numpy as np
import pytest

from hiermet.core import (
    HOLD,
    NUM_PITCHES,
    ONSET,
    CrfParams,
    CrfState,
    LevelDistribution,
    LevelSequence,
    PianoRoll,
    TrackRoll,
    as_prob_matrix,
    boundary_level,
    cumulative_prob,
    default_crf_params,
)


def _cells(num_steps):
    return np.zeros((num_steps, NUM_PITCHES), dtype=np.int64)


class TestTrackRoll:
    def test_valid_roll(self):
        cells = _cells(4)
        cells[0, 60] = ONSET
        cells[1, 60] = HOLD
        roll = TrackRoll(cells, name="melody")
        assert roll.num_steps == 4
        assert roll.cells.dtype == np.uint8

    def test_cells_frozen(self):
        roll = TrackRoll(_cells(2))
        with pytest.raises(ValueError):
            roll.cells[0, 0] = 1

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            TrackRoll(np.zeros((4, 64), dtype=np.int64))

    def test_bad_flag(self):
        cells = _cells(2)
        cells[0, 0] = 3
        with pytest.raises(ValueError):
            TrackRoll(cells)

    def test_hold_without_sound(self):
        cells = _cells(3)
        cells[2, 60] = HOLD
        with pytest.raises(ValueError, match="hold"):
            TrackRoll(cells)

    def test_hold_at_step_zero(self):
        cells = _cells(3)
        cells[0, 60] = HOLD
        with pytest.raises(ValueError, match="hold"):
            TrackRoll(cells)

    def test_hold_after_hold_ok(self):
        cells = _cells(3)
        cells[0, 60] = ONSET
        cells[1, 60] = HOLD
        cells[2, 60] = HOLD
        TrackRoll(cells)


class TestPianoRoll:
    def test_num_steps_agree(self):
        roll = PianoRoll((TrackRoll(_cells(8)), TrackRoll(_cells(8))))
        assert roll.num_steps == 8
        assert roll.num_tracks == 2

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            PianoRoll((TrackRoll(_cells(8)), TrackRoll(_cells(7))))

    def test_empty(self):
        with pytest.raises(ValueError):
            PianoRoll(())


class TestLevelSequence:
    def test_roundtrip(self):
        seq = LevelSequence(np.array([2, 0, 1, 0]), num_layers=2)
        assert len(seq) == 4
        assert seq.levels.tolist() == [2, 0, 1, 0]

    def test_boundaries(self):
        seq = LevelSequence(np.array([2, 0, 1, 0]), num_layers=2)
        assert seq.boundaries(1).tolist() == [0, 2]
        assert seq.boundaries(2).tolist() == [0]

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            LevelSequence(np.array([3]), num_layers=2)
        with pytest.raises(ValueError):
            LevelSequence(np.array([-1]), num_layers=2)

    def test_non_integer(self):
        with pytest.raises(ValueError):
            LevelSequence(np.array([0.5]), num_layers=2)


class TestLevelDistribution:
    def test_sums_to_one(self):
        dist = LevelDistribution(np.array([0.5, 0.3, 0.2]))
        assert dist.num_layers == 2

    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError, match="sum"):
            LevelDistribution(np.array([0.5, 0.3, 0.3]))

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            LevelDistribution(np.array([1.2, -0.1, -0.1]))


class TestCumulativeProb:
    def test_level_zero_is_one(self):
        dist = LevelDistribution(np.array([0.5, 0.25, 0.25]))
        assert cumulative_prob(dist, 0) == pytest.approx(1.0)

    def test_partial_sums(self):
        dist = LevelDistribution(np.array([0.5, 0.25, 0.25]))
        assert cumulative_prob(dist, 1) == pytest.approx(0.5)
        assert cumulative_prob(dist, 2) == pytest.approx(0.25)

    def test_plain_array(self):
        assert cumulative_prob(np.array([0.1, 0.9]), 1) == pytest.approx(0.9)

    def test_out_of_range(self):
        dist = LevelDistribution(np.array([0.5, 0.5]))
        with pytest.raises(ValueError, match="range"):
            cumulative_prob(dist, 2)
        with pytest.raises(ValueError, match="range"):
            cumulative_prob(dist, -1)

    def test_monotone_in_level(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            probs = rng.dirichlet(np.ones(9))
            dist = LevelDistribution(probs)
            values = [cumulative_prob(dist, level) for level in range(9)]
            assert values[0] == pytest.approx(1.0)
            for lo, hi in zip(values[1:], values[:-1]):
                assert lo <= hi + 1e-12


class TestCrfState:
    def test_index_roundtrip(self):
        for idx in range(16):
            state = CrfState.from_index(idx, 4)
            assert state.index == idx
            assert state.num_layers == 4

    def test_bits_validated(self):
        with pytest.raises(ValueError):
            CrfState((0, 2))
        with pytest.raises(ValueError):
            CrfState(())

    def test_from_index_range(self):
        with pytest.raises(ValueError):
            CrfState.from_index(16, 4)


class TestBoundaryLevel:
    def test_examples(self):
        assert boundary_level(CrfState((0, 0, 0))) == 3
        assert boundary_level(CrfState((1, 0, 0))) == 0
        assert boundary_level(CrfState((0, 1, 0))) == 1
        assert boundary_level(CrfState((0, 0, 1))) == 2
        assert boundary_level((1, 1, 1)) == 0

    def test_counts_by_level(self):
        # 2^(L - l - 1) states at level l < L, one state at level L.
        num_layers = 5
        counts = np.zeros(num_layers + 1, dtype=int)
        for idx in range(1 << num_layers):
            counts[boundary_level(CrfState.from_index(idx, num_layers))] += 1
        for level in range(num_layers):
            assert counts[level] == 1 << (num_layers - level - 1)
        assert counts[num_layers] == 1


class TestCrfParams:
    def test_default_params(self):
        params = default_crf_params()
        assert params.num_layers == 8
        assert np.isinf(params.w_del[:4]).all()
        assert np.isinf(params.w_ins[:4]).all()
        assert params.w_del[4:].tolist() == [15.0] * 4
        assert params.w_ins[4:].tolist() == [20.0] * 4

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            CrfParams(2, np.array([1.0, 0.0]), np.array([1.0, 1.0]))
        with pytest.raises(ValueError):
            CrfParams(2, np.array([1.0, np.nan]), np.array([1.0, 1.0]))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            CrfParams(3, np.array([1.0, 1.0]), np.array([1.0, 1.0, 1.0]))


class TestAsProbMatrix:
    def test_from_distributions(self):
        rows = [LevelDistribution(np.array([0.5, 0.5])) for _ in range(3)]
        mat = as_prob_matrix(rows, num_layers=1)
        assert mat.shape == (3, 2)

    def test_column_check(self):
        with pytest.raises(ValueError):
            as_prob_matrix(np.full((4, 3), 1 / 3), num_layers=4)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            as_prob_matrix(np.array([[0.5, -0.5]]))
