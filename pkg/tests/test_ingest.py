"""Grid construction, quantization, JSON interchange, synthetic corpus."""

import numpy as np
import pytest

from hiermet.core import HOLD, ONSET, LevelSequence, PianoRoll, TrackRoll
from hiermet.ingest import (
    RollFormatError,
    SyntheticConfig,
    TatumGrid,
    UnsupportedVersionError,
    build_tatum_grid,
    generate_synthetic,
    load_pianoroll_json,
    quantize,
    ruler_levels,
    save_pianoroll_json,
)
from hiermet.smf import MidiNote, MidiSong


def song_with_notes(notes, tpq=480, names=None):
    return MidiSong(
        notes=[MidiNote(*n) for n in notes],
        tempo_map=[(0, 500000)],
        time_signatures=[(0, 4, 4)],
        ticks_per_quarter=tpq,
        track_names=names or [],
    )


class TestTatumGrid:
    def test_sixteen_points_for_four_quarters(self):
        song = song_with_notes([], tpq=480)
        grid = build_tatum_grid(song, 1920)
        assert grid.tatum_ticks.tolist() == list(range(0, 1920, 120))
        assert len(grid) == 16

    def test_unit_ticks(self):
        grid = build_tatum_grid(song_with_notes([], tpq=4), 8)
        assert grid.tatum_ticks.tolist() == [0, 1, 2, 3, 4, 5, 6, 7]

    def test_rounded_grid_deviation_bounded(self):
        # tpq=6 is not divisible by 4; ideal spacing is 1.5 ticks
        grid = build_tatum_grid(song_with_notes([], tpq=6), 12)
        ticks = grid.tatum_ticks
        ideal = 1.5 * np.arange(len(grid))
        assert np.max(np.abs(ticks - ideal)) <= 1.0
        assert (np.diff(ticks) > 0).all()

    def test_grid_excludes_end_tick(self):
        grid = build_tatum_grid(song_with_notes([], tpq=480), 1921)
        assert grid.tatum_ticks[-1] == 1920

    def test_tpq_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            build_tatum_grid(song_with_notes([], tpq=2), 100)

    def test_nonpositive_end_tick(self):
        with pytest.raises(ValueError, match="positive"):
            build_tatum_grid(song_with_notes([]), 0)

    def test_grid_validation(self):
        with pytest.raises(ValueError, match="increasing"):
            TatumGrid(np.array([0, 10, 10]))
        with pytest.raises(ValueError, match="at least one"):
            TatumGrid(np.array([], dtype=np.int64))


class TestQuantize:
    def test_quarter_note_spans_four_cells(self):
        song = song_with_notes([(0, 60, 0, 480, 100)])
        roll = quantize(song, build_tatum_grid(song, 1920))
        col = roll.tracks[0].cells[:, 60]
        assert col[:5].tolist() == [ONSET, HOLD, HOLD, HOLD, 0]
        assert not col[5:].any()

    def test_zero_extent_note_keeps_onset_cell(self):
        song = song_with_notes([(0, 60, 0, 1, 100)])
        roll = quantize(song, build_tatum_grid(song, 1920))
        col = roll.tracks[0].cells[:, 60]
        assert col[0] == ONSET
        assert not col[1:].any()

    def test_overlapping_same_pitch_union(self):
        song = song_with_notes([(0, 60, 0, 480, 100), (0, 60, 240, 720, 100)])
        roll = quantize(song, build_tatum_grid(song, 1920))
        col = roll.tracks[0].cells[:, 60]
        assert col[:7].tolist() == [ONSET, HOLD, ONSET, HOLD, HOLD, HOLD, 0]

    def test_onset_tie_snaps_earlier(self):
        song = song_with_notes([(0, 60, 60, 500, 100), (0, 62, 61, 500, 100)])
        roll = quantize(song, build_tatum_grid(song, 1920))
        cells = roll.tracks[0].cells
        assert cells[0, 60] == ONSET  # tick 60 is equidistant from 0 and 120
        assert cells[1, 62] == ONSET  # tick 61 is nearer 120

    def test_note_count_preserved_as_onset_flags(self):
        rng = np.random.default_rng(7)
        notes = []
        for k in range(40):
            onset = int(rng.integers(0, 1800))
            notes.append((0, int(rng.integers(0, 128)), onset, onset + 120, 64))
        song = song_with_notes(notes)
        roll = quantize(song, build_tatum_grid(song, 1920))
        collisions = len(notes) - len({(n[2] // 120, n[1]) for n in notes})
        onsets = int((roll.tracks[0].cells == ONSET).sum())
        if collisions == 0:
            assert onsets == len(notes)
        else:
            assert onsets >= len(notes) - collisions

    def test_tracks_in_original_order_with_names(self):
        song = song_with_notes(
            [(2, 60, 0, 480, 100), (1, 50, 0, 480, 100)],
            names=["conductor", "bass", "lead"],
        )
        roll = quantize(song, build_tatum_grid(song, 480))
        assert [t.name for t in roll.tracks] == ["bass", "lead"]
        assert roll.tracks[0].cells[0, 50] == ONSET
        assert roll.tracks[1].cells[0, 60] == ONSET

    def test_noteless_song_rejected(self):
        song = song_with_notes([])
        grid = build_tatum_grid(song, 480)
        with pytest.raises(ValueError, match="no notes"):
            quantize(song, grid)


class TestJsonRoundTrip:
    def roll(self):
        cells = np.zeros((8, 128), dtype=np.uint8)
        cells[0, 60] = ONSET
        cells[1, 60] = HOLD
        cells[4, 62] = ONSET
        return PianoRoll((TrackRoll(cells, name="lead"),))

    def test_round_trip_identity(self):
        roll = self.roll()
        loaded, levels = load_pianoroll_json(save_pianoroll_json(roll))
        assert levels is None
        assert loaded.num_steps == roll.num_steps
        assert loaded.tracks[0].name == "lead"
        assert np.array_equal(loaded.tracks[0].cells, roll.tracks[0].cells)

    def test_round_trip_with_levels(self):
        roll = self.roll()
        truth = LevelSequence(np.array([3, 0, 1, 0, 2, 0, 1, 0]), 3)
        loaded, levels = load_pianoroll_json(save_pianoroll_json(roll, truth))
        assert levels.tolist() == truth.levels.tolist()

    def test_round_trip_random_rolls(self):
        for song, truth in generate_synthetic(
            SyntheticConfig(num_layers=4, num_songs=3, steps_per_song=32, seed=5)
        ):
            loaded, levels = load_pianoroll_json(save_pianoroll_json(song, truth))
            assert levels.tolist() == truth.levels.tolist()
            for got, want in zip(loaded.tracks, song.tracks):
                assert got.name == want.name
                assert np.array_equal(got.cells, want.cells)

    def test_bytes_deterministic(self):
        roll = self.roll()
        assert save_pianoroll_json(roll) == save_pianoroll_json(roll)

    def test_levels_length_mismatch_on_save(self):
        with pytest.raises(ValueError, match="does not match"):
            save_pianoroll_json(self.roll(), LevelSequence(np.zeros(5, dtype=int), 3))


class TestJsonValidation:
    def test_missing_tracks_field(self):
        with pytest.raises(RollFormatError, match="tracks") as info:
            load_pianoroll_json(b'{"version":1,"tatum":"sixteenth","num_steps":4}')
        assert info.value.field == "tracks"

    def test_unsupported_version(self):
        doc = b'{"version":2,"tatum":"sixteenth","num_steps":4,"tracks":[]}'
        with pytest.raises(UnsupportedVersionError, match="version"):
            load_pianoroll_json(doc)

    def test_not_json(self):
        with pytest.raises(RollFormatError, match="document"):
            load_pianoroll_json(b"][")

    def test_wrong_tatum_label(self):
        doc = b'{"version":1,"tatum":"eighth","num_steps":4,"tracks":[{"name":"","cells":[]}]}'
        with pytest.raises(RollFormatError, match="tatum"):
            load_pianoroll_json(doc)

    def test_bad_num_steps(self):
        doc = b'{"version":1,"tatum":"sixteenth","num_steps":0,"tracks":[{"name":"","cells":[]}]}'
        with pytest.raises(RollFormatError, match="num_steps"):
            load_pianoroll_json(doc)

    def test_cell_out_of_range(self):
        doc = (
            b'{"version":1,"tatum":"sixteenth","num_steps":4,'
            b'"tracks":[{"name":"","cells":[[4,60,2]]}]}'
        )
        with pytest.raises(RollFormatError, match=r"cells\[0\]"):
            load_pianoroll_json(doc)

    def test_bad_flag_value(self):
        doc = (
            b'{"version":1,"tatum":"sixteenth","num_steps":4,'
            b'"tracks":[{"name":"","cells":[[0,60,3]]}]}'
        )
        with pytest.raises(RollFormatError, match="flag"):
            load_pianoroll_json(doc)

    def test_orphan_hold_rejected(self):
        doc = (
            b'{"version":1,"tatum":"sixteenth","num_steps":4,'
            b'"tracks":[{"name":"","cells":[[2,60,1]]}]}'
        )
        with pytest.raises(RollFormatError, match=r"tracks\[0\].cells"):
            load_pianoroll_json(doc)

    def test_levels_wrong_length(self):
        doc = (
            b'{"version":1,"tatum":"sixteenth","num_steps":4,'
            b'"tracks":[{"name":"","cells":[[0,60,2]]}],"levels":[0,1]}'
        )
        with pytest.raises(RollFormatError, match="levels"):
            load_pianoroll_json(doc)


class TestRulerLevels:
    def test_trailing_zero_structure(self):
        levels = ruler_levels(3, 16, phase=0)
        assert levels.tolist() == [3, 0, 1, 0, 2, 0, 1, 0, 3, 0, 1, 0, 2, 0, 1, 0]

    def test_phase_rotates(self):
        base = ruler_levels(3, 16, phase=0)
        shifted = ruler_levels(3, 16, phase=3)
        assert shifted.tolist() == np.roll(base, -3).tolist()

    def test_boundary_counts_halve(self):
        # with zero phase and N a multiple of 2^L, counts at successive
        # levels halve exactly
        num_layers, n = 5, 128
        seq = LevelSequence(ruler_levels(num_layers, n, 0), num_layers)
        for level in range(1, num_layers + 1):
            assert seq.boundaries(level).size == n >> level


class TestSyntheticCorpus:
    def test_shapes_and_ground_truth(self):
        config = SyntheticConfig(
            num_layers=5, num_songs=4, steps_per_song=96, tracks_per_song=3, seed=1
        )
        corpus = generate_synthetic(config)
        assert len(corpus) == 4
        for roll, truth in corpus:
            assert roll.num_steps == 96
            assert roll.num_tracks == 3
            assert truth.levels.shape == (96,)
            assert truth.num_layers == 5

    def test_regular_truth_is_strictly_binary(self):
        config = SyntheticConfig(
            num_layers=5, num_songs=6, steps_per_song=128, irregularity_rate=0.0, seed=2
        )
        for _, truth in generate_synthetic(config):
            for level in range(2, 6):
                uppers = truth.boundaries(level)
                lowers = truth.boundaries(level - 1)
                for lo, hi in zip(uppers, uppers[1:]):
                    # each level-l span holds exactly two level-(l-1)
                    # boundaries: its own start and the midpoint
                    inner = lowers[(lowers >= lo) & (lowers < hi)]
                    assert inner.size == 2

    def test_same_seed_reproduces_corpus(self):
        config = SyntheticConfig(num_layers=5, num_songs=3, steps_per_song=64, seed=9)
        a = generate_synthetic(config)
        b = generate_synthetic(config)
        for (roll_a, truth_a), (roll_b, truth_b) in zip(a, b):
            assert save_pianoroll_json(roll_a, truth_a) == save_pianoroll_json(
                roll_b, truth_b
            )

    def test_saturated_density_fills_every_step(self):
        config = SyntheticConfig(
            num_layers=3,
            num_songs=2,
            steps_per_song=32,
            onset_density=(1.0,) * 4,
            seed=3,
        )
        for roll, _ in generate_synthetic(config):
            for trk in roll.tracks:
                assert ((trk.cells == ONSET).sum(axis=1) >= 1).all()

    def test_irregular_songs_break_strict_regularity(self):
        config = SyntheticConfig(
            num_layers=6, num_songs=8, steps_per_song=256, irregularity_rate=1.0, seed=4
        )
        broken = 0
        for roll, truth in generate_synthetic(config):
            assert roll.num_steps == 256
            assert truth.levels.shape == (256,)
            top = truth.boundaries(5)
            gaps = np.diff(top)
            if gaps.size and (gaps != 32).any():
                broken += 1
        assert broken >= 1

    def test_track_roles_cycle(self):
        config = SyntheticConfig(num_layers=4, num_songs=1, steps_per_song=32, tracks_per_song=5)
        roll, _ = generate_synthetic(config)[0]
        assert [t.name for t in roll.tracks] == [
            "melody", "bass", "harmony", "melody-2", "bass-2",
        ]

    def test_density_length_validated(self):
        with pytest.raises(ValueError, match="onset_density"):
            SyntheticConfig(num_layers=4, onset_density=(0.5, 0.5))

    def test_irregularity_range_validated(self):
        with pytest.raises(ValueError, match="irregularity"):
            SyntheticConfig(irregularity_rate=1.5)
