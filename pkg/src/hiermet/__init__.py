"""Hierarchical metrical structure analysis for beat-aligned symbolic music.

The package learns, without boundary annotations, an eight-layer binary
metrical hierarchy (tatum, beat, measure, and hypermeasures) from multi-track
piano rolls.  A dilated convolutional emission model predicts per-tatum
boundary-level distributions, a conditional random field with insertion and
deletion penalties enforces metrical regularity, and a single annotated song
calibrates the global phase offset.
"""

from hiermet.core import (
    CrfParams,
    CrfState,
    LevelDistribution,
    LevelSequence,
    PianoRoll,
    TrackRoll,
    boundary_level,
    cumulative_prob,
    default_crf_params,
)
from hiermet.crf import (
    CrfLossResult,
    TransitionTable,
    brute_force_loss,
    build_transition_table,
    consistency_loss,
    subsample_to_measure_level,
    successor_state,
    transition_log_potential,
    unsupervised_loss,
    viterbi_decode,
)
from hiermet.calibrate import Calibration, apply_offset, calibrate_offset
from hiermet.evaluate import (
    EvalReport,
    boundary_f1,
    downbeat_f1,
    evaluate_corpus,
    peak_pick_downbeats,
)
from hiermet.ingest import (
    SyntheticConfig,
    TatumGrid,
    build_tatum_grid,
    generate_synthetic,
    load_pianoroll_json,
    quantize,
    save_pianoroll_json,
)
from hiermet.model import (
    Checkpoint,
    EmissionModel,
    TrainConfig,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from hiermet.smf import MidiNote, MidiSong, parse_smf

__version__ = "0.1.0"

__all__ = [
    "Calibration",
    "Checkpoint",
    "CrfLossResult",
    "CrfParams",
    "CrfState",
    "EmissionModel",
    "EvalReport",
    "LevelDistribution",
    "LevelSequence",
    "MidiNote",
    "MidiSong",
    "PianoRoll",
    "SyntheticConfig",
    "TatumGrid",
    "TrackRoll",
    "TrainConfig",
    "TransitionTable",
    "apply_offset",
    "boundary_f1",
    "boundary_level",
    "brute_force_loss",
    "build_tatum_grid",
    "build_transition_table",
    "calibrate_offset",
    "consistency_loss",
    "cumulative_prob",
    "default_crf_params",
    "downbeat_f1",
    "evaluate_corpus",
    "generate_synthetic",
    "load_checkpoint",
    "load_pianoroll_json",
    "parse_smf",
    "peak_pick_downbeats",
    "predict",
    "quantize",
    "save_checkpoint",
    "save_pianoroll_json",
    "subsample_to_measure_level",
    "successor_state",
    "train",
    "transition_log_potential",
    "unsupervised_loss",
    "viterbi_decode",
]
