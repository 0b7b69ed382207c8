"""Shared domain types for metrical analysis.

Piano rolls hold quantized note activity on a sixteenth-note tatum grid.
Metrical structure is described by boundary levels: a tatum at level ``l``
starts a unit at every layer up to ``l`` (0 = no boundary, 1 = beat-division
boundary, ... up to the number of layers in the hierarchy).  CRF types
describe the latent binary phase state of each layer and the insertion and
deletion penalties that govern departures from strict binary subdivision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

NUM_PITCHES = 128

# Cell flags of a piano-roll track.
SILENT = 0
HOLD = 1
ONSET = 2

TATUM_UNIT = "sixteenth-note"


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TrackRoll:
    """Quantized note activity of one track.

    ``cells`` has shape (num_steps, 128) with one flag per tatum and pitch:
    0 silent, 1 hold (continuation of an earlier onset), 2 onset.  A hold at
    step ``i`` requires a non-silent flag at step ``i - 1``.
    """

    cells: np.ndarray
    name: str = ""

    def __post_init__(self) -> None:
        cells = np.asarray(self.cells)
        if cells.ndim != 2 or cells.shape[1] != NUM_PITCHES:
            raise ValueError(
                f"track cells must have shape (num_steps, {NUM_PITCHES}), got {cells.shape}"
            )
        if cells.shape[0] < 1:
            raise ValueError("track must cover at least one step")
        if not np.issubdtype(cells.dtype, np.integer):
            raise ValueError(f"cell flags must be integers, got dtype {cells.dtype}")
        if cells.min() < SILENT or cells.max() > ONSET:
            raise ValueError("cell flags must be 0 (silent), 1 (hold) or 2 (onset)")
        cells = cells.astype(np.uint8)
        if (cells[0] == HOLD).any():
            pitch = int(np.argmax(cells[0] == HOLD))
            raise ValueError(f"hold flag at step 0 pitch {pitch} has no preceding sound")
        dangling = (cells[1:] == HOLD) & (cells[:-1] == SILENT)
        if dangling.any():
            step, pitch = np.argwhere(dangling)[0]
            raise ValueError(
                f"hold flag at step {step + 1} pitch {pitch} has no preceding sound"
            )
        object.__setattr__(self, "cells", _freeze(cells))

    @property
    def num_steps(self) -> int:
        return self.cells.shape[0]


@dataclass(frozen=True)
class PianoRoll:
    """A multi-track piano roll on a common tatum grid."""

    tracks: tuple[TrackRoll, ...]
    tatum_unit: str = TATUM_UNIT

    def __post_init__(self) -> None:
        tracks = tuple(self.tracks)
        if not tracks:
            raise ValueError("piano roll needs at least one track")
        lengths = {t.num_steps for t in tracks}
        if len(lengths) != 1:
            raise ValueError(f"tracks disagree on length: {sorted(lengths)}")
        object.__setattr__(self, "tracks", tracks)

    @property
    def num_steps(self) -> int:
        return self.tracks[0].num_steps

    @property
    def num_tracks(self) -> int:
        return len(self.tracks)


@dataclass(frozen=True)
class LevelSequence:
    """Per-tatum boundary levels, each in ``0 .. num_layers``."""

    levels: np.ndarray
    num_layers: int

    def __post_init__(self) -> None:
        levels = np.asarray(self.levels)
        if levels.ndim != 1:
            raise ValueError(f"levels must be one-dimensional, got shape {levels.shape}")
        if self.num_layers < 1:
            raise ValueError("need at least one layer")
        if levels.size and not np.issubdtype(levels.dtype, np.integer):
            raise ValueError(f"levels must be integers, got dtype {levels.dtype}")
        levels = levels.astype(np.int64)
        if levels.size and (levels.min() < 0 or levels.max() > self.num_layers):
            raise ValueError(
                f"levels must lie in 0..{self.num_layers}, "
                f"got range {levels.min()}..{levels.max()}"
            )
        object.__setattr__(self, "levels", _freeze(levels))

    def __len__(self) -> int:
        return self.levels.shape[0]

    def boundaries(self, level: int) -> np.ndarray:
        """Indices of tatums whose boundary level is at least ``level``."""
        if not 1 <= level <= self.num_layers:
            raise ValueError(f"level must lie in 1..{self.num_layers}, got {level}")
        return np.flatnonzero(self.levels >= level)


@dataclass(frozen=True)
class LevelDistribution:
    """A probability distribution over boundary levels ``0 .. num_layers``."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.shape[0] < 2:
            raise ValueError(f"need probabilities for levels 0..L, got shape {probs.shape}")
        if not np.all(np.isfinite(probs)) or probs.min() < 0.0:
            raise ValueError("probabilities must be finite and non-negative")
        total = probs.sum()
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"probabilities must sum to 1 within 1e-6, got {total!r}")
        object.__setattr__(self, "probs", _freeze(probs))

    @property
    def num_layers(self) -> int:
        return self.probs.shape[0] - 1


def cumulative_prob(dist: Union[LevelDistribution, np.ndarray], level: int) -> float:
    """Probability that the boundary level is at least ``level``.

    ``p(i >= 0)`` is 1 by construction; ``p(i >= L)`` is the top-layer mass.
    """
    probs = dist.probs if isinstance(dist, LevelDistribution) else np.asarray(dist)
    if probs.ndim != 1:
        raise ValueError(f"expected a single distribution, got shape {probs.shape}")
    if not 0 <= level <= probs.shape[0] - 1:
        raise ValueError(f"level {level} out of range 0..{probs.shape[0] - 1}")
    return float(probs[level:].sum())


@dataclass(frozen=True)
class CrfState:
    """Binary phase state of the hierarchy at one tatum.

    ``bits[l - 1]`` is the phase of layer ``l``: 0 when the tatum sits in the
    first half of the layer's current unit, 1 in the second half.  A tatum's
    boundary level is the number of leading zero bits (layer 1 upward).
    """

    bits: tuple[int, ...]

    def __post_init__(self) -> None:
        bits = tuple(int(b) for b in self.bits)
        if not bits:
            raise ValueError("state needs at least one layer bit")
        if any(b not in (0, 1) for b in bits):
            raise ValueError(f"state bits must be 0 or 1, got {bits}")
        object.__setattr__(self, "bits", bits)

    @property
    def num_layers(self) -> int:
        return len(self.bits)

    @property
    def index(self) -> int:
        """Little-endian integer encoding: bit of layer ``l`` at position ``l - 1``."""
        return sum(b << i for i, b in enumerate(self.bits))

    @classmethod
    def from_index(cls, index: int, num_layers: int) -> "CrfState":
        if not 0 <= index < (1 << num_layers):
            raise ValueError(f"index {index} out of range for {num_layers} layers")
        return cls(tuple((index >> i) & 1 for i in range(num_layers)))


def boundary_level(state: Union[CrfState, Sequence[int]]) -> int:
    """Number of layers whose unit starts at this tatum (leading zero bits)."""
    bits = state.bits if isinstance(state, CrfState) else tuple(int(b) for b in state)
    for i, b in enumerate(bits):
        if b:
            return i
    return len(bits)


@dataclass(frozen=True)
class CrfParams:
    """Per-layer irregularity penalties of the metrical CRF.

    ``w_del[l - 1]`` penalizes deleting (skipping) the second half of a unit
    at layer ``l``; ``w_ins[l - 1]`` penalizes inserting an extra repeat of
    the first half.  ``+inf`` forbids the irregularity outright, which keeps
    the layer strictly binary.
    """

    num_layers: int
    w_del: np.ndarray
    w_ins: np.ndarray

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ValueError("need at least one layer")
        for name, value in (("w_del", self.w_del), ("w_ins", self.w_ins)):
            arr = np.asarray(value, dtype=np.float64)
            if arr.shape != (self.num_layers,):
                raise ValueError(
                    f"{name} must have shape ({self.num_layers},), got {arr.shape}"
                )
            if np.isnan(arr).any() or (arr <= 0.0).any():
                raise ValueError(f"{name} entries must be positive (or +inf)")
            object.__setattr__(self, name, _freeze(arr))


def default_crf_params(
    num_layers: int = 8,
    hard_layers: int | None = None,
    w_del: float = 15.0,
    w_ins: float = 20.0,
) -> CrfParams:
    """Default penalties: strict binary subdivision up to the measure layer,
    finite insertion and deletion costs on the hypermetrical layers above."""
    if hard_layers is None:
        hard_layers = min(4, num_layers)
    if not 0 <= hard_layers <= num_layers:
        raise ValueError(f"hard_layers must lie in 0..{num_layers}")
    dels = np.full(num_layers, w_del, dtype=np.float64)
    inss = np.full(num_layers, w_ins, dtype=np.float64)
    dels[:hard_layers] = np.inf
    inss[:hard_layers] = np.inf
    return CrfParams(num_layers=num_layers, w_del=dels, w_ins=inss)


def as_prob_matrix(
    p: Union[np.ndarray, Iterable[LevelDistribution]], num_layers: int | None = None
) -> np.ndarray:
    """Coerce a sequence of level distributions to a float matrix (N, L + 1)."""
    if isinstance(p, np.ndarray):
        mat = np.asarray(p, dtype=np.float64)
    else:
        rows = list(p)
        if not rows:
            raise ValueError("need at least one distribution")
        mat = np.stack(
            [r.probs if isinstance(r, LevelDistribution) else np.asarray(r, float) for r in rows]
        )
    if mat.ndim != 2 or mat.shape[0] < 1 or mat.shape[1] < 2:
        raise ValueError(f"probabilities must have shape (N, L + 1), got {mat.shape}")
    if not np.all(np.isfinite(mat)) or mat.min() < 0.0:
        raise ValueError("probabilities must be finite and non-negative")
    if num_layers is not None and mat.shape[1] != num_layers + 1:
        raise ValueError(
            f"expected {num_layers + 1} level columns, got {mat.shape[1]}"
        )
    return mat
