"""Conditional random field over hierarchical boundary levels.

The latent state at tatum ``i`` is an L-bit phase vector (see
:class:`hiermet.core.CrfState`).  A transition is fully determined by the
boundary level ``b`` of the next tatum: layers up to ``b`` return to phase 0,
layer ``b + 1`` moves to phase 1, and higher layers keep their phase.  Layer
``l`` contributes a factor from its 2x2 alternation matrix

    A(l) = [[exp(-w_del[l]), 1], [1, exp(-w_ins[l])]]

for every layer ``l <= b + 1``; layers above ``b + 1`` are frozen and
contribute 1.  Strict binary subdivision (phases alternating 0, 1, 0, 1)
costs nothing; staying at phase 1 is an insertion, returning from phase 0 is
a deletion.  Emissions score the boundary level of the state against a
per-tatum level distribution.

This module provides the log-space forward-backward loss with analytic
gradients, a pairwise consistency loss, exact Viterbi decoding, measure-rate
subsampling for hypermetrical decoding, and brute-force enumeration oracles
used by the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from hiermet.core import (
    CrfParams,
    CrfState,
    LevelSequence,
    as_prob_matrix,
    boundary_level,
)

# Transition tables are materialized with 2^L states.
MAX_TABLE_LAYERS = 12

# Enumeration cap for the brute-force oracles: (L + 1)^N level sequences.
MAX_BRUTE_SEQUENCES = 10**7

_BRUTE_CHUNK = 1 << 15


class DecodeError(RuntimeError):
    """No level sequence has positive probability under the model."""


def successor_state(state: CrfState, b: int) -> CrfState:
    """State reached from ``state`` when the next tatum has boundary level ``b``.

    Layers 1..b reset to phase 0, layer b + 1 (if any) moves to phase 1, and
    layers above b + 1 are unchanged.  The successor does not depend on the
    phases of layers 1..b + 1 of ``state``; those only affect the potential.
    """
    num = state.num_layers
    if not 0 <= b <= num:
        raise ValueError(f"boundary level must lie in 0..{num}, got {b}")
    bits = (0,) * b
    if b < num:
        bits = bits + (1,) + state.bits[b + 1 :]
    return CrfState(bits)


def transition_log_potential(params: CrfParams, state: CrfState, b: int) -> float:
    """Log potential of the transition from ``state`` with boundary level ``b``.

    Sums ``-w_del[l]`` for every layer ``l <= b`` whose phase regresses from 0
    back to 0 (a deleted second half) and ``-w_ins[l]`` when layer ``b + 1``
    stays at phase 1 (an inserted repeat).  Regular alternations cost 0.
    Returns ``-inf`` when a forbidden (infinite-weight) irregularity occurs.
    """
    num = params.num_layers
    if state.num_layers != num:
        raise ValueError(
            f"state has {state.num_layers} layers but params have {num}"
        )
    if not 0 <= b <= num:
        raise ValueError(f"boundary level must lie in 0..{num}, got {b}")
    total = 0.0
    for pos in range(min(b, num)):
        if state.bits[pos] == 0:
            total -= params.w_del[pos]
    if b < num and state.bits[b] == 1:
        total -= params.w_ins[b]
    return float(total)


@dataclass(frozen=True)
class TransitionTable:
    """Dense transition structure of the CRF for one parameter set.

    States are indexed by their little-endian bit encoding.  Edge ``(z, b)``
    leads to ``successor[z, b]`` with log potential ``log_potential[z, b]``;
    ``state_level[z]`` caches the boundary level of state ``z``.  The sorted
    edge views group the flat edge list by destination state for the forward
    recursion (incoming edges of state ``s`` occupy
    ``in_order[in_starts[s]:in_starts[s + 1]]``).
    """

    num_layers: int
    successor: np.ndarray
    log_potential: np.ndarray
    state_level: np.ndarray
    in_order: np.ndarray
    in_starts: np.ndarray

    @property
    def num_states(self) -> int:
        return self.successor.shape[0]


def build_transition_table(params: CrfParams) -> TransitionTable:
    """Materialize successor indices and log potentials for all states."""
    num = params.num_layers
    if num > MAX_TABLE_LAYERS:
        raise ValueError(
            f"transition table supports at most {MAX_TABLE_LAYERS} layers, got {num}"
        )
    size = 1 << num
    successor = np.empty((size, num + 1), dtype=np.int32)
    log_potential = np.empty((size, num + 1), dtype=np.float64)
    state_level = np.empty(size, dtype=np.int64)
    for idx in range(size):
        state = CrfState.from_index(idx, num)
        state_level[idx] = boundary_level(state)
        for b in range(num + 1):
            successor[idx, b] = successor_state(state, b).index
            log_potential[idx, b] = transition_log_potential(params, state, b)
    edge_dst = successor.ravel()
    in_order = np.argsort(edge_dst, kind="stable")
    in_starts = np.searchsorted(edge_dst[in_order], np.arange(size))
    return TransitionTable(
        num_layers=num,
        successor=successor,
        log_potential=log_potential,
        state_level=state_level,
        in_order=in_order,
        in_starts=in_starts,
    )


ParamsOrTable = Union[CrfParams, TransitionTable]


def _as_table(params: ParamsOrTable) -> TransitionTable:
    if isinstance(params, TransitionTable):
        return params
    return build_transition_table(params)


def _segment_logsumexp(values: np.ndarray, starts: np.ndarray, seg_ids: np.ndarray) -> np.ndarray:
    """Log-sum-exp over contiguous segments of the last axis, batched.

    ``values`` is (B, E) with segments given by ``starts``; ``seg_ids`` maps
    each of the E positions to its segment.  Empty segments cannot occur here
    (every state has incoming edges).  All -inf segments yield -inf.
    """
    top = np.maximum.reduceat(values, starts, axis=1)
    safe = np.where(np.isfinite(top), top, 0.0)
    sums = np.add.reduceat(np.exp(values - safe[:, seg_ids]), starts, axis=1)
    with np.errstate(divide="ignore"):
        return top + np.log(sums)


def _logsumexp_last(values: np.ndarray) -> np.ndarray:
    """Log-sum-exp over the last axis with explicit -inf handling."""
    top = values.max(axis=-1)
    safe = np.where(np.isfinite(top), top, 0.0)
    sums = np.exp(values - safe[..., None]).sum(axis=-1)
    with np.errstate(divide="ignore"):
        return top + np.log(sums)


def _forward_backward(table: TransitionTable, log_emit: np.ndarray):
    """Batched forward-backward pass.

    ``log_emit`` has shape (B, N, L + 1).  Returns ``(log_z, level_mass)``
    where ``log_z`` is (B,) and ``level_mass`` is the posterior probability
    of each boundary level per tatum, shape (B, N, L + 1).  Batch items whose
    partition function vanishes get ``log_z = -inf`` and zero mass.
    """
    batch, steps, _ = log_emit.shape
    size = table.num_states
    levels = table.num_layers + 1

    # Emission of each state is that of its boundary level.
    emit_state = log_emit[:, :, table.state_level]

    edge_src = np.repeat(np.arange(size), levels)
    src_sorted = edge_src[table.in_order]
    logw_sorted = table.log_potential.ravel()[table.in_order]
    dst_sorted = table.successor.ravel()[table.in_order]
    edge_dst = table.successor.ravel()
    edge_logw = table.log_potential.ravel()

    log_alpha = np.empty((batch, steps, size))
    log_alpha[:, 0] = emit_state[:, 0]
    for i in range(1, steps):
        incoming = log_alpha[:, i - 1, src_sorted] + logw_sorted[None, :]
        log_alpha[:, i] = (
            _segment_logsumexp(incoming, table.in_starts, dst_sorted) + emit_state[:, i]
        )
    log_z = _logsumexp_last(log_alpha[:, steps - 1])

    log_beta = np.empty((batch, steps, size))
    log_beta[:, steps - 1] = 0.0
    for i in range(steps - 2, -1, -1):
        carry = log_beta[:, i + 1] + emit_state[:, i + 1]
        outgoing = edge_logw[None, :] + carry[:, edge_dst]
        log_beta[:, i] = _logsumexp_last(outgoing.reshape(batch, size, levels))

    feasible = np.isfinite(log_z)
    mass = np.zeros((batch, steps, levels))
    if feasible.any():
        idx = np.flatnonzero(feasible)
        post = np.exp(
            log_alpha[idx] + log_beta[idx] - log_z[idx, None, None]
        )
        onehot = np.equal.outer(table.state_level, np.arange(levels)).astype(np.float64)
        mass[idx] = post @ onehot
    return log_z, mass


def unsupervised_loss_batch(params: ParamsOrTable, p_batch: np.ndarray) -> np.ndarray:
    """Loss values for a batch of probability sequences, shape (B, N, L + 1).

    Forward pass only (no gradients); infeasible items yield +inf.  Used for
    exhaustive sweeps where per-item calls would dominate the runtime.
    """
    table = _as_table(params)
    batch = np.asarray(p_batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[2] != table.num_layers + 1:
        raise ValueError(
            f"expected shape (B, N, {table.num_layers + 1}), got {batch.shape}"
        )
    if not np.all(np.isfinite(batch)) or batch.min() < 0.0:
        raise ValueError("probabilities must be finite and non-negative")
    size = table.num_states
    edge_src = np.repeat(np.arange(size), table.num_layers + 1)
    src_sorted = edge_src[table.in_order]
    logw_sorted = table.log_potential.ravel()[table.in_order]
    dst_sorted = table.successor.ravel()[table.in_order]
    with np.errstate(divide="ignore"):
        log_emit = np.log(batch)
    emit_state = log_emit[:, :, table.state_level]
    alpha = emit_state[:, 0]
    for i in range(1, batch.shape[1]):
        incoming = alpha[:, src_sorted] + logw_sorted[None, :]
        alpha = _segment_logsumexp(incoming, table.in_starts, dst_sorted) + emit_state[:, i]
    return -_logsumexp_last(alpha)


@dataclass
class CrfLossResult:
    """Negative log partition value and its gradient with respect to the
    per-tatum level probabilities.  ``grad`` is None when the loss is +inf
    (no level sequence has positive probability)."""

    loss: float
    grad: np.ndarray | None


@dataclass
class ConsistencyLossResult:
    """Pairwise agreement loss and gradients with respect to both inputs."""

    loss: float
    grad1: np.ndarray | None
    grad2: np.ndarray | None


def _log_clamped(p: np.ndarray, clamp: float) -> tuple[np.ndarray, np.ndarray]:
    """Emission probabilities and their logs, optionally floored at ``clamp``."""
    if clamp < 0.0:
        raise ValueError(f"clamp must be non-negative, got {clamp}")
    pc = np.maximum(p, clamp) if clamp > 0.0 else p
    with np.errstate(divide="ignore"):
        return pc, np.log(pc)


def _emission_grad(mass: np.ndarray, p: np.ndarray, pc: np.ndarray, clamp: float) -> np.ndarray:
    """Gradient of -log Z with respect to ``p`` given posterior level mass.

    dL/dp[i, l] = -P(level_i = l) / p[i, l]; entries at zero probability (or
    below the clamp floor, where the loss is flat) get gradient 0.
    """
    active = p >= clamp if clamp > 0.0 else p > 0.0
    denom = np.where(pc > 0.0, pc, 1.0)
    return np.where(active, -mass / denom, 0.0)


def unsupervised_loss(params: ParamsOrTable, p, clamp: float = 0.0) -> CrfLossResult:
    """Regularity loss: negative log total probability of all level sequences.

    ``p`` holds per-tatum level distributions, shape (N, L + 1).  With
    ``clamp`` > 0 emission probabilities are floored at that value before the
    log, which keeps the loss finite for training; the default scores zeros
    exactly (a zero-probability level annihilates every path through it).
    """
    table = _as_table(params)
    mat = as_prob_matrix(p, table.num_layers)
    pc, log_emit = _log_clamped(mat, clamp)
    log_z, mass = _forward_backward(table, log_emit[None])
    if not np.isfinite(log_z[0]):
        return CrfLossResult(loss=math.inf, grad=None)
    return CrfLossResult(
        loss=float(-log_z[0]), grad=_emission_grad(mass[0], mat, pc, clamp)
    )


def consistency_loss(
    params: ParamsOrTable, p1, p2, clamp: float = 0.0
) -> ConsistencyLossResult:
    """Agreement loss between two tracks of the same song.

    Identical to :func:`unsupervised_loss` but with the product of the two
    tracks' level probabilities as the emission, so only level sequences that
    both tracks support keep probability mass.
    """
    table = _as_table(params)
    mat1 = as_prob_matrix(p1, table.num_layers)
    mat2 = as_prob_matrix(p2, table.num_layers)
    if mat1.shape != mat2.shape:
        raise ValueError(f"track shapes disagree: {mat1.shape} vs {mat2.shape}")
    pc1, _ = _log_clamped(mat1, clamp)
    pc2, _ = _log_clamped(mat2, clamp)
    with np.errstate(divide="ignore"):
        log_emit = np.log(pc1) + np.log(pc2)
    log_z, mass = _forward_backward(table, log_emit[None])
    if not np.isfinite(log_z[0]):
        return ConsistencyLossResult(loss=math.inf, grad1=None, grad2=None)
    return ConsistencyLossResult(
        loss=float(-log_z[0]),
        grad1=_emission_grad(mass[0], mat1, pc1, clamp),
        grad2=_emission_grad(mass[0], mat2, pc2, clamp),
    )


def viterbi_decode(params: ParamsOrTable, p) -> LevelSequence:
    """Most probable boundary-level sequence under the CRF.

    Runs a max-plus recursion from the last tatum backward so that ties are
    resolved while reading the path out forward: among equal-score choices
    the higher boundary level wins, and among equal-score initial states the
    higher boundary level, then the lower state index.
    """
    table = _as_table(params)
    mat = as_prob_matrix(p, table.num_layers)
    steps = mat.shape[0]
    size = table.num_states
    levels = table.num_layers + 1
    with np.errstate(divide="ignore"):
        log_emit = np.log(mat)
    emit_state = log_emit[:, table.state_level]

    eta = emit_state[steps - 1].copy()
    choice = np.empty((max(steps - 1, 0), size), dtype=np.int8)
    rows = np.arange(size)
    for i in range(steps - 2, -1, -1):
        cand = table.log_potential + eta[table.successor]
        # Reversed argmax prefers the higher boundary level on ties.
        best = levels - 1 - np.argmax(cand[:, ::-1], axis=1)
        choice[i] = best
        eta = emit_state[i] + cand[rows, best]

    top = eta.max()
    if not np.isfinite(top):
        raise DecodeError("no level sequence has positive probability")
    tied = np.flatnonzero(eta == top)
    tied_levels = table.state_level[tied]
    state = int(tied[tied_levels == tied_levels.max()].min())

    out = np.empty(steps, dtype=np.int64)
    out[0] = table.state_level[state]
    for i in range(steps - 1):
        b = int(choice[i, state])
        out[i + 1] = b
        state = int(table.successor[state, b])
    return LevelSequence(levels=out, num_layers=table.num_layers)


def subsample_to_measure_level(p, downbeat_positions) -> np.ndarray:
    """Fold full-rate level distributions to measure-rate hypermetrical ones.

    Samples ``p`` at the given downbeat positions and merges levels 0..4 into
    the new level 0 (a measure boundary that starts no larger unit), while
    level 4 + k maps to the new level k.  The result drives a CRF over the
    L - 4 hypermetrical layers.
    """
    mat = as_prob_matrix(p)
    num_layers = mat.shape[1] - 1
    if num_layers < 5:
        raise ValueError(
            f"hypermetrical subsampling needs more than 4 layers, got {num_layers}"
        )
    pos = np.asarray(downbeat_positions, dtype=np.int64)
    if pos.ndim != 1:
        raise ValueError(f"positions must be one-dimensional, got shape {pos.shape}")
    if pos.size == 0:
        return np.zeros((0, num_layers - 3))
    if pos.min() < 0 or pos.max() >= mat.shape[0]:
        raise ValueError(
            f"positions must lie in 0..{mat.shape[0] - 1}, got range "
            f"{pos.min()}..{pos.max()}"
        )
    if pos.size > 1 and (np.diff(pos) <= 0).any():
        raise ValueError("positions must be strictly increasing")
    out = np.empty((pos.size, num_layers - 3))
    out[:, 0] = mat[pos, :5].sum(axis=1)
    out[:, 1:] = mat[pos, 5:]
    return out


def _check_brute_size(num_layers: int, steps: int) -> None:
    if (num_layers + 1) ** steps > MAX_BRUTE_SEQUENCES:
        raise ValueError(
            f"brute force over {num_layers + 1}^{steps} level sequences exceeds "
            f"the {MAX_BRUTE_SEQUENCES} cap"
        )


def _enumerate_chunks(levels: int, steps: int):
    """Yield (chunk, levels)-shaped arrays covering all level tuples of length
    ``steps`` in lexicographic order."""
    total = levels**steps
    radix = levels ** np.arange(steps - 1, -1, -1, dtype=np.int64)
    for start in range(0, total, _BRUTE_CHUNK):
        ids = np.arange(start, min(start + _BRUTE_CHUNK, total), dtype=np.int64)
        yield (ids[:, None] // radix[None, :]) % levels


def brute_force_loss(params: ParamsOrTable, p, clamp: float = 0.0) -> float:
    """Loss by explicit enumeration of every level sequence.

    Converts each sequence of boundary levels b_2..b_N, combined with every
    admissible initial state, to a state path via :func:`successor_state`,
    multiplies potentials and emissions in linear space, and sums.  Intended
    as a test oracle for :func:`unsupervised_loss`; capacity is capped at
    (L + 1)^N <= 10^7 sequences.
    """
    table = _as_table(params)
    mat = as_prob_matrix(p, table.num_layers)
    steps = mat.shape[0]
    _check_brute_size(table.num_layers, steps)
    size = table.num_states
    lin_pot = np.exp(table.log_potential)
    pc = np.maximum(mat, clamp) if clamp > 0.0 else mat

    start_prob = pc[0, table.state_level]
    if steps == 1:
        total = math.fsum(start_prob.tolist())
        return float(-np.log(total)) if total > 0.0 else math.inf

    totals = []
    for chunk in _enumerate_chunks(table.num_layers + 1, steps - 1):
        rows = chunk.shape[0]
        state = np.repeat(np.arange(size), rows)
        prob = np.repeat(start_prob, rows)
        for i in range(steps - 1):
            b = np.tile(chunk[:, i], size)
            prob = prob * lin_pot[state, b]
            state = table.successor[state, b]
            prob = prob * pc[i + 1, table.state_level[state]]
        totals.append(float(prob.sum()))
    total = math.fsum(totals)
    return float(-np.log(total)) if total > 0.0 else math.inf


def brute_force_decode(params: ParamsOrTable, p) -> LevelSequence:
    """Best level sequence by explicit enumeration, for testing Viterbi.

    Scores each path with the same backward fold of log terms as the dynamic
    program so that floating-point ties match bitwise, then applies the
    decoder's tie-breaking: higher boundary level at the first tatum, lower
    initial state index, then higher levels at earlier following tatums.
    """
    table = _as_table(params)
    mat = as_prob_matrix(p, table.num_layers)
    steps = mat.shape[0]
    _check_brute_size(table.num_layers, steps)
    size = table.num_states
    with np.errstate(divide="ignore"):
        log_emit = np.log(mat)

    best_key = None
    best_score = -math.inf
    init_levels = table.state_level[np.arange(size)]
    for chunk in _enumerate_chunks(table.num_layers + 1, max(steps - 1, 0)):
        rows = chunk.shape[0]
        state0 = np.repeat(np.arange(size), rows)
        bseq = np.tile(chunk, (size, 1))
        state = state0.copy()
        logw = np.zeros((rows * size, max(steps - 1, 0)))
        path_levels = np.empty((rows * size, steps), dtype=np.int64)
        path_levels[:, 0] = np.repeat(init_levels, rows)
        for i in range(steps - 1):
            b = bseq[:, i]
            logw[:, i] = table.log_potential[state, b]
            state = table.successor[state, b]
            path_levels[:, i + 1] = table.state_level[state]
        score = log_emit[steps - 1, path_levels[:, steps - 1]]
        for i in range(steps - 2, -1, -1):
            score = log_emit[i, path_levels[:, i]] + (logw[:, i] + score)
        top = score.max()
        if top < best_score or not np.isfinite(top):
            continue
        for r in np.flatnonzero(score == top):
            key = (
                int(path_levels[r, 0]),
                -int(state0[r]),
                tuple(int(b) for b in bseq[r]),
            )
            if top > best_score or key > best_key:
                best_score = float(top)
                best_key = key
                best_path = path_levels[r].copy()
    if best_key is None:
        raise DecodeError("no level sequence has positive probability")
    return LevelSequence(levels=best_path, num_layers=table.num_layers)
