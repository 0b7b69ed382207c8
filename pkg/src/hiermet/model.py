"""Differentiable emission model mapping piano rolls to level distributions.

Each track runs through a stack of dilated 1-D convolutions (kernel 3,
same padding, ReLU, residual where widths match) followed by a linear head
producing L + 1 level logits and one confidence score per tatum.  Tracks are
pooled by confidence-weighted averaging of their softmaxed logits.  Gradients
are computed by hand-written reverse mode so that training needs nothing
beyond numpy; the CRF losses supply d loss / d p.

All arithmetic is float64.  Feature arrays are laid out (tracks, channels,
steps) so convolutions reduce to one matmul per block over an im2col view.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from hiermet.calibrate import Calibration
from hiermet.core import (
    NUM_PITCHES,
    ONSET,
    SILENT,
    CrfParams,
    PianoRoll,
    TrackRoll,
)
from hiermet.crf import ParamsOrTable, _as_table, consistency_loss, unsupervised_loss

INPUT_CHANNELS = 2 * NUM_PITCHES

# Emission clamp used on the training path so transient zero predictions
# cannot produce infinite losses or NaN gradients.
TRAIN_CLAMP = 1e-12

CHECKPOINT_VERSION = 1


@dataclass
class EmissionModel:
    """Network parameters.  ``num_layers`` counts conv blocks (the depth D);
    the CRF layer count L is implied by the head size L + 2."""

    conv_weights: list[np.ndarray]
    conv_biases: list[np.ndarray]
    dilations: list[int]
    head_weight: np.ndarray
    head_bias: np.ndarray

    def __post_init__(self) -> None:
        if not self.conv_weights:
            raise ValueError("need at least one conv block")
        if not (len(self.conv_weights) == len(self.conv_biases) == len(self.dilations)):
            raise ValueError("conv block lists disagree in length")
        if self.head_weight.shape[0] != self.head_bias.shape[0]:
            raise ValueError("head weight and bias disagree")
        if self.head_weight.shape[0] < 3:
            raise ValueError("head must emit at least 2 level logits plus confidence")

    @property
    def num_layers(self) -> int:
        return len(self.conv_weights)

    @property
    def channel_width(self) -> int:
        return self.conv_weights[-1].shape[0]

    @property
    def num_crf_layers(self) -> int:
        return self.head_weight.shape[0] - 2

    @property
    def receptive_field(self) -> int:
        return 1 + 2 * sum(self.dilations)

    def parameters(self) -> list[np.ndarray]:
        """All tensors in declared order: conv weight/bias pairs, then head."""
        out: list[np.ndarray] = []
        for w, b in zip(self.conv_weights, self.conv_biases):
            out.append(w)
            out.append(b)
        out.append(self.head_weight)
        out.append(self.head_bias)
        return out


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 10
    lambda_consistency: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 1
    seed: int = 0
    channels: int = 32
    depth: int = 6

    def __post_init__(self) -> None:
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be non-negative")
        for name in ("adam_beta1", "adam_beta2"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie strictly between 0 and 1")
        if self.adam_eps <= 0.0:
            raise ValueError("adam_eps must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if self.lambda_consistency < 0.0:
            raise ValueError("lambda_consistency must be non-negative")
        if self.channels < 1 or self.depth < 1:
            raise ValueError("channels and depth must be at least 1")


def init_model(
    num_crf_layers: int, config: TrainConfig, rng: np.random.Generator
) -> EmissionModel:
    """Fresh model with uniform +-1/sqrt(fan_in) weights.

    Block d uses dilation 2^d; block 0 maps the 256 input channels to the
    working width, later blocks keep the width and gain residual connections.
    """
    conv_weights = []
    conv_biases = []
    dilations = []
    c_in = INPUT_CHANNELS
    for d in range(config.depth):
        bound = 1.0 / math.sqrt(c_in * 3)
        conv_weights.append(rng.uniform(-bound, bound, size=(config.channels, c_in, 3)))
        conv_biases.append(rng.uniform(-bound, bound, size=config.channels))
        dilations.append(2**d)
        c_in = config.channels
    bound = 1.0 / math.sqrt(config.channels)
    head_weight = rng.uniform(
        -bound, bound, size=(num_crf_layers + 2, config.channels)
    )
    head_bias = rng.uniform(-bound, bound, size=num_crf_layers + 2)
    return EmissionModel(conv_weights, conv_biases, dilations, head_weight, head_bias)


def encode_track(track: TrackRoll) -> np.ndarray:
    """Two input channels per pitch: onset flag and sounding flag, (256, N)."""
    onset = (track.cells == ONSET).T
    sounding = (track.cells != SILENT).T
    return np.concatenate([onset, sounding], axis=0).astype(np.float64)


def _im2col(x: np.ndarray, dilation: int) -> np.ndarray:
    """Gather the 3 dilated taps per step: (T, C, N) -> (T, C * 3, N)."""
    tracks, channels, steps = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (dilation, dilation)))
    cols = np.empty((tracks, channels, 3, steps))
    for m in range(3):
        cols[:, :, m] = padded[:, :, m * dilation : m * dilation + steps]
    return cols.reshape(tracks, channels * 3, steps)


def _forward_stack(model: EmissionModel, x: np.ndarray):
    """Run the conv stack; returns final features and per-block caches."""
    caches = []
    feat = x
    for w, b, dilation in zip(model.conv_weights, model.conv_biases, model.dilations):
        cols = _im2col(feat, dilation)
        w2 = w.reshape(w.shape[0], -1)
        pre = np.matmul(w2, cols) + b[:, None]
        mask = pre > 0.0
        post = np.where(mask, pre, 0.0)
        residual = w.shape[1] == w.shape[0]
        out = post + feat if residual else post
        caches.append((feat, cols, mask, residual))
        feat = out
    return feat, caches


def _backward_stack(model: EmissionModel, caches, d_feat: np.ndarray):
    """Propagate d loss / d features back through the conv stack."""
    grads_w = [None] * model.num_layers
    grads_b = [None] * model.num_layers
    for d in range(model.num_layers - 1, -1, -1):
        feat_in, cols, mask, residual = caches[d]
        w = model.conv_weights[d]
        dilation = model.dilations[d]
        d_pre = np.where(mask, d_feat, 0.0)
        grads_b[d] = d_pre.sum(axis=(0, 2))
        grads_w[d] = np.matmul(d_pre, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        d_cols = np.matmul(w.reshape(w.shape[0], -1).T, d_pre)
        tracks, _, steps = feat_in.shape
        d_padded = np.zeros((tracks, feat_in.shape[1], steps + 2 * dilation))
        d_cols = d_cols.reshape(tracks, feat_in.shape[1], 3, steps)
        for m in range(3):
            d_padded[:, :, m * dilation : m * dilation + steps] += d_cols[:, :, m]
        d_in = d_padded[:, :, dilation : dilation + steps]
        if residual:
            d_in = d_in + d_feat
        d_feat = d_in
    return grads_w, grads_b


def _forward_song(model: EmissionModel, song: PianoRoll):
    """Logits (T, N, L + 1), confidences (T, N), features and caches."""
    x = np.stack([encode_track(t) for t in song.tracks])
    feat, caches = _forward_stack(model, x)
    head_out = np.matmul(model.head_weight, feat) + model.head_bias[None, :, None]
    levels = model.num_crf_layers + 1
    logits = head_out[:, :levels].transpose(0, 2, 1)
    confidence = head_out[:, levels]
    return logits, confidence, feat, caches


def track_forward(model: EmissionModel, track: TrackRoll):
    """Level logits (N, L + 1) and confidence scores (N,) for one track."""
    roll = PianoRoll((track,))
    logits, confidence, _, _ = _forward_song(model, roll)
    return logits[0], confidence[0]


def _softmax(values: np.ndarray, axis: int) -> np.ndarray:
    shifted = values - values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def pool_tracks(logits_list, confidence_list) -> np.ndarray:
    """Confidence-weighted mixture of per-track level distributions.

    Track weights are a per-step softmax over the confidence scores; the
    result rows are level distributions summing to 1.
    """
    if len(logits_list) == 0:
        raise ValueError("need at least one track")
    if len(logits_list) != len(confidence_list):
        raise ValueError("logits and confidence lists disagree in length")
    logits = np.stack([np.asarray(h, dtype=np.float64) for h in logits_list])
    confidence = np.stack([np.asarray(c, dtype=np.float64) for c in confidence_list])
    if logits.shape[:2] != confidence.shape:
        raise ValueError(
            f"shape mismatch: logits {logits.shape} vs confidence {confidence.shape}"
        )
    weights = _softmax(confidence, axis=0)
    dists = _softmax(logits, axis=2)
    return (weights[:, :, None] * dists).sum(axis=0)


def predict(model: EmissionModel, song: PianoRoll) -> np.ndarray:
    """Pooled per-tatum level distributions, shape (N, L + 1)."""
    logits, confidence, _, _ = _forward_song(model, song)
    return pool_tracks(list(logits), list(confidence))


def loss_and_gradients(
    model: EmissionModel,
    song: PianoRoll,
    params: ParamsOrTable,
    lambda_consistency: float,
    pair: tuple[int, int] | None = None,
    rng: np.random.Generator | None = None,
    clamp: float = TRAIN_CLAMP,
):
    """Training loss and gradients for every model parameter.

    The loss is the regularity loss of the pooled prediction plus
    ``lambda_consistency`` times the consistency loss of one track pair
    (sampled with ``rng`` or given explicitly; skipped when the song has a
    single track).  Returns ``(loss, grads)`` with grads matching
    ``model.parameters()`` order.
    """
    table = _as_table(params)
    if table.num_layers != model.num_crf_layers:
        raise ValueError(
            f"model emits {model.num_crf_layers} layers but params have {table.num_layers}"
        )
    logits, confidence, feat, caches = _forward_song(model, song)
    tracks, steps, levels = logits.shape
    weights = _softmax(confidence, axis=0)
    dists = _softmax(logits, axis=2)
    pooled = (weights[:, :, None] * dists).sum(axis=0)

    result = unsupervised_loss(table, pooled, clamp=clamp)
    if result.grad is None:
        raise FloatingPointError("regularity loss is infinite; degenerate prediction")
    loss = result.loss
    d_pooled = result.grad

    d_dists = weights[:, :, None] * d_pooled[None]
    d_weights = (d_pooled[None] * dists).sum(axis=2)

    use_pair = lambda_consistency > 0.0 and tracks >= 2
    if use_pair:
        if pair is None:
            if rng is not None:
                chosen = rng.choice(tracks, size=2, replace=False)
                pair = (int(chosen[0]), int(chosen[1]))
            else:
                pair = (0, 1)
        t1, t2 = pair
        if t1 == t2 or not (0 <= t1 < tracks and 0 <= t2 < tracks):
            raise ValueError(f"invalid track pair {pair} for {tracks} tracks")
        pair_result = consistency_loss(table, dists[t1], dists[t2], clamp=clamp)
        if pair_result.grad1 is None:
            raise FloatingPointError("consistency loss is infinite; degenerate prediction")
        loss = loss + lambda_consistency * pair_result.loss
        d_dists[t1] += lambda_consistency * pair_result.grad1
        d_dists[t2] += lambda_consistency * pair_result.grad2

    # Softmax backward, rowwise over levels and stepwise over tracks.
    d_logits = dists * (d_dists - (d_dists * dists).sum(axis=2, keepdims=True))
    d_confidence = weights * (d_weights - (d_weights * weights).sum(axis=0, keepdims=True))

    d_head_out = np.empty((tracks, levels + 1, steps))
    d_head_out[:, :levels] = d_logits.transpose(0, 2, 1)
    d_head_out[:, levels] = d_confidence
    d_head_w = np.matmul(d_head_out, feat.transpose(0, 2, 1)).sum(axis=0)
    d_head_b = d_head_out.sum(axis=(0, 2))
    d_feat = np.matmul(model.head_weight.T, d_head_out)

    grads_w, grads_b = _backward_stack(model, caches, d_feat)
    grads: list[np.ndarray] = []
    for gw, gb in zip(grads_w, grads_b):
        grads.append(gw)
        grads.append(gb)
    grads.append(d_head_w)
    grads.append(d_head_b)
    return float(loss), grads


@dataclass
class AdamState:
    """First and second moment accumulators, one pair per parameter."""

    step: int
    first: list[np.ndarray]
    second: list[np.ndarray]

    @classmethod
    def for_parameters(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(
            step=0,
            first=[np.zeros_like(p) for p in params],
            second=[np.zeros_like(p) for p in params],
        )


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> None:
    """One Adam update with bias correction; parameters change in place."""
    if len(params) != len(grads) or len(params) != len(state.first):
        raise ValueError("parameter, gradient and state counts disagree")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {p.shape}")
    state.step += 1
    bias1 = 1.0 - config.adam_beta1**state.step
    bias2 = 1.0 - config.adam_beta2**state.step
    for p, g, m, v in zip(params, grads, state.first, state.second):
        m *= config.adam_beta1
        m += (1.0 - config.adam_beta1) * g
        v *= config.adam_beta2
        v += (1.0 - config.adam_beta2) * np.square(g)
        p -= config.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + config.adam_eps)


def train(
    dataset: Sequence[PianoRoll], params: CrfParams, config: TrainConfig
) -> tuple[EmissionModel, list[float]]:
    """Self-supervised training; returns the model and per-epoch mean losses.

    Deterministic for a fixed seed: initialization, song order and
    consistency-pair sampling all come from one seeded generator.  Per-song
    losses are normalized by song length before aggregation so long songs do
    not dominate.
    """
    if not dataset:
        raise ValueError("dataset must not be empty")
    rng = np.random.default_rng(config.seed)
    table = _as_table(params)
    model = init_model(params.num_layers, config, rng)
    adam = AdamState.for_parameters(model.parameters())
    parameters = model.parameters()
    loss_log: list[float] = []
    for _ in range(config.epochs):
        order = rng.permutation(len(dataset))
        epoch_losses: list[float] = []
        for start in range(0, len(order), config.batch):
            chunk = order[start : start + config.batch]
            accum = [np.zeros_like(p) for p in parameters]
            for idx in chunk:
                song = dataset[int(idx)]
                loss, grads = loss_and_gradients(
                    model, song, table, config.lambda_consistency, rng=rng
                )
                scale = 1.0 / (song.num_steps * len(chunk))
                for a, g in zip(accum, grads):
                    a += scale * g
                epoch_losses.append(loss / song.num_steps)
            adam_step(parameters, accum, adam, config)
        loss_log.append(float(np.mean(epoch_losses)))
    return model, loss_log


@dataclass
class Checkpoint:
    model: EmissionModel
    crf_params: CrfParams
    train_config: TrainConfig
    loss_log: list[float]
    calibration: Calibration | None = None
    calibration_song: str | None = None


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    """Write a versioned npz archive; layout documented in the README."""
    meta = {
        "train_config": asdict(checkpoint.train_config),
        "num_crf_layers": checkpoint.crf_params.num_layers,
        "calibration": None
        if checkpoint.calibration is None
        else {
            "offset": checkpoint.calibration.offset,
            "score": checkpoint.calibration.score,
            "song": checkpoint.calibration_song,
        },
    }
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION, dtype=np.int64),
        "meta_json": np.frombuffer(
            json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
        ),
        "dilations": np.asarray(checkpoint.model.dilations, dtype=np.int64),
        "head_w": checkpoint.model.head_weight,
        "head_b": checkpoint.model.head_bias,
        "w_del": checkpoint.crf_params.w_del,
        "w_ins": checkpoint.crf_params.w_ins,
        "loss_log": np.asarray(checkpoint.loss_log, dtype=np.float64),
    }
    for d, (w, b) in enumerate(
        zip(checkpoint.model.conv_weights, checkpoint.model.conv_biases)
    ):
        arrays[f"conv_w_{d:02d}"] = w
        arrays[f"conv_b_{d:02d}"] = b
    np.savez(path, **arrays)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )
        meta = json.loads(bytes(data["meta_json"]).decode("utf-8"))
        config = TrainConfig(**meta["train_config"])
        dilations = [int(d) for d in data["dilations"]]
        conv_weights = [np.array(data[f"conv_w_{d:02d}"]) for d in range(len(dilations))]
        conv_biases = [np.array(data[f"conv_b_{d:02d}"]) for d in range(len(dilations))]
        model = EmissionModel(
            conv_weights,
            conv_biases,
            dilations,
            np.array(data["head_w"]),
            np.array(data["head_b"]),
        )
        crf_params = CrfParams(
            num_layers=int(meta["num_crf_layers"]),
            w_del=np.array(data["w_del"]),
            w_ins=np.array(data["w_ins"]),
        )
        loss_log = [float(x) for x in data["loss_log"]]
        calibration = None
        calibration_song = None
        if meta["calibration"] is not None:
            calibration = Calibration(
                offset=int(meta["calibration"]["offset"]),
                score=float(meta["calibration"]["score"]),
            )
            calibration_song = meta["calibration"]["song"]
    return Checkpoint(
        model=model,
        crf_params=crf_params,
        train_config=config,
        loss_log=loss_log,
        calibration=calibration,
        calibration_song=calibration_song,
    )
