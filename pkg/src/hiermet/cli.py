"""Command-line pipeline: synth, train, calibrate, decode, eval.

Every command resolves its configuration as CLI flags > config file >
built-in defaults, prints the resolved values as one JSON line, and writes
output files atomically (write to a temp name, then rename), so a crashed
run never leaves partial artifacts behind.

Exit codes: 0 success, 1 usage or validation, 2 I/O or parse, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import sys
import zipfile
from pathlib import Path

import numpy as np

from hiermet.calibrate import Calibration, apply_offset, calibrate_offset
from hiermet.core import CrfParams, LevelSequence, PianoRoll, default_crf_params
from hiermet.crf import DecodeError, viterbi_decode
from hiermet.evaluate import (
    evaluate_corpus,
    report_csv,
    report_json,
    report_text,
)
from hiermet.ingest import (
    RollFormatError,
    SyntheticConfig,
    build_tatum_grid,
    generate_synthetic,
    load_pianoroll_json,
    quantize,
    save_pianoroll_json,
)
from hiermet.model import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from hiermet.plots import render_report_figure, render_structure_figure
from hiermet.smf import SmfParseError, parse_smf

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    """Bad invocation or unusable inputs (exit code 1)."""


class InputError(Exception):
    """I/O-category failures with a user-facing message (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; remap to this tool's convention
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _save_checkpoint_atomic(path: Path, checkpoint: Checkpoint) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        save_checkpoint(fh, checkpoint)
    os.replace(tmp, path)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"config file does not exist: {path}") from None
    except json.JSONDecodeError as err:
        raise InputError(f"config file {path} is not valid JSON: {err}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """CLI flags > config file > defaults, with unknown keys rejected."""
    file_config = _load_config_file(args.config)
    unknown = sorted(set(file_config) - set(defaults))
    if unknown:
        raise UsageError(f"unknown config file keys: {', '.join(unknown)}")
    resolved = {}
    for key, default in defaults.items():
        value = getattr(args, key, None)
        if value is None:
            value = file_config.get(key, default)
        resolved[key] = value
    return resolved


def _config_hash(resolved: dict) -> str:
    canonical = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _log_config(command: str, resolved: dict) -> None:
    print(json.dumps({"command": command, "config": resolved}, sort_keys=True))


def _dump_json(doc) -> bytes:
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8")


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{what} does not exist: {path}")
    return path


def _load_checkpoint(path) -> Checkpoint:
    path = _require_file(path, "checkpoint")
    try:
        return load_checkpoint(path)
    except (zipfile.BadZipFile, ValueError, KeyError) as err:
        raise InputError(f"cannot read checkpoint {path}: {err}") from None


def _truth_sequence(levels: np.ndarray | None) -> LevelSequence | None:
    if levels is None:
        return None
    return LevelSequence(levels, max(1, int(levels.max(initial=0))))


def _load_corpus(dir_path) -> list[tuple[PianoRoll, LevelSequence | None]]:
    path = Path(dir_path)
    if not path.is_dir():
        raise InputError(f"corpus path does not exist: {path}")
    names = sorted(
        p for p in path.glob("*.json") if p.name not in ("manifest.json", "config.json")
    )
    corpus = []
    for name in names:
        try:
            roll, levels = load_pianoroll_json(name.read_bytes())
        except RollFormatError as err:
            raise InputError(f"{name}: {err}") from None
        corpus.append((roll, _truth_sequence(levels)))
    if not corpus:
        raise UsageError(f"corpus at {path} contains no songs")
    return corpus


def _load_song_file(path: Path) -> tuple[PianoRoll, LevelSequence | None]:
    """Either interchange JSON or a Standard MIDI File."""
    data = path.read_bytes()
    if data[:4] == b"MThd":
        song = parse_smf(data)
        if not song.notes:
            raise UsageError(f"{path} contains no notes")
        grid = build_tatum_grid(song, song.end_tick)
        return quantize(song, grid), None
    try:
        roll, levels = load_pianoroll_json(data)
    except RollFormatError as err:
        raise InputError(f"{path}: {err}") from None
    return roll, _truth_sequence(levels)


def _one_hot(levels: LevelSequence, num_layers: int) -> np.ndarray:
    arr = levels.levels
    if arr.max(initial=0) > num_layers:
        raise UsageError(
            f"annotations reach level {arr.max()}, model has {num_layers} layers"
        )
    mat = np.zeros((arr.shape[0], num_layers + 1))
    mat[np.arange(arr.shape[0]), arr] = 1.0
    return mat


def _dot_diagram(seq: LevelSequence, width: int = 64) -> str:
    """Metrical dot text: a level-l tatum carries l+1 stacked dots."""
    arr = seq.levels
    blocks = []
    for start in range(0, len(arr), width):
        chunk = arr[start : start + width]
        lines = []
        for level in range(seq.num_layers, -1, -1):
            row = "".join("*" if value >= level else " " for value in chunk)
            lines.append(f"level {level} |{row}")
        lines.append(f"{'':8}+{'-' * len(chunk)} tatum {start}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


SYNTH_DEFAULTS = {
    "songs": 10,
    "steps": 256,
    "tracks": 3,
    "levels": 6,
    "density": None,
    "irregularity": 0.0,
    "seed": 0,
    "threads": 1,
}


def cmd_synth(args) -> int:
    resolved = _resolve(args, SYNTH_DEFAULTS)
    config = SyntheticConfig(
        num_layers=resolved["levels"],
        num_songs=resolved["songs"],
        steps_per_song=resolved["steps"],
        tracks_per_song=resolved["tracks"],
        onset_density=resolved["density"],
        irregularity_rate=resolved["irregularity"],
        seed=resolved["seed"],
    )
    # densities resolve inside SyntheticConfig; persist the concrete values
    resolved["density"] = list(config.onset_density)
    _log_config("synth", resolved)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for index, (roll, truth) in enumerate(generate_synthetic(config)):
        name = f"song_{index:04d}.json"
        _write_atomic(out / name, save_pianoroll_json(roll, truth))
        names.append(name)
    manifest = {
        "config": resolved,
        "config_hash": _config_hash(resolved),
        "files": names,
        "seed": resolved["seed"],
    }
    _write_atomic(out / "manifest.json", _dump_json(manifest))
    print(f"wrote {len(names)} songs to {out}")
    return EXIT_OK


TRAIN_DEFAULTS = {
    "levels": 8,
    "epochs": 10,
    "learning_rate": 1e-4,
    "lambda_consistency": 1.0,
    "batch": 1,
    "channels": 32,
    "depth": 6,
    "w_del": 15.0,
    "w_ins": 20.0,
    "hard_layers": None,
    "seed": 0,
    "threads": 1,
}


def cmd_train(args) -> int:
    resolved = _resolve(args, TRAIN_DEFAULTS)
    if resolved["hard_layers"] is None:
        resolved["hard_layers"] = min(4, resolved["levels"])
    _log_config("train", resolved)
    corpus = _load_corpus(args.corpus)
    params = default_crf_params(
        num_layers=resolved["levels"],
        hard_layers=resolved["hard_layers"],
        w_del=resolved["w_del"],
        w_ins=resolved["w_ins"],
    )
    config = TrainConfig(
        learning_rate=resolved["learning_rate"],
        epochs=resolved["epochs"],
        lambda_consistency=resolved["lambda_consistency"],
        batch=resolved["batch"],
        seed=resolved["seed"],
        channels=resolved["channels"],
        depth=resolved["depth"],
    )
    model, loss_log = train([roll for roll, _ in corpus], params, config)
    out = Path(args.out)
    _save_checkpoint_atomic(out, Checkpoint(model, params, config, loss_log))
    sidecar = {"config": resolved, "config_hash": _config_hash(resolved)}
    _write_atomic(out.with_name(out.name + ".config.json"), _dump_json(sidecar))
    final = f", final loss {loss_log[-1]:.6f}" if loss_log else ""
    print(f"wrote checkpoint to {out} ({len(loss_log)} epochs{final})")
    return EXIT_OK


CALIBRATE_DEFAULTS = {
    "max_level": 4,
    "threads": 1,
}


def cmd_calibrate(args) -> int:
    resolved = _resolve(args, CALIBRATE_DEFAULTS)
    _log_config("calibrate", resolved)
    ckpt_path = Path(args.checkpoint)
    checkpoint = _load_checkpoint(ckpt_path)
    song_path = _require_file(args.song, "song")
    roll, truth = _load_song_file(song_path)
    if truth is None:
        raise UsageError(f"{song_path} carries no level annotations to calibrate on")
    p = predict(checkpoint.model, roll)
    calibration = calibrate_offset(
        p, truth, checkpoint.crf_params, max_level=resolved["max_level"]
    )
    checkpoint.calibration = calibration
    checkpoint.calibration_song = song_path.name
    out = Path(args.out) if args.out else ckpt_path
    _save_checkpoint_atomic(out, checkpoint)
    print(
        f"calibrated offset {calibration.offset:+d} "
        f"(F1 {calibration.score:.4f}) -> {out}"
    )
    return EXIT_OK


DECODE_DEFAULTS = {
    "oracle": False,
    "threads": 1,
}


def cmd_decode(args) -> int:
    resolved = _resolve(args, DECODE_DEFAULTS)
    _log_config("decode", resolved)
    checkpoint = _load_checkpoint(args.checkpoint)
    input_path = _require_file(args.input, "input file")
    roll, truth = _load_song_file(input_path)
    num_layers = checkpoint.crf_params.num_layers
    if resolved["oracle"]:
        if truth is None:
            raise UsageError("oracle decoding needs embedded level annotations")
        p = _one_hot(truth, num_layers)
    else:
        p = predict(checkpoint.model, roll)
    offset = checkpoint.calibration.offset if checkpoint.calibration else 0
    decoded = apply_offset(viterbi_decode(checkpoint.crf_params, p), offset)

    out = Path(args.out)
    analysis = {
        "version": 1,
        "tatum": "sixteenth",
        "num_steps": roll.num_steps,
        "num_layers": num_layers,
        "offset": offset,
        "levels": [int(x) for x in decoded.levels],
        "probs": [[float(v) for v in row] for row in p],
        "config": resolved,
    }
    _write_atomic(out / "analysis.json", _dump_json(analysis))
    _write_atomic(out / "analysis.txt", _dot_diagram(decoded).encode("utf-8"))
    buf = io.BytesIO()
    render_structure_figure(decoded, buf, truth=truth)
    _write_atomic(out / "analysis.png", buf.getvalue())
    print(f"wrote analysis for {roll.num_steps} tatums to {out}")
    return EXIT_OK


EVAL_DEFAULTS = {
    "threshold": 0.25,
    "threads": 1,
}


def cmd_eval(args) -> int:
    resolved = _resolve(args, EVAL_DEFAULTS)
    _log_config("eval", resolved)
    checkpoint = _load_checkpoint(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    if all(truth is None for _, truth in corpus):
        raise UsageError(f"no songs in {args.corpus} carry level annotations")
    report = evaluate_corpus(
        checkpoint.model,
        checkpoint.calibration,
        corpus,
        checkpoint.crf_params,
        peak_threshold=resolved["threshold"],
        threads=resolved["threads"],
    )
    out = Path(args.out)
    _write_atomic(out / "report.json", _dump_json(report_json(report)))
    _write_atomic(out / "report.txt", report_text(report).encode("utf-8"))
    _write_atomic(out / "report.csv", report_csv(report).encode("utf-8"))
    buf = io.BytesIO()
    render_report_figure(report, buf)
    _write_atomic(out / "report.png", buf.getvalue())
    sidecar = {"config": resolved, "config_hash": _config_hash(resolved)}
    _write_atomic(out / "config.json", _dump_json(sidecar))
    print(report_text(report), end="")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser, seed: bool = False) -> None:
    parser.add_argument("--config", metavar="PATH", help="JSON file with defaults")
    parser.add_argument("--threads", type=int, metavar="K", help="worker threads")
    if seed:
        parser.add_argument("--seed", type=int, help="random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="hiermet",
        description="hierarchical metrical structure analysis for symbolic music",
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a labeled synthetic corpus")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--songs", type=int, help="number of songs")
    p.add_argument("--steps", type=int, help="tatums per song")
    p.add_argument("--tracks", type=int, help="tracks per song")
    p.add_argument("--levels", type=int, metavar="L", help="hierarchy layers")
    p.add_argument("--density", type=float, nargs="+", help="onset density per level")
    p.add_argument("--irregularity", type=float, help="hypermeasure splice rate")
    _add_common(p, seed=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="self-supervised training")
    p.add_argument("--corpus", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="FILE")
    p.add_argument("--levels", type=int, metavar="L", help="hierarchy layers")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    p.add_argument("--lambda-consistency", dest="lambda_consistency", type=float)
    p.add_argument("--batch", type=int, help="songs per optimizer step")
    p.add_argument("--channels", type=int, help="conv channel width")
    p.add_argument("--depth", type=int, help="conv block count")
    p.add_argument("--w-del", dest="w_del", type=float, help="deletion penalty")
    p.add_argument("--w-ins", dest="w_ins", type=float, help="insertion penalty")
    p.add_argument(
        "--hard-layers",
        dest="hard_layers",
        type=int,
        help="layers 1..K get infinite penalties",
    )
    _add_common(p, seed=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="fit the global offset on one song")
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument("--song", required=True, metavar="FILE", help="annotated song JSON")
    p.add_argument("--out", metavar="FILE", help="default: rewrite checkpoint")
    p.add_argument("--max-level", dest="max_level", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("decode", help="analyze one song")
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument("--input", required=True, metavar="FILE", help="SMF or roll JSON")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument(
        "--oracle",
        action="store_const",
        const=True,
        help="decode embedded annotations instead of model output",
    )
    _add_common(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score an annotated corpus")
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument("--corpus", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--threshold", type=float, help="downbeat peak threshold")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    if not hasattr(args, "func"):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (SmfParseError, RollFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except InputError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except (DecodeError, FloatingPointError, ArithmeticError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
