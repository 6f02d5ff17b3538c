"""Batch command-line interface: synth, segment, train, eval, ablate.

Exit codes: 0 success, 2 config/usage, 3 output safety, 4 data, 5 compatibility.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

from .data_io import InvariantViolation, Manifest, MissingDialogue, TensorFileError
from .evaluation import ReportRow, SynonymMap, emit_report
from .segmentation import extract_segments, fixed_windows, map_span
from .synth import SpecInvalid, load_spec, synth_generate
from .training import (
    VARIANT_NAMES,
    VARIANTS,
    CheckpointMismatch,
    ConfigError,
    DataError,
    TrainConfig,
    evaluate,
    load_checkpoint,
    run_ablation,
    run_training,
    save_checkpoint,
)

EXIT_OK, EXIT_USAGE, EXIT_UNSAFE, EXIT_DATA, EXIT_COMPAT = 0, 2, 3, 4, 5

log = logging.getLogger("acoustemo")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# Config files
# --------------------------------------------------------------------------


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; later keys win."""
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config not found: {path}", EXIT_USAGE)
    values: dict[str, str] = {}
    for line_no, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{line_no}: expected key = value", EXIT_USAGE)
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def merge_config(path, overrides: dict[str, str]) -> TrainConfig:
    values = read_config_file(path) if path else {}
    values.update(overrides)
    try:
        cfg = TrainConfig.from_mapping(values)
        cfg.validate()
    except ConfigError as exc:
        if str(exc) == "seed required":
            raise CliError("seed required", EXIT_USAGE) from exc
        raise CliError(f"invalid config field {exc.field_name!r}: {exc}", EXIT_USAGE) from exc
    return cfg


def _parse_sets(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise CliError(f"--set expects KEY=VALUE, got {pair!r}", EXIT_USAGE)
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_manifest(path) -> Manifest:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"manifest not found: {path}", EXIT_DATA)
    try:
        return Manifest.load(p)
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"unreadable manifest {path}: {exc}", EXIT_DATA) from exc


class _LogFile:
    def __init__(self, path, timestamps: bool):
        self.fh = open(path, "w", encoding="utf-8", newline="\n")
        self.timestamps = timestamps

    def __call__(self, line: str) -> None:
        if self.timestamps:
            line = time.strftime("%Y-%m-%dT%H:%M:%S ") + line
        self.fh.write(line + "\n")

    def close(self) -> None:
        self.fh.close()


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.is_file():
        raise CliError(f"spec not found: {args.spec}", EXIT_USAGE)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"output directory not empty: {args.out} (use --force)", EXIT_UNSAFE)
    try:
        spec = load_spec(spec_path)
    except json.JSONDecodeError as exc:
        raise CliError(f"spec is not valid JSON: {exc}", EXIT_USAGE) from exc
    except (SpecInvalid, TypeError) as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    manifest = synth_generate(spec, out)
    n_train, n_test = len(manifest.ids("train")), len(manifest.ids("test"))
    print(f"wrote {len(manifest.entries)} dialogues ({n_train} train, {n_test} test) to {out}; "
          f"global-mean class difference {manifest.meta['global_mean_difference_se']:.3g} SE")
    return EXIT_OK


def cmd_segment(args) -> int:
    manifest = _load_manifest(args.manifest)
    try:
        dlg = manifest.load_dialogue(args.dialogue)
    except MissingDialogue as exc:
        raise CliError(f"unknown dialogue: {args.dialogue}", EXIT_DATA) from exc
    seq = dlg.sequence
    print(f"dialogue {dlg.dialogue_id}: {seq.length} frames at f_s={float(seq.f_s):g} Hz "
          f"({float(seq.duration_seconds):.3f} s), d={seq.dim}")
    if not dlg.utterances:
        print("no utterances; global path only")
    for span, clamped in zip(dlg.utterances, dlg.clamped):
        fr = map_span(span, seq.f_s, seq.length)
        flag = "  clamped" if clamped else ""
        print(f"utt {span.index}\t{span.t_start:.3f}-{span.t_end:.3f} s\tframes [{fr.i_start}, {fr.i_end})"
              f"\t{fr.length} frames{flag}")
    if args.fixed_window is not None:
        if args.fixed_window <= 0:
            raise CliError("--fixed-window must be positive", EXIT_USAGE)
        windows = fixed_windows(seq, args.fixed_window)
        edges = {w.i_start for w in windows} | {w.i_end for w in windows}
        for k, w in enumerate(windows):
            t0, t1 = w.i_start / seq.f_s, w.i_end / seq.f_s
            print(f"win {k}\t{float(t0):.3f}-{float(t1):.3f} s\tframes [{w.i_start}, {w.i_end})")
        bounds = [b for s in extract_segments(seq, dlg.utterances) for b in (s.frames.i_start, s.frames.i_end)]
        mismatches = sum(1 for b in bounds if b not in edges)
        print(f"boundary mismatches: {mismatches} of {len(bounds)} utterance boundaries")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = _parse_sets(args.set)
    if args.variant:
        overrides["variant"] = args.variant
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg = merge_config(args.config, overrides)
    manifest = _load_manifest(args.manifest)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(out.suffix + ".log")
    sink = _LogFile(log_path, timestamps=not args.no_timestamps)
    try:
        result = run_training(cfg, manifest, on_step=sink)
        for epoch, loss in enumerate(result.epoch_losses, start=1):
            sink(f"# epoch {epoch} mean_loss={loss:.6f}")
    finally:
        sink.close()
    save_checkpoint(result.model, out)
    losses = " ".join(f"{x:.4f}" for x in result.epoch_losses)
    print(f"variant {cfg.variant}: epoch losses {losses}; checkpoint {out}; log {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise CliError(f"checkpoint not found: {args.checkpoint}", EXIT_DATA) from exc
    except (CheckpointMismatch, TensorFileError, ConfigError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"checkpoint incompatible: {exc}", EXIT_COMPAT) from exc
    manifest = _load_manifest(args.manifest)
    if not manifest.ids(args.split):
        raise CliError("no evaluation samples", EXIT_DATA)
    dims = {manifest.load_dialogue(d).sequence.dim for d in manifest.ids(args.split)}
    if dims != {model.d_in}:
        raise CliError(f"checkpoint expects feature dim {model.d_in}, manifest has {sorted(dims)}",
                       EXIT_COMPAT)
    syn = SynonymMap.load(args.synonyms) if args.synonyms else None
    acc, rec, _ = evaluate(model, manifest, args.split, syn)
    name = VARIANT_NAMES.get(model.cfg.variant, model.cfg.variant)
    print(emit_report([ReportRow(name, acc, rec)], title=f"Evaluation ({args.split} split)"), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    overrides = _parse_sets(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg = merge_config(args.config, overrides)
    manifest = _load_manifest(args.manifest)
    if not manifest.ids("test"):
        raise CliError("no evaluation samples", EXIT_DATA)
    syn = SynonymMap.load(args.synonyms) if args.synonyms else None
    result = run_ablation(cfg, manifest, syn)
    report = result.report()
    print(report, end="")
    if args.out:
        Path(args.out).write_text(report, encoding="utf-8")
    return EXIT_OK


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acoustemo", description=__doc__.splitlines()[0])
    parser.add_argument("--no-timestamps", action="store_true",
                        help="omit wall-clock timestamps from logs (for golden-file tests)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic tremor corpus")
    p.add_argument("--spec", required=True, help="JSON generator spec (must contain a seed)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment", help="print utterance (and optional fixed-window) frame spans")
    p.add_argument("--manifest", required=True)
    p.add_argument("--dialogue", required=True)
    p.add_argument("--fixed-window", type=float, default=None, metavar="SECONDS")
    p.set_defaults(func=cmd_segment)

    keys = ", ".join(f.name for f in fields(TrainConfig))
    for name, func, helptext in (("train", cmd_train, "train one variant"),
                                 ("ablate", cmd_ablate, "train and evaluate all four variants")):
        p = sub.add_parser(name, help=helptext, epilog=f"config keys: {keys}")
        p.add_argument("--manifest", required=True)
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None, help="overrides the config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
        if name == "train":
            p.add_argument("--variant", choices=VARIANTS, default=None)
            p.add_argument("--out", required=True, help="checkpoint path")
            p.add_argument("--log", default=None, help="log path (default: <out>.log)")
        else:
            p.add_argument("--synonyms", default=None)
            p.add_argument("--out", default=None, help="also write the report here")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="decode and score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--synonyms", default=None, help="synonym groups, one comma-separated group per line")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = os.environ.get("ACOUSTEMO_THREADS")
    if threads is not None and not (threads.isdigit() and int(threads) > 0):
        print(f"error: ACOUSTEMO_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DataError, InvariantViolation, MissingDialogue, TensorFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
