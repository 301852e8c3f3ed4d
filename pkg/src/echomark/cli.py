"""
Command-line interface.

``echomark <command> ...`` with commands synth, transfer, embed, detect,
estimate, eval, seq-embed, seq-detect and noise-sweep. Shared settings
(seed, key, gain, tau, chunk length, output directory, iteration budget,
workers) can come from flags, from a ``--config`` file (JSON, or
``key = value`` lines) or from built-in defaults, in that order of
precedence. ``ECHOMARK_SEED`` is the seed fallback when neither flag nor
config sets one.

Exit codes: 0 success, 2 input error, 3 format error, 4 no convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, plots
from .acoustics import analyze
from .dsp import Waveform, convolve, derive_seed, generate_noise, mix_at_snr, read_wav, write_wav
from .errors import ConvergenceError, EchoMarkError, FormatError, InputError
from .estimator import FitOptions, fit_from_reverberant, fit_to_rir
from .pipeline import EvalConfig, read_manifest, run_manifest
from .report import build_report, items_csv
from .rir import OCTAVE_CENTERS_HZ, ParametricRir, from_t60s, init_params, render
from .watermark import (MAX_BITS, EmbedOptions, WatermarkMessage, decode_from_audio,
                        decode_from_rir, embed, format_bits, parse_bits, parse_key,
                        sequential_decode, sequential_embed)

log = logging.getLogger("echomark")

DEFAULTS = {
    "seed": 0,
    "key": "00000000005ec2e7",
    "gain_db": -20.0,
    "tau": 3.0,
    "chunk_s": 2.0,
    "out_dir": ".",
    "max_iters": 2000,
    "workers": 1,
}
_CASTS = {"seed": int, "key": str, "gain_db": float, "tau": float, "chunk_s": float,
          "out_dir": str, "max_iters": int, "workers": int}


def load_config(path) -> dict:
    """Read a JSON object or ``key = value`` lines; unknown keys are rejected."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
        if not isinstance(doc, dict):
            raise FormatError(f"{path}: config must be a JSON object")
    except json.JSONDecodeError:
        doc = {}
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            doc[k] = v.strip("\"'")
    out = {}
    for k, v in doc.items():
        name = k.replace("-", "_")
        if name not in _CASTS:
            raise FormatError(f"{path}: unknown config key {k!r}")
        try:
            out[name] = _CASTS[name](v)
        except (TypeError, ValueError):
            raise FormatError(f"{path}: bad value for {k}: {v!r}") from None
    return out


def resolve_settings(args: argparse.Namespace) -> dict:
    """Merge flag > config file > ECHOMARK_SEED (seed only) > built-in."""
    config = load_config(args.config) if getattr(args, "config", None) else {}
    out = dict(DEFAULTS)
    env_seed = os.environ.get("ECHOMARK_SEED")
    if env_seed is not None:
        try:
            out["seed"] = int(env_seed, 0)
        except ValueError:
            raise InputError(f"ECHOMARK_SEED must be an integer, got {env_seed!r}") from None
    out.update(config)
    for name in DEFAULTS:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    out["key"] = parse_key(out["key"])
    return out


def _out_path(settings: dict, name: Optional[str], default: str) -> Path:
    path = Path(name) if name else Path(settings["out_dir"]) / default
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n")


def _load_rir(path) -> Waveform:
    """An impulse response from a WAV file or a parametric-RIR JSON document."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        return render(ParametricRir.load(path))
    return read_wav(path)


def _bits_arg(text: str) -> tuple:
    try:
        return parse_bits(text)
    except InputError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, s) -> int:
    seed = s["seed"]
    if args.t60:
        t60 = list(args.t60)
        if len(t60) == 1:
            t60 = t60 * len(OCTAVE_CENTERS_HZ)
        if len(t60) != len(OCTAVE_CENTERS_HZ):
            raise InputError(f"give 1 or {len(OCTAVE_CENTERS_HZ)} T60 values")
        late = from_t60s(t60, np.full(len(t60), args.amplitude), tau_s=s["tau"],
                         noise_seed=derive_seed(seed, "late-noise"), length_s=args.length_s)
        params = ParametricRir(init_params(seed, tau_s=s["tau"]).early, late)
    else:
        params = init_params(seed, tau_s=s["tau"], length_s=args.length_s)
    if args.message:
        params = embed(params, WatermarkMessage(args.message, s["key"]), EmbedOptions(s["gain_db"]))
    h = render(params)
    params.save(_out_path(s, args.params, "params.json"))
    write_wav(_out_path(s, args.wav, "rir.wav"), h)
    print(json.dumps({"samples": len(h), "t60_s": analyze(h).t60_s}))
    return 0


def cmd_transfer(args, s) -> int:
    x = read_wav(args.clean)
    h = _load_rir(args.rir)
    y = convolve(x, h)
    if args.snr_db is not None:
        y = mix_at_snr(y, generate_noise("white", len(y), derive_seed(s["seed"], "transfer-noise")),
                       args.snr_db)
    write_wav(_out_path(s, args.out, "transfer.wav"), y)
    return 0


def cmd_embed(args, s) -> int:
    params = ParametricRir.load(args.params)
    marked = embed(params, WatermarkMessage(args.message, s["key"]), EmbedOptions(s["gain_db"]))
    marked.save(_out_path(s, args.out, "params_wm.json"))
    if args.wav:
        write_wav(_out_path(s, args.wav, "rir_wm.wav"), render(marked))
    return 0


def cmd_detect(args, s) -> int:
    opts = EmbedOptions(s["gain_db"], args.threshold)
    if args.clean:
        result = decode_from_audio(read_wav(args.input), read_wav(args.clean), s["key"], args.bits, opts)
    else:
        result = decode_from_rir(_load_rir(args.input), s["key"], args.bits, opts)
    doc = result.to_dict()
    if args.out:
        _write_json(_out_path(s, args.out, "detection.json"), doc)
    print(json.dumps(doc, sort_keys=True))
    return 0


def cmd_estimate(args, s) -> int:
    target = read_wav(args.target)
    init = init_params(derive_seed(s["seed"], "init"), tau_s=s["tau"])
    opts = FitOptions(max_iters=s["max_iters"])
    if args.clean:
        result = fit_from_reverberant(target, read_wav(args.clean), init, opts)
    else:
        result = fit_to_rir(target, init, opts)
    _write_json(_out_path(s, args.out, "fit.json"), result.to_dict())
    if args.trace_csv:
        lines = ["iteration,loss"] + [f"{k},{v!r}" for k, v in enumerate(result.loss_trace)]
        _out_path(s, args.trace_csv, "trace.csv").write_text("\n".join(lines) + "\n")
    if args.wav:
        write_wav(_out_path(s, args.wav, "estimate.wav"), render(result.params))
    if not result.converged:
        raise ConvergenceError(f"fit did not converge after {result.iters_used} iterations")
    return 0


def _eval_config(args, s, snr_override=None) -> EvalConfig:
    return EvalConfig(seed=s["seed"], key=s["key"], gain_db=s["gain_db"], tau_s=s["tau"],
                      max_iters=s["max_iters"], mode=args.mode, negatives=not args.no_negatives,
                      workers=s["workers"], snr_override=snr_override)


def _emit_report(out_dir: Path, results, cfg: EvalConfig, grouped: bool, extra_config=None) -> dict:
    items = [r[0] for r in results]
    config = cfg.to_dict()
    config.update(extra_config or {})
    report = build_report(items, __version__, config, group_by_condition=grouped)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    (out_dir / "report.csv").write_text(items_csv(items))
    sr = 16000
    for k, (item, curves, labels) in enumerate(results):
        (out_dir / f"edc_{k:04d}.svg").write_text(
            plots.edc_overlay(curves, labels, sr, title=f"EDC item {item.index}"))
    truths = [i.t60_true for i in items]
    (out_dir / "scatter_t60.svg").write_text(
        plots.scatter(truths, [i.t60_est for i in items], "T60", "T60 (s)"))
    (out_dir / "scatter_drr.svg").write_text(
        plots.scatter([i.drr_true for i in items], [i.drr_est for i in items], "DRR", "DRR (dB)"))
    conds = list(dict.fromkeys(i.condition for i in items))
    groups = report.groups or {c: build_report([i for i in items if i.condition == c], __version__,
                                               {}).summary for c in conds}
    (out_dir / "ber.svg").write_text(
        plots.bars(conds, [groups[c].ber for c in conds], "BER by condition", "BER"))
    return report.to_dict()


def cmd_eval(args, s) -> int:
    rows = read_manifest(args.manifest)
    cfg = _eval_config(args, s)
    results = run_manifest(rows, cfg)
    doc = _emit_report(Path(s["out_dir"]), results, cfg, grouped=False)
    print(json.dumps(doc["summary"], sort_keys=True))
    return 0


def cmd_noise_sweep(args, s) -> int:
    rows = read_manifest(args.manifest)
    snrs = [float(v) for v in args.snr_list.split(",")]
    results = []
    cfg = None
    for snr in snrs:
        cfg = _eval_config(args, s, snr_override=snr)
        results += run_manifest(rows, cfg)
    doc = _emit_report(Path(s["out_dir"]), results, cfg, grouped=True,
                       extra_config={"snr_list": [("inf" if np.isinf(v) else v) for v in snrs]})
    print(json.dumps({k: v for k, v in doc["groups"].items()}, sort_keys=True))
    return 0


def cmd_seq_embed(args, s) -> int:
    x = read_wav(args.clean)
    base = ParametricRir.load(args.params)
    y = sequential_embed(x, base, args.message, s["key"], s["chunk_s"], args.bits,
                         EmbedOptions(s["gain_db"]))
    write_wav(_out_path(s, args.out, "sequential.wav"), y)
    return 0


def cmd_seq_detect(args, s) -> int:
    y, x = read_wav(args.input), read_wav(args.clean)
    bits, results = sequential_decode(y, x, s["key"], s["chunk_s"], args.bits,
                                      EmbedOptions(s["gain_db"], args.threshold))
    doc = {"bits": format_bits(bits), "chunks": [r.to_dict() for r in results],
           "present": sum(r.present for r in results)}
    if args.out:
        _write_json(_out_path(s, args.out, "sequential.json"), doc)
    print(json.dumps(doc, sort_keys=True))
    return 0


# --------------------------------------------------------------------------
# parser


def _shared(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("shared settings")
    g.add_argument("--seed", type=int, help="master seed (default: $ECHOMARK_SEED or 0)")
    g.add_argument("--key", help="watermark key, up to 16 hex digits")
    g.add_argument("--gain-db", dest="gain_db", type=float, help="watermark level (default -20)")
    g.add_argument("--tau", type=float, help="T60 ceiling of the decay reparameterization, s")
    g.add_argument("--chunk-s", dest="chunk_s", type=float, help="sequential chunk length, s")
    g.add_argument("--out-dir", dest="out_dir", help="directory for default output names")
    g.add_argument("--max-iters", dest="max_iters", type=int, help="optimizer iteration budget")
    g.add_argument("--workers", type=int, help="processes for manifest rows")
    g.add_argument("--config", help="JSON or key=value file with defaults for these settings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="echomark", description=__doc__.split("\n\n")[0].strip())
    parser.add_argument("--version", action="version", version=f"echomark {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a parametric RIR")
    p.add_argument("--t60", type=float, nargs="+", help="one T60 or one per octave band, s")
    p.add_argument("--amplitude", type=float, default=0.1, help="late-field band amplitude")
    p.add_argument("--length-s", type=float, default=2.0, help="late-field length, s")
    p.add_argument("--message", type=_bits_arg, help="embed this bit string")
    p.add_argument("--params", help="output params JSON")
    p.add_argument("--wav", help="output RIR WAV")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("transfer", help="convolve clean audio with an RIR")
    p.add_argument("clean")
    p.add_argument("rir", help="RIR WAV or params JSON")
    p.add_argument("out", nargs="?")
    p.add_argument("--snr-db", type=float)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("embed", help="watermark a parametric RIR")
    p.add_argument("params")
    p.add_argument("--message", type=_bits_arg, required=True)
    p.add_argument("--out")
    p.add_argument("--wav", help="also render the watermarked RIR here")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("detect", help="detect and decode a watermark")
    p.add_argument("input", help="RIR WAV/params JSON, or reverberant WAV with --clean")
    p.add_argument("--clean", help="clean source for informed detection")
    p.add_argument("--bits", type=int, default=MAX_BITS)
    p.add_argument("--threshold", type=float, default=EmbedOptions().threshold)
    p.add_argument("--out")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("estimate", help="fit a parametric RIR")
    p.add_argument("target", help="target RIR WAV, or reverberant WAV with --clean")
    p.add_argument("--clean", help="clean source for informed estimation")
    p.add_argument("--out")
    p.add_argument("--trace-csv")
    p.add_argument("--wav", help="also render the fitted RIR here")
    p.set_defaults(func=cmd_estimate)

    for name, func, hlp in (("eval", cmd_eval, "evaluate a manifest"),
                            ("noise-sweep", cmd_noise_sweep, "evaluate a manifest at several SNRs")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("manifest")
        p.add_argument("--mode", choices=("reverberant", "rir"), default="reverberant")
        p.add_argument("--no-negatives", action="store_true",
                       help="skip decoding unwatermarked transfers")
        if name == "noise-sweep":
            p.add_argument("--snr-list", default="inf,20,10,0")
        p.set_defaults(func=func)

    p = sub.add_parser("seq-embed", help="sequential watermarking of a long source")
    p.add_argument("clean")
    p.add_argument("params")
    p.add_argument("--message", type=_bits_arg, required=True)
    p.add_argument("--bits", type=int, default=MAX_BITS, help="bits per chunk")
    p.add_argument("--out")
    p.set_defaults(func=cmd_seq_embed)

    p = sub.add_parser("seq-detect", help="decode a sequentially watermarked recording")
    p.add_argument("input")
    p.add_argument("clean")
    p.add_argument("--bits", type=int, default=MAX_BITS, help="bits per chunk")
    p.add_argument("--threshold", type=float, default=EmbedOptions().threshold)
    p.add_argument("--out")
    p.set_defaults(func=cmd_seq_detect)

    for action in sub.choices.values():
        _shared(action)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve_settings(args)
        return args.func(args, settings)
    except EchoMarkError as exc:
        print(f"echomark: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"echomark: error: {exc}", file=sys.stderr)
        return InputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
