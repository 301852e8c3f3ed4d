"""
Manifest-driven evaluation: fit, transfer, watermark, detect, report.

A manifest is a CSV file with a header row. Recognized columns:

``clean_path``
    Clean source recording (required).
``rir_path``
    Ground-truth RIR. When no reverberant recording is given, the
    reverberant signal is synthesized as ``clean * rir``.
``target_reverb_path``
    A reverberant recording of the clean source.
``snr_db``
    Optional white-noise SNR applied to the reverberant signal and to the
    watermarked transfer.
``message``
    Optional bit string to embed in the fitted RIR and decode back.

Relative paths resolve against the manifest's directory. All randomness is
derived from one seed, per row and purpose, so rows can run in any order or
in parallel and the report is identical.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .acoustics import analyze, edc_array
from .dsp import Waveform, convolve, derive_seed, generate_noise, mix_at_snr, read_wav
from .errors import FormatError, InputError
from .estimator import FitOptions, fit_from_reverberant, fit_to_rir
from .report import ItemResult
from .rir import init_params, render
from .watermark import EmbedOptions, WatermarkMessage, decode_from_audio, embed, format_bits, parse_bits

MANIFEST_COLUMNS = ("clean_path", "rir_path", "target_reverb_path", "snr_db", "message")


@dataclass(frozen=True)
class ManifestRow:
    clean_path: Path
    rir_path: Optional[Path] = None
    target_reverb_path: Optional[Path] = None
    snr_db: Optional[float] = None
    message: Optional[str] = None

    @property
    def target_path(self) -> Path:
        return self.target_reverb_path or self.rir_path


@dataclass(frozen=True)
class EvalConfig:
    """Settings shared by every row of an evaluation run."""

    seed: int = 0
    key: int = 0x5EC2E7
    gain_db: float = -20.0
    tau_s: float = 3.0
    max_iters: int = 300
    mode: str = "reverberant"  # or "rir": fit the ground-truth RIR directly
    negatives: bool = True
    workers: int = 1
    snr_override: Optional[float] = None

    def __post_init__(self):
        if self.mode not in ("reverberant", "rir"):
            raise InputError(f"mode must be 'reverberant' or 'rir', got {self.mode!r}")
        if self.max_iters < 1:
            raise InputError("max_iters must be at least 1")
        if self.workers < 1:
            raise InputError("workers must be at least 1")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "key": f"{self.key:016x}", "gain_db": self.gain_db,
                "tau_s": self.tau_s, "max_iters": self.max_iters, "mode": self.mode,
                "negatives": self.negatives}


def _optional(value: Optional[str]) -> Optional[str]:
    value = (value or "").strip()
    return value or None


def read_manifest(path) -> list:
    """Parse and validate a manifest.

    Raises
    ------
    FormatError
        On a missing header, unknown columns or malformed values.
    InputError
        If the manifest has no rows or references missing files.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from exc
    reader = csv.DictReader(text.splitlines())
    if reader.fieldnames is None:
        raise InputError(f"{path}: manifest is empty")
    names = [n.strip() for n in reader.fieldnames]
    unknown = set(names) - set(MANIFEST_COLUMNS)
    if "clean_path" not in names or unknown:
        raise FormatError(f"{path}: header must include clean_path and only {MANIFEST_COLUMNS}")
    base = path.parent
    rows = []
    for k, raw in enumerate(reader, start=2):
        raw = {key.strip(): val for key, val in raw.items() if key is not None}

        def resolve(col):
            val = _optional(raw.get(col))
            if val is None:
                return None
            p = Path(val)
            p = p if p.is_absolute() else base / p
            if not p.exists():
                raise InputError(f"{path}:{k}: {col} {val} does not exist")
            return p

        clean = resolve("clean_path")
        if clean is None:
            raise FormatError(f"{path}:{k}: clean_path is required")
        rir, reverb = resolve("rir_path"), resolve("target_reverb_path")
        if rir is None and reverb is None:
            raise FormatError(f"{path}:{k}: need rir_path or target_reverb_path")
        snr = _optional(raw.get("snr_db"))
        try:
            snr_val = None if snr is None or snr.lower() == "inf" else float(snr)
        except ValueError:
            raise FormatError(f"{path}:{k}: bad snr_db {snr!r}") from None
        msg = _optional(raw.get("message"))
        if msg is not None:
            try:
                msg = format_bits(parse_bits(msg))
            except InputError as exc:
                raise FormatError(f"{path}:{k}: {exc}") from None
        rows.append(ManifestRow(clean, rir, reverb, snr_val, msg))
    if not rows:
        raise InputError(f"{path}: manifest has no rows")
    return rows


def _noisy(y: Waveform, snr_db: Optional[float], seed: int) -> Waveform:
    if snr_db is None:
        return y
    return mix_at_snr(y, generate_noise("white", len(y), seed, sample_rate_hz=y.sample_rate_hz), snr_db)


def run_item(index: int, row: ManifestRow, cfg: EvalConfig):
    """Process one row; returns ``(ItemResult, edc curves, curve labels)``."""
    x = read_wav(row.clean_path)
    h_true = read_wav(row.rir_path) if row.rir_path is not None else None
    snr = cfg.snr_override if cfg.snr_override is not None else row.snr_db
    if snr is not None and math.isinf(snr):
        snr = None
    if row.target_reverb_path is not None:
        y = read_wav(row.target_reverb_path)
    else:
        y = convolve(x, h_true)
    y = _noisy(y, snr, derive_seed(cfg.seed, f"noise/{index}"))
    init = init_params(derive_seed(cfg.seed, f"init/{index}"), tau_s=cfg.tau_s)
    opts = FitOptions(max_iters=cfg.max_iters)
    if cfg.mode == "rir":
        if h_true is None:
            raise InputError(f"row {index}: mode 'rir' needs rir_path")
        fit = fit_to_rir(h_true, init, opts)
    else:
        fit = fit_from_reverberant(y, x, init, opts)
    h_est = render(fit.params)
    est = analyze(h_est)
    truth = analyze(h_true) if h_true is not None else None
    curves = [edc_array(h_est.samples)]
    labels = ["estimate"]
    if truth is not None:
        curves.insert(0, truth.edc.values)
        labels.insert(0, "truth")
    extra = {}
    if row.message is not None:
        msg = WatermarkMessage(parse_bits(row.message), cfg.key)
        wopts = EmbedOptions(gain_db=cfg.gain_db)
        marked = render(embed(fit.params, msg, wopts))
        y_wm = _noisy(convolve(x, marked), snr, derive_seed(cfg.seed, f"wm-noise/{index}"))
        det = decode_from_audio(y_wm, x, cfg.key, msg.num_bits, wopts)
        extra = {"message": row.message, "decoded": format_bits(det.message),
                 "present": det.present, "presence_score": det.presence_score,
                 "bit_scores": det.bit_scores}
        if cfg.negatives:
            y_neg = _noisy(convolve(x, h_est), snr, derive_seed(cfg.seed, f"neg-noise/{index}"))
            neg = decode_from_audio(y_neg, x, cfg.key, msg.num_bits, wopts)
            extra.update(negative_present=neg.present, negative_score=neg.presence_score)
    item = ItemResult(
        index=index, clean_path=row.clean_path.name, target_path=row.target_path.name,
        snr_db=snr, t60_true=truth.t60_s if truth else math.nan, t60_est=est.t60_s,
        drr_true=truth.drr_db if truth else math.nan, drr_est=est.drr_db,
        converged=fit.converged, final_loss=fit.final.total, **extra)
    return item, curves, labels


def _run_star(args):
    return run_item(*args)


def run_manifest(rows, cfg: EvalConfig) -> list:
    """Run every row, in a process pool when ``cfg.workers > 1``; results keep row order."""
    jobs = [(k, row, cfg) for k, row in enumerate(rows)]
    if cfg.workers == 1:
        return [run_item(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(_run_star, jobs))
