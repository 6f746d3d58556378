"""Command-line entry point: ``rtbse {simulate,extract,eval,bench}``.

Exit codes: 0 success, 2 input or configuration error, 3 strict deadline
violation (``bench --strict``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ConfigError
from .errors import NotStarted, RtbseError, StrictDeadlineViolation
from .pipeline import PIPELINE_VARIANTS, Pipeline
from .simeval import (MixSpec, make_scenario, sdr_improvement_segments, speech_surrogate,
                      synthesize_mixture, synthetic_irs)
from .wavio import FORMATS, read_wav, write_wav

EXIT_OK, EXIT_INPUT, EXIT_DEADLINE = 0, 2, 3

logger = logging.getLogger("rtbse")


class InputError(Exception):
    """Bad user input (missing file, wrong shape); maps to exit code 2."""


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _apply_overrides(cfg: dict, args) -> dict:
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        cfg["pipeline"]["variant"] = args.variant
    if getattr(args, "mu", None) is not None:
        cfg["pipeline"]["mu"] = args.mu
    if getattr(args, "sweeps", None) is not None:
        cfg["pipeline"]["ilrma_sweeps"] = args.sweeps
    config_mod.validate(cfg)
    return cfg


def _load_config(args) -> dict:
    return _apply_overrides(config_mod.load(args.config), args)


def _read_input(path, cfg: dict):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"input file not found: {path}")
    x, rate = read_wav(path)
    if rate != cfg["stft"]["sample_rate"]:
        raise InputError(f"{path}: sample rate {rate} Hz, config expects {cfg['stft']['sample_rate']} Hz")
    return x


# -- simulate -------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mix_cfg, fs = cfg["mix"], cfg["stft"]["sample_rate"]
    geom = config_mod.geometry(cfg)
    az, el = cfg["target"]["azimuth"], cfg["target"]["elevation"]
    snr = config_mod.snr_value(cfg)
    speech = None
    if mix_cfg["speech"] is not None:
        speech_path = Path(mix_cfg["speech"])
        if not speech_path.is_file():
            raise InputError(f"speech file not found: {speech_path}")
        s, rate = read_wav(speech_path)
        if rate != fs:
            raise InputError(f"{speech_path}: sample rate {rate} Hz, config expects {fs} Hz")
        speech = s[:, 0]
    if mix_cfg["noise"] is not None:
        noise_path = Path(mix_cfg["noise"])
        if not noise_path.is_file():
            raise InputError(f"noise file not found: {noise_path}")
        noise, _ = read_wav(noise_path)
        rng = np.random.default_rng(cfg["seed"])
        if speech is None:
            speech = speech_surrogate(mix_cfg["duration"], fs, rng)
        irs = synthetic_irs(geom, az, el, fs, length=mix_cfg["ir_length"], t60=mix_cfg["t60"], rng=rng)
        mix = synthesize_mixture(MixSpec(speech, noise, irs, snr, fs), seed=cfg["seed"])
    else:
        mix = make_scenario(mix_cfg["duration"], geom, az, el, input_snr_db=snr, seed=cfg["seed"],
                            sample_rate=fs, t60=mix_cfg["t60"],
                            n_plane_waves=mix_cfg["n_plane_waves"], speech=speech)
    # one common gain keeps the files inside [-1, 1] without changing the SNR
    peak = float(np.max(np.abs(mix.mixture), initial=0.0))
    file_gain = 0.99 / peak if peak > 0.99 else 1.0
    write_wav(out / "mixture.wav", file_gain * mix.mixture, fs, args.format)
    write_wav(out / "groundtruth.wav", file_gain * mix.image, fs, args.format)
    config_mod.dump(cfg, out / "resolved_config.json")
    manifest = {
        "seed": cfg["seed"],
        "sample_rate": fs,
        "n_mics": int(mix.mixture.shape[1]),
        "duration_s": mix.mixture.shape[0] / fs,
        "samples": int(mix.mixture.shape[0]),
        "input_snr_db_requested": cfg["mix"]["input_snr_db"],
        "input_snr_db_achieved": mix.snr_db if np.isfinite(mix.snr_db) else "inf",
        "noise_gain": mix.noise_gain,
        "file_gain": file_gain,
        "files": {"mixture": "mixture.wav", "groundtruth": "groundtruth.wav",
                  "config": "resolved_config.json"},
    }
    _write_json(out / "manifest.json", manifest)
    print(json.dumps(manifest, indent=2))
    return EXIT_OK


# -- extract --------------------------------------------------------------------

def _make_pipeline(cfg: dict, wall_clock: bool) -> Pipeline:
    return Pipeline(config_mod.pipeline_config(cfg), wall_clock=wall_clock)


def _stream_stdio(pipe: Pipeline, n_mics: int) -> None:
    """Raw interleaved float32 from stdin to mono float32 on stdout, one hop at a time."""
    src, dst = sys.stdin.buffer, sys.stdout.buffer
    frame_bytes = 4 * n_mics
    chunk = pipe.cfg.hop * frame_bytes
    pending = b""
    while True:
        data = src.read(chunk)
        if not data:
            break
        pending += data
        usable = len(pending) - len(pending) % frame_bytes
        block = np.frombuffer(pending[:usable], dtype="<f4").reshape(-1, n_mics)
        pending = pending[usable:]
        pipe.push_samples(block)
        dst.write(pipe.step().astype("<f4").tobytes())
        dst.flush()
    dst.write(pipe.flush().astype("<f4").tobytes())
    dst.flush()
    pipe.close()


def cmd_extract(args) -> int:
    cfg = _load_config(args)
    pipe = _make_pipeline(cfg, args.wall_clock)
    if args.stream_stdio:
        _stream_stdio(pipe, pipe.cfg.n_mics)
        if args.timing:
            _write_json(args.timing, pipe.timing_report())
        return EXIT_OK
    if args.in_wav is None or args.out_wav is None:
        raise InputError("extract needs IN_WAV and OUT_WAV unless --stream-stdio is given")
    x = _read_input(args.in_wav, cfg)
    if x.shape[1] != pipe.cfg.n_mics:
        raise InputError(f"{args.in_wav}: {x.shape[1]} channels, config has {pipe.cfg.n_mics} mics")
    y = pipe.run(x)
    out = Path(args.out_wav)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_wav(out, y, cfg["stft"]["sample_rate"], args.format)
    report = pipe.timing_report()
    timing = Path(args.timing) if args.timing else out.with_suffix(".timing.json")
    _write_json(timing, report)
    config_mod.dump(cfg, out.parent / "resolved_config.json")
    print(json.dumps({"output": str(out), "timing": str(timing),
                      "realtime_factor": report["realtime_factor"],
                      "rcscme_max_ms": report["rcscme_part"]["max"]}, indent=2))
    return EXIT_OK


# -- eval -----------------------------------------------------------------------

def cmd_eval(args) -> int:
    signals = []
    rate = None
    for path in (args.gt_wav, args.observed_wav, args.extracted_wav):
        path = Path(path)
        if not path.is_file():
            raise InputError(f"file not found: {path}")
        x, r = read_wav(path)
        if rate is not None and r != rate:
            raise InputError(f"{path}: sample rate {r} differs from {rate}")
        rate = r
        ch = min(args.ref_mic, x.shape[1] - 1)
        signals.append(x[:, ch])
    lengths = {s.size for s in signals}
    if len(lengths) != 1:
        raise InputError(f"signal lengths differ: {[s.size for s in signals]}")
    report = sdr_improvement_segments(*signals, rate)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "segments.csv")
    report.write_json(out / "summary.json")
    print(json.dumps(report.summary(), indent=2))
    return EXIT_OK


# -- bench ----------------------------------------------------------------------

def cmd_bench(args) -> int:
    cfg = _load_config(args)
    x = _read_input(args.in_wav, cfg)
    variants = args.variants.split(",") if args.variants else [cfg["pipeline"]["variant"]]
    for v in variants:
        if v not in PIPELINE_VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    hop_ms = 1e3 * cfg["pipeline"]["tau4"]
    results = {}
    for v in variants:
        run_cfg = json.loads(json.dumps(cfg))
        run_cfg["pipeline"]["variant"] = v
        pipe = _make_pipeline(run_cfg, args.wall_clock)
        if x.shape[1] != pipe.cfg.n_mics:
            raise InputError(f"{args.in_wav}: {x.shape[1]} channels, config has {pipe.cfg.n_mics} mics")
        pipe.run(x)
        results[v] = pipe.timing_report()
    table = [
        {
            "variant": v,
            "ilrma_mean_ms": r["ilrma_part"]["mean"],
            "ilrma_std_ms": r["ilrma_part"]["std"],
            "ilrma_runs": r["ilrma_part"]["count"],
            "rcscme_mean_ms": r["rcscme_part"]["mean"],
            "rcscme_max_ms": r["rcscme_part"]["max"],
            "realtime_factor": r["realtime_factor"],
        }
        for v, r in results.items()
    ]
    doc = {"hop_ms": hop_ms, "variants": results, "comparison": table}
    if args.out:
        _write_json(args.out, doc)
    print(json.dumps(doc["comparison"], indent=2))
    if args.strict:
        late = [row["variant"] for row in table if row["rcscme_max_ms"] >= hop_ms]
        if late:
            raise StrictDeadlineViolation(
                f"per-frame time exceeded the {hop_ms:.1f} ms hop for: {', '.join(late)}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------

def _common(p: argparse.ArgumentParser, pipeline_flags: bool = True) -> None:
    p.add_argument("--config", help="JSON run config (defaults are used for missing keys)")
    p.add_argument("--seed", type=int, help="override the config seed")
    if pipeline_flags:
        p.add_argument("--variant", choices=PIPELINE_VARIANTS, help="ILRMA variant")
        p.add_argument("--mu", type=float, help="regularization weight")
        p.add_argument("--sweeps", type=int, help="ILRMA sweeps per block")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtbse", description="Real-time blind speech extraction.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic mixture and its groundtruth image")
    _common(p, pipeline_flags=False)
    p.add_argument("out_dir")
    p.add_argument("--format", choices=FORMATS, default="float32")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("extract", help="stream a multichannel WAV through the extractor")
    _common(p)
    p.add_argument("in_wav", nargs="?")
    p.add_argument("out_wav", nargs="?")
    p.add_argument("--timing", help="timing report path (default: OUT_WAV with .timing.json)")
    p.add_argument("--format", choices=FORMATS, default="float32")
    p.add_argument("--stream-stdio", action="store_true",
                   help="read interleaved float32 PCM on stdin, write mono float32 on stdout")
    p.add_argument("--wall-clock", action="store_true", help="pace the stream in real time")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="segmental SDR improvement of an extracted signal")
    p.add_argument("gt_wav")
    p.add_argument("observed_wav")
    p.add_argument("extracted_wav")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--ref-mic", type=int, default=0, help="channel used from multichannel files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="timing statistics, optionally for several variants")
    _common(p)
    p.add_argument("in_wav")
    p.add_argument("--variants", help="comma-separated list, e.g. naive,nsr,sr")
    p.add_argument("--out", help="write the full JSON report here")
    p.add_argument("--strict", action="store_true", help="exit 3 if a frame missed the hop deadline")
    p.add_argument("--wall-clock", action="store_true", help="pace the stream in real time")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StrictDeadlineViolation as exc:
        print(f"rtbse: {exc}", file=sys.stderr)
        return EXIT_DEADLINE
    except NotStarted as exc:
        print(f"rtbse: nothing processed: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, ConfigError, RtbseError, OSError, ValueError) as exc:
        print(f"rtbse: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
