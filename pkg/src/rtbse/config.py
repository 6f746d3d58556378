"""Run configuration: JSON schema, defaults, and builders for the library objects.

A run config is a JSON object with the sections below. Every key is
optional; missing keys take the defaults in :data:`DEFAULTS` and unknown keys
are rejected.

``seed``
    Integer seed for the simulator and the NMF initializations.
``stft``
    ``sample_rate``, ``window_len``, ``hop_len`` (samples).
``pipeline``
    ``tau1``, ``tau2``, ``tau3``, ``tau4`` (seconds), ``variant``,
    ``ilrma_sweeps``, ``n_basis``, ``mu``, ``ref_mic``, ``warm_start_nmf``,
    ``normalize_block``, ``ilrma_latency`` (seconds or null for measured).
``rcscme``
    ``alpha``, ``beta``, ``sweeps``, ``golden_iters``, ``lam_mode``,
    ``restart_lam`` (starting lam of the second ascent chain, null for one chain).
``array``
    ``mic_positions`` (list of xyz in metres) or a circular array given by
    ``n_mics`` and ``radius``; ``speed_of_sound``.
``target``
    ``azimuth``, ``elevation`` (radians), ``target_index``.
``mix``
    ``speech`` (mono WAV path or null for the built-in surrogate),
    ``noise`` (multichannel WAV path or null for simulated diffuse noise),
    ``duration`` (s), ``input_snr_db`` (number or ``"inf"``),
    ``n_plane_waves``, ``t60`` (s or null), ``ir_length``.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Optional

import jsonschema

from .pipeline import PIPELINE_VARIANTS, PipelineConfig, PriorConfig
from .prior import ArrayGeometry
from .rcscme import RcscmeConfig
from .stft import StftConfig

DEFAULTS = {
    "seed": 0,
    "stft": {"sample_rate": 16000, "window_len": 1024, "hop_len": 512},
    "pipeline": {
        "tau1": 5.0,
        "tau2": 3.0,
        "tau3": 0.512,
        "tau4": 0.032,
        "variant": "nsr",
        "ilrma_sweeps": 30,
        "n_basis": 10,
        "mu": 0.1,
        "ref_mic": 0,
        "warm_start_nmf": False,
        "normalize_block": True,
        "ilrma_latency": 0.0,
    },
    "rcscme": {
        "alpha": 1.6,
        "beta": 1e-16,
        "sweeps": 2,
        "golden_iters": 30,
        "lam_mode": "time_variant",
        "restart_lam": None,
    },
    "array": {
        "mic_positions": None,
        "n_mics": 4,
        "radius": 0.0325,
        "speed_of_sound": 343.0,
    },
    "target": {"azimuth": 0.0, "elevation": 0.0, "target_index": 0},
    "mix": {
        "speech": None,
        "noise": None,
        "duration": 60.0,
        "input_snr_db": 0.0,
        "n_plane_waves": 64,
        "t60": None,
        "ir_length": 64,
    },
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_count = {"type": "integer", "minimum": 1}
_index = {"type": "integer", "minimum": 0}


def _section(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "rtbse run config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "stft": _section({"sample_rate": _count, "window_len": _count, "hop_len": _count}),
        "pipeline": _section({
            "tau1": _pos, "tau2": _pos, "tau3": _pos, "tau4": _pos,
            "variant": {"enum": list(PIPELINE_VARIANTS)},
            "ilrma_sweeps": _count,
            "n_basis": _count,
            "mu": {"type": "number", "minimum": 0},
            "ref_mic": _index,
            "warm_start_nmf": {"type": "boolean"},
            "normalize_block": {"type": "boolean"},
            "ilrma_latency": {"type": ["number", "null"], "minimum": 0},
        }),
        "rcscme": _section({
            "alpha": _pos, "beta": _pos, "sweeps": _count, "golden_iters": _count,
            "lam_mode": {"enum": ["time_variant", "time_invariant"]},
            "restart_lam": {"type": ["number", "null"], "exclusiveMinimum": 0},
        }),
        "array": _section({
            "mic_positions": {
                "type": ["array", "null"],
                "items": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3},
                "minItems": 1,
            },
            "n_mics": _count,
            "radius": _pos,
            "speed_of_sound": _pos,
        }),
        "target": _section({"azimuth": _num, "elevation": _num, "target_index": _index}),
        "mix": _section({
            "speech": {"type": ["string", "null"]},
            "noise": {"type": ["string", "null"]},
            "duration": _pos,
            "input_snr_db": {"oneOf": [_num, {"const": "inf"}]},
            "n_plane_waves": _count,
            "t60": {"type": ["number", "null"], "minimum": 0},
            "ir_length": _count,
        }),
    },
}


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(doc: dict) -> None:
    """Raise :class:`ConfigError` listing every schema violation with its JSON path."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"{where}: {e.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))


def resolve(doc: Optional[dict] = None) -> dict:
    """Validate a (partial) config and fill in every default."""
    doc = {} if doc is None else doc
    validate(doc)
    return _merge(DEFAULTS, doc)


def load(path=None) -> dict:
    """Read, validate and resolve a JSON config file (None gives the defaults)."""
    if path is None:
        return resolve({})
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return resolve(doc)


def dump(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def snr_value(cfg: dict) -> float:
    v = cfg["mix"]["input_snr_db"]
    return float("inf") if v == "inf" else float(v)


def geometry(cfg: dict) -> ArrayGeometry:
    a = cfg["array"]
    try:
        if a["mic_positions"] is not None:
            return ArrayGeometry(a["mic_positions"], a["speed_of_sound"])
        return ArrayGeometry.circular(a["n_mics"], a["radius"], speed_of_sound=a["speed_of_sound"])
    except ValueError as exc:
        raise ConfigError(f"array: {exc}") from exc


def stft_config(cfg: dict) -> StftConfig:
    s = cfg["stft"]
    try:
        return StftConfig(s["sample_rate"], s["window_len"], s["hop_len"])
    except ValueError as exc:
        raise ConfigError(f"stft: {exc}") from exc


def pipeline_config(cfg: dict) -> PipelineConfig:
    """Build the :class:`PipelineConfig`; raises ConfigError on inconsistent values."""
    p, r, t = cfg["pipeline"], cfg["rcscme"], cfg["target"]
    geom = geometry(cfg)
    try:
        rc = RcscmeConfig(alpha=r["alpha"], beta=r["beta"], sweeps=r["sweeps"],
                          ref_mic=p["ref_mic"], golden_iters=r["golden_iters"],
                          lam_mode=r["lam_mode"], restart_lam=r["restart_lam"])
        prior = PriorConfig(geom, t["azimuth"], t["elevation"], t["target_index"])
        return PipelineConfig(
            tau1=p["tau1"], tau2=p["tau2"], tau3=p["tau3"], tau4=p["tau4"],
            variant=p["variant"], ilrma_sweeps=p["ilrma_sweeps"], n_basis=p["n_basis"],
            mu=p["mu"], n_mics=geom.n_mics, ref_mic=p["ref_mic"], seed=cfg["seed"],
            stft=stft_config(cfg), rcscme=rc, prior=prior,
            ilrma_latency=p["ilrma_latency"], warm_start_nmf=p["warm_start_nmf"],
            normalize_block=p["normalize_block"],
        )
    except (ValueError, IndexError) as exc:
        raise ConfigError(str(exc)) from exc
