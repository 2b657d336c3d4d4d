"""Experiment configuration: presets, validation and provenance hashing."""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

from .errors import EbgError
from .io import config_hash

EXPERIMENTS = (
    "spectrum",
    "polarization",
    "lifetime",
    "pulsed_g2",
    "pulsed_power_sweep",
    "cw_g2",
    "cw_power_sweep",
    "blinking",
    "efficiency",
    "hom",
)

DETECTOR_KEYS = {"efficiency", "dark_rate", "jitter_sigma", "dead_time"}

# allowed keys per block; sets and dicts describe nested blocks, None a plain value
SCHEMA = {
    "experiment": str,
    "preset": str,
    "base": str,
    "description": str,
    "seed": int,
    "cavity": {"lambda_h", "lambda_v", "fwhm_h", "fwhm_v", "f_h_max", "f_v_max", "eta_h", "eta_v", "gamma_leak"},
    "geometry": {"disk_radius", "period", "trench", "aspect_ratio"},
    "dipole": {"lambda_emit", "theta", "tau_slab"},
    "emitter": {
        "tau_cav",
        "tau_relax",
        "p_refill",
        "tau_refill",
        "blink_on_rate",
        "blink_off_rate",
        "sigma_nu",
        "p_sat_power",
        "refill_depth",
        "refill_power_exponent",
    },
    "schedule": {"mode", "rep_rate", "power", "duration", "powers"},
    "bench": {
        "throughput": None,
        "eta_override": None,
        "signal_fraction": None,
        "background_scaling": None,
        "detector": DETECTOR_KEYS,
        "detector_b": DETECTOR_KEYS,
        "mzi": {"path_delay", "R", "mode", "window"},
        "polarizer_angles": None,
        "polarizer_axis": None,
        "spectrometer": {"grid_min", "grid_max", "grid_step", "mode_level", "qd_linewidth"},
        "slab_duration": None,
    },
    "correlator": {"bin_width", "tau_span", "side_peaks", "half_window", "hom_half_widths", "n_bins_half", "microtime_lead"},
    "analysis": {
        "rho",
        "irf_sigma",
        "fit_span",
        "fiber_rate",
        "setup_efficiency",
        "rep_rate_hz",
        "g2_zero",
        "detector_efficiency",
        "tail_fraction",
        "R",
        "T",
        "g2_for_correction",
    },
    "output": {"dir", "csv_mirror", "write_timestamps"},
}

REQUIRED_BLOCKS = ("experiment", "seed")


class ConfigError(EbgError):
    """Schema violation; ``problems`` lists ``(location, message)`` pairs."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(f"{loc}: {msg}" for loc, msg in self.problems))


def _key_lines(text: str) -> dict:
    """First line number on which each quoted key appears (for diagnostics)."""
    lines = {}
    for i, line in enumerate(text.splitlines(), 1):
        start = 0
        while True:
            j = line.find('"', start)
            if j < 0:
                break
            k = line.find('"', j + 1)
            if k < 0:
                break
            rest = line[k + 1 :].lstrip()
            if rest.startswith(":"):
                lines.setdefault(line[j + 1 : k], i)
            start = k + 1
    return lines


def _check(obj, schema, path, problems, lines):
    for key, value in obj.items():
        loc = f"{path}.{key}" if path else key
        where = f"line {lines[key]}: {loc}" if key in lines else loc
        if key not in schema:
            problems.append((where, "unknown key"))
            continue
        rule = schema[key] if isinstance(schema, dict) else None
        if isinstance(rule, (set, dict)):
            if not isinstance(value, dict):
                problems.append((where, "expected an object"))
            else:
                _check(value, rule, loc, problems, lines)
        elif rule is int and (isinstance(value, bool) or not isinstance(value, int)):
            problems.append((where, "expected an integer"))
        elif rule is str and not isinstance(value, str):
            problems.append((where, "expected a string"))


def validate(config: dict, text: str | None = None) -> dict:
    """Reject unknown keys, wrong block types and a missing seed or experiment."""
    problems = []
    lines = _key_lines(text) if text else {}
    _check(config, SCHEMA, "", problems, lines)
    for key in REQUIRED_BLOCKS:
        if key not in config:
            problems.append((key, "missing (mandatory)"))
    if "experiment" in config and config["experiment"] not in EXPERIMENTS:
        problems.append(("experiment", f"unknown experiment {config['experiment']!r}"))
    if problems:
        raise ConfigError(problems)
    return config


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _preset_dir():
    return resources.files("ebgqd") / "presets"


def preset_names() -> list[str]:
    names = []
    for entry in _preset_dir().iterdir():
        n = entry.name
        if n.endswith(".json") and not n.endswith(".expect.json") and not n.startswith("_"):
            names.append(n[: -len(".json")])
    return sorted(names)


def _load_preset_raw(name: str) -> dict:
    path = _preset_dir() / f"{name}.json"
    if not path.is_file():
        raise ConfigError([("preset", f"unknown preset {name!r}")])
    return json.loads(path.read_text())


def load_preset(name: str) -> dict:
    """Preset configuration with its ``base`` chain merged in."""
    raw = _load_preset_raw(name)
    base = raw.pop("base", None)
    merged = deep_merge(load_preset(base), raw) if base else raw
    merged["preset"] = name
    return merged


def preset_expectations(name: str) -> dict:
    path = _preset_dir() / f"{name}.expect.json"
    if not path.is_file():
        return {}
    return json.loads(path.read_text())


def parse_config_text(text: str, source: str = "<config>") -> dict:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([(f"{source} line {exc.lineno} column {exc.colno}", exc.msg)]) from None
    if not isinstance(obj, dict):
        raise ConfigError([(source, "top level must be an object")])
    return obj


def resolve(config: dict | None = None, preset: str | None = None, seed: int | None = None, text: str | None = None) -> dict:
    """Build the effective configuration.

    A preset (named in ``config['preset']`` or the ``preset`` argument) is
    loaded first and the explicit blocks of ``config`` override it. ``seed``
    overrides everything. The result is validated.
    """
    config = copy.deepcopy(config or {})
    if text is not None:
        validate_keys_only(config, text)
    name = preset or config.get("preset")
    merged = deep_merge(load_preset(name), config) if name else config
    if name:
        merged["preset"] = name
    merged.pop("base", None)
    if seed is not None:
        merged["seed"] = int(seed)
    return validate(merged)


def validate_keys_only(config: dict, text: str):
    problems = []
    _check(config, SCHEMA, "", problems, _key_lines(text))
    if problems:
        raise ConfigError(problems)


def load_config_file(path) -> dict:
    text = Path(path).read_text()
    config = parse_config_text(text, str(path))
    validate_keys_only(config, text)
    return config


def hashed_view(config: dict) -> dict:
    """The part of a configuration that determines results (output settings excluded)."""
    return {k: v for k, v in config.items() if k != "output"}


def compute_hash(config: dict) -> str:
    return config_hash(hashed_view(config))
