"""Experiment configuration files.

Configs are INI-style text read with :mod:`configparser`::

    [geometry]
    preset = G1            ; G1 | G2 | flat-anchor | klt-pole-0.5 | ...
    n = 1
    N = 64

    [density]
    preset = constant      ; constant | smooth | model

    [forcing]
    preset = zero          ; zero | linear | table

    [initial]
    preset = zero          ; zero | constant | smooth | kink

    [schedule]
    T = 1.0
    steps = 50

    [checks]
    enabled = uniform_bound, barrier

Only ``[geometry]`` is required.  See ``FIELDS`` for every key and default.
"""
from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .presets import CRF_PRESETS, DENSITY_PRESETS, FORCING_PRESETS, GEOMETRY_PRESETS, INITIAL_PRESETS

CHECKS = ("uniform_bound", "barrier", "time_derivative", "semiconcavity", "comparison", "mass_monotonicity",
          "subsolution", "elliptic_stability", "parabolic_stability", "ladder", "weighted_laplacian",
          "smoothing", "tmax")


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())


def _names(text: str) -> tuple:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "yes", "true", "on"):
        return True
    if low in ("0", "no", "false", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _table(text: str) -> tuple:
    pairs = []
    for item in _names(text):
        r, v = item.split(":")
        pairs.append((float(r), float(v)))
    return tuple(pairs)


# section -> key -> (converter, default); a default of ... marks a required key
FIELDS = {
    "geometry": {"preset": (str, ...), "n": (int, 1), "N": (int, 64), "kappa": (float, 0.05),
                 "delta": (float, 0.1), "chi": (float, 0.5)},
    "density": {"preset": (str, "constant"), "value": (float, 1.0), "amplitude": (float, 0.2),
                "exponents": (_floats, ()), "p": (float, None)},
    "forcing": {"preset": (str, "zero"), "lambda": (float, 1.0), "table": (_table, ())},
    "initial": {"preset": (str, "zero"), "value": (float, 0.3), "amplitude": (float, 0.01),
                "slope": (float, 0.2)},
    "schedule": {"T": (float, 1.0), "steps": (int, 50), "ratio": (float, 1.0)},
    "checks": {"enabled": (_names, None), "refine": (_bool, False), "eps": (float, 0.1),
               "alpha": (float, None), "ladder_levels": (int, 4), "sweep": (_floats, (0.05, 0.1, 0.2)),
               "random_sweep": (int, 0), "offset": (float, 0.1), "weight_delta": (float, 0.4),
               "radii": (_floats, (0.3, 0.2, 0.1, 0.05)), "rescale": (float, 1.05)},
    "output": {"dir": (str, "out"), "snapshots": (_bool, True)},
    "tolerances": {"newton": (float, 1e-10), "elliptic": (float, 1e-9), "eps_grid": (float, 1e-6)},
    "seed": {"value": (int, 0)},
}


class ConfigError(ConfigurationError):
    """Parse or validation failure, pointing at a section, key and (when known) a line."""

    def __init__(self, message: str, *, section: str | None = None, key: str | None = None,
                 line: int | None = None):
        where = ""
        if line is not None:
            where += f"line {line}: "
        if section is not None:
            where += f"[{section}]" + (f" {key}" if key else "") + ": "
        super().__init__(where + message)
        self.section, self.key, self.line = section, key, line


@dataclass
class ExperimentConfig:
    geometry: dict
    density: dict
    forcing: dict
    initial: dict
    schedule: dict
    checks: dict
    output: dict
    tolerances: dict
    seed: int
    source: str = ""
    digest: str = ""
    present: set = field(default_factory=set)

    @property
    def is_crf(self) -> bool:
        return self.geometry["preset"] in CRF_PRESETS


def _line_index(text: str) -> dict:
    """Map ``(section, key)`` (and ``(section, None)``) to 1-based line numbers."""
    index, section = {}, None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip().lower()
            index.setdefault((section, None), no)
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", line)
        if m and section:
            index.setdefault((section, m.group(1).strip()), no)
    return index


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    index = _line_index(text)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError("duplicate key", section=exc.section, key=exc.option, line=exc.lineno) from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError("duplicate section", section=exc.section, line=exc.lineno) from exc
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("text before the first [section] header", line=exc.lineno) from exc
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", line=lineno) from exc

    for sec in parser.sections():
        if sec not in FIELDS:
            raise ConfigError(f"unknown section (expected one of {', '.join(FIELDS)})", section=sec,
                              line=index.get((sec.lower(), None)))
    values = {}
    for sec, spec in FIELDS.items():
        out = {}
        have = parser.has_section(sec)
        if have:
            for key in parser.options(sec):
                if key not in spec:
                    raise ConfigError("unknown key", section=sec, key=key, line=index.get((sec, key)))
        for key, (conv, default) in spec.items():
            if have and parser.has_option(sec, key):
                raw = parser.get(sec, key)
                try:
                    out[key] = conv(raw)
                except (ValueError, TypeError) as exc:
                    raise ConfigError(f"cannot parse {raw!r} ({exc})", section=sec, key=key,
                                      line=index.get((sec, key))) from exc
            elif default is ...:
                if not have:
                    raise ConfigError("missing required section", section=sec)
                raise ConfigError("missing required key", section=sec, key=key, line=index.get((sec, None)))
            else:
                out[key] = default
        values[sec] = out
    cfg = ExperimentConfig(**{k: values[k] for k in FIELDS if k != "seed"}, seed=values["seed"]["value"],
                           source=source, digest=hashlib.sha256(text.encode()).hexdigest(),
                           present=set(parser.sections()))
    validate(cfg, index)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def default_checks(cfg: ExperimentConfig) -> tuple:
    checks = ["uniform_bound", "barrier", "time_derivative", "semiconcavity", "comparison", "mass_monotonicity"]
    if cfg.is_crf:
        checks += ["smoothing", "tmax"]
    if _negative_exponents(cfg):
        checks.append("weighted_laplacian")
    return tuple(checks)


def _negative_exponents(cfg: ExperimentConfig) -> bool:
    if cfg.is_crf:
        from .presets import crf_forms
        from .grid import TorusGrid

        exps = crf_forms(TorusGrid(cfg.geometry["n"], 8), cfg.geometry["preset"])[2]
    else:
        exps = cfg.density["exponents"] if cfg.density["preset"] == "model" else ()
    return any(a < 0 for a in exps)


def validate(cfg: ExperimentConfig, index: dict | None = None) -> None:
    index = index or {}

    def fail(sec, key, msg):
        raise ConfigError(msg, section=sec, key=key, line=index.get((sec, key)))

    g = cfg.geometry
    if g["preset"] not in GEOMETRY_PRESETS and g["preset"] not in CRF_PRESETS:
        fail("geometry", "preset", f"unknown preset {g['preset']!r}")
    if g["n"] not in (1, 2):
        fail("geometry", "n", "n must be 1 or 2")
    if g["N"] < 8 or g["N"] % 2:
        fail("geometry", "N", "N must be even and at least 8")
    for sec, table in (("density", DENSITY_PRESETS), ("forcing", FORCING_PRESETS), ("initial", INITIAL_PRESETS)):
        name = getattr(cfg, sec)["preset"]
        if name not in table:
            fail(sec, "preset", f"unknown preset {name!r}")
    if cfg.is_crf:
        if cfg.forcing["preset"] != "zero":
            fail("forcing", "preset", "Chern-Ricci presets run with F = 0")
        if "density" in cfg.present:
            fail("density", None, "Chern-Ricci presets fix the density; remove the [density] section")
    d = cfg.density
    if d["preset"] == "model" and any(a <= -1 for a in d["exponents"]):
        fail("density", "exponents", "exponents must exceed -1")
    if d["preset"] == "constant" and d["value"] <= 0:
        fail("density", "value", "must be positive")
    if d["p"] is not None and d["p"] <= 1:
        fail("density", "p", "p must exceed 1")
    s = cfg.schedule
    if s["T"] <= 0:
        fail("schedule", "T", "must be positive")
    if s["steps"] < 3:
        fail("schedule", "steps", "need at least 3 steps")
    if s["ratio"] < 1:
        fail("schedule", "ratio", "grading ratio must be >= 1")
    for key, v in cfg.tolerances.items():
        if not v > 0:
            fail("tolerances", key, "tolerances must be positive")
    c = cfg.checks
    if c["enabled"] is None:
        c["enabled"] = default_checks(cfg)
    elif c["enabled"] == ("all",):
        c["enabled"] = tuple(k for k in CHECKS if _applicable(cfg, k))
    for name in c["enabled"]:
        if name not in CHECKS:
            fail("checks", "enabled", f"unknown check {name!r}")
        if not _applicable(cfg, name):
            fail("checks", "enabled", f"check {name!r} does not apply to this configuration")
    if len(set(c["enabled"])) != len(c["enabled"]):
        fail("checks", "enabled", "duplicate check")
    if c["ladder_levels"] < 2:
        fail("checks", "ladder_levels", "need at least 2 levels")
    if not 0 < c["eps"] < s["T"]:
        fail("checks", "eps", "must lie in (0, T)")
    if c["alpha"] is not None and not 0 < c["alpha"] * s["T"] < 1:
        fail("checks", "alpha", "need 0 < alpha T < 1")
    if len(c["sweep"]) + c["random_sweep"] < 2:
        fail("checks", "sweep", "the stability sweep needs two densities")
    if not 0 < abs(c["rescale"] - 1) < c["eps"]:
        fail("checks", "rescale", "need 0 < |s - 1| < eps")


def _applicable(cfg: ExperimentConfig, name: str) -> bool:
    if name in ("smoothing", "tmax"):
        return cfg.is_crf
    if name == "weighted_laplacian":
        return _negative_exponents(cfg)
    if name == "subsolution":
        return cfg.forcing["preset"] == "zero"
    return True
