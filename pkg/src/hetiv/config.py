"""Run configuration: flat key-value text with sections (INI syntax).

Unknown keys are rejected with their location; omitted keys fall back to
defaults and the effective configuration can be echoed line by line. The
full schema is documented in the repository README.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError

_KNOWN = {
    "run": {"mode", "seed", "output", "threads", "format"},
    "data": {"input", "weight", "delimiter"},
    "restrictions": {
        "min_age",
        "max_age",
        "sex",
        "activity_exclusions",
        "age_column",
        "sex_column",
        "activity_column",
    },
    "model": {
        "outcomes",
        "taxonomy",
        "treatment",
        "drug_window",
        "controls",
        "square",
        "factors",
        "fixed_effects",
        "instrument_mode",
        "external_instrument",
        "robust",
        "weighted",
        "include_fixed_effects_in_z",
    },
    "subgroups": {
        "age_bands",
        "education_split",
        "education_column",
        "drug_pairs",
        "exclusion_variants",
    },
    "montecarlo": {
        "n",
        "beta",
        "rho",
        "delta",
        "feedback",
        "fn",
        "fp",
        "prevalence",
        "instrument_effect",
        "reps",
        "estimators",
    },
}


@dataclass
class RunConfig:
    """Validated run configuration with every default filled in."""

    mode: str = "replicate"
    seed: int = 42
    output: str = "out"
    threads: int = 1
    format: str = "human"

    input: str | None = None
    weight: str | None = None
    delimiter: str | None = None

    min_age: float = 22
    max_age: float = 50
    sex: str | None = None
    activity_exclusions: tuple = ("in education", "disabled", "retired")
    age_column: str = "age"
    sex_column: str = "sex"
    activity_column: str = "activity"

    outcomes: tuple = ()
    taxonomy: str = "soft_hard"
    treatment: str = "any"
    drug_window: str | None = None
    controls: tuple = ()
    square: tuple = ()
    factors: tuple = ()
    fixed_effects: tuple = ()
    instrument_mode: str = "lewbel"
    external_instrument: str | None = None
    robust: str = "hc1"
    weighted: bool = False
    include_fixed_effects_in_z: bool = False

    age_bands: tuple = ()
    education_split: dict = field(default_factory=dict)
    education_column: str = "education"
    drug_pairs: tuple = ()
    exclusion_variants: tuple = ()

    mc_n: int = 25_000
    mc_beta: float = -0.04
    mc_rho: tuple = (0.3,)
    mc_delta: tuple = (1.0,)
    mc_feedback: float = 0.0
    mc_fn: float = 0.0
    mc_fp: float = 0.0
    mc_prevalence: float = 0.033
    mc_instrument_effect: float = -0.03
    mc_reps: int = 500
    mc_estimators: tuple = ("ols", "lewbel")

    defaulted: tuple = ()

    def echo_lines(self) -> list:
        """Effective configuration, one line per key, defaults marked."""
        lines = []
        for f in fields(self):
            if f.name == "defaulted":
                continue
            tag = " (default)" if f.name in self.defaulted else ""
            lines.append(f"{f.name} = {getattr(self, f.name)!r}{tag}")
        return lines


def _split_list(text: str) -> tuple:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _parse_bands(text: str, location: str) -> tuple:
    bands = []
    for part in _split_list(text):
        if "-" not in part:
            raise ConfigError(f"{location}: band {part!r} is not of the form lo-hi")
        lo_s, hi_s = part.split("-", 1)
        try:
            lo, hi = float(lo_s), float(hi_s)
        except ValueError:
            raise ConfigError(f"{location}: band {part!r} has non-numeric bounds")
        if lo > hi:
            raise ConfigError(f"{location}: band {part!r} has lo > hi")
        bands.append((lo, hi))
    for i in range(len(bands)):
        for j in range(i + 1, len(bands)):
            a, b = bands[i], bands[j]
            if a[0] <= b[1] and b[0] <= a[1]:
                raise ConfigError(
                    f"{location}: bands {a[0]:g}-{a[1]:g} and {b[0]:g}-{b[1]:g} overlap"
                )
    return tuple(bands)


def _parse_split(text: str, location: str) -> dict:
    split = {}
    for group in text.split(";"):
        group = group.strip()
        if not group:
            continue
        if ":" not in group:
            raise ConfigError(f"{location}: group {group!r} lacks 'name: levels'")
        name, levels = group.split(":", 1)
        split[name.strip()] = _split_list(levels)
    return split


def _floats(text: str, location: str) -> tuple:
    try:
        return tuple(float(v) for v in _split_list(text))
    except ValueError:
        raise ConfigError(f"{location}: expected numeric list, got {text!r}")


def parse_config(path) -> RunConfig:
    """Parse and validate a run configuration file.

    Rejects unknown keys (with section.key location), fills defaults, and
    checks mode-specific requirements: replicate mode needs an existing
    input file and a nonempty outcome list.
    """
    if not os.path.exists(path):
        raise ConfigError(f"configuration file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}")

    for section in parser.sections():
        if section not in _KNOWN:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key in parser[section]:
            if key not in _KNOWN[section]:
                raise ConfigError(f"{path}: unknown key {section}.{key}")

    cfg = RunConfig()
    provided = set()

    def get(section, key, default=None):
        if parser.has_option(section, key):
            provided.add(f"{section}.{key}")
            return parser.get(section, key).strip()
        return default

    loc = lambda s, k: f"{path}: {s}.{k}"

    mode = get("run", "mode")
    if mode is None:
        raise ConfigError(f"{path}: run.mode is required (replicate or montecarlo)")
    if mode not in ("replicate", "montecarlo"):
        raise ConfigError(f"{loc('run', 'mode')}: must be replicate or montecarlo, got {mode!r}")
    cfg.mode = mode

    try:
        if (v := get("run", "seed")) is not None:
            cfg.seed = int(v)
        if (v := get("run", "output")) is not None:
            cfg.output = v
        if (v := get("run", "threads")) is not None:
            cfg.threads = int(v)
            if cfg.threads < 1:
                raise ConfigError(f"{loc('run', 'threads')}: must be >= 1")
        if (v := get("run", "format")) is not None:
            if v not in ("human", "csv"):
                raise ConfigError(f"{loc('run', 'format')}: must be human or csv")
            cfg.format = v
    except ValueError as exc:
        raise ConfigError(f"{path}: [run] has a non-numeric value ({exc})")

    cfg.input = get("data", "input")
    cfg.weight = get("data", "weight")
    if (v := get("data", "delimiter")) is not None:
        mapping = {"auto": None, "comma": ",", "tab": "\t"}
        if v not in mapping:
            raise ConfigError(f"{loc('data', 'delimiter')}: must be auto, comma or tab")
        cfg.delimiter = mapping[v]

    try:
        if (v := get("restrictions", "min_age")) is not None:
            cfg.min_age = float(v)
        if (v := get("restrictions", "max_age")) is not None:
            cfg.max_age = float(v)
    except ValueError:
        raise ConfigError(f"{path}: [restrictions] ages must be numeric")
    if cfg.min_age > cfg.max_age:
        raise ConfigError(f"{path}: restrictions.min_age exceeds max_age")
    cfg.sex = get("restrictions", "sex")
    if (v := get("restrictions", "activity_exclusions")) is not None:
        cfg.activity_exclusions = _split_list(v)
    for key in ("age_column", "sex_column", "activity_column"):
        if (v := get("restrictions", key)) is not None:
            setattr(cfg, key, v)

    if (v := get("model", "outcomes")) is not None:
        cfg.outcomes = _split_list(v)
    if (v := get("model", "taxonomy")) is not None:
        if v not in ("soft_hard", "recreational_dependency", "none"):
            raise ConfigError(
                f"{loc('model', 'taxonomy')}: must be soft_hard, recreational_dependency or none"
            )
        cfg.taxonomy = v
    if (v := get("model", "treatment")) is not None:
        cfg.treatment = v
    cfg.drug_window = get("model", "drug_window")
    for key in ("controls", "square", "factors", "fixed_effects"):
        if (v := get("model", key)) is not None:
            setattr(cfg, key, _split_list(v))
    if (v := get("model", "instrument_mode")) is not None:
        if v not in ("lewbel", "external", "both"):
            raise ConfigError(f"{loc('model', 'instrument_mode')}: must be lewbel, external or both")
        cfg.instrument_mode = v
    cfg.external_instrument = get("model", "external_instrument")
    if (v := get("model", "robust")) is not None:
        if v not in ("hc0", "hc1"):
            raise ConfigError(f"{loc('model', 'robust')}: must be hc0 or hc1")
        cfg.robust = v
    if (v := get("model", "weighted")) is not None:
        cfg.weighted = parser.getboolean("model", "weighted")
    if (v := get("model", "include_fixed_effects_in_z")) is not None:
        cfg.include_fixed_effects_in_z = parser.getboolean("model", "include_fixed_effects_in_z")

    if (v := get("subgroups", "age_bands")) is not None:
        cfg.age_bands = _parse_bands(v, loc("subgroups", "age_bands"))
    if (v := get("subgroups", "education_split")) is not None:
        cfg.education_split = _parse_split(v, loc("subgroups", "education_split"))
    if (v := get("subgroups", "education_column")) is not None:
        cfg.education_column = v
    if (v := get("subgroups", "drug_pairs")) is not None:
        cfg.drug_pairs = _split_list(v)
        if len(cfg.drug_pairs) not in (0, 2):
            raise ConfigError(f"{loc('subgroups', 'drug_pairs')}: needs exactly two class names")
    if (v := get("subgroups", "exclusion_variants")) is not None:
        cfg.exclusion_variants = tuple(
            _split_list(variant) for variant in v.split(";") if variant.strip()
        )

    try:
        if (v := get("montecarlo", "n")) is not None:
            cfg.mc_n = int(v)
        if (v := get("montecarlo", "beta")) is not None:
            cfg.mc_beta = float(v)
        if (v := get("montecarlo", "rho")) is not None:
            cfg.mc_rho = _floats(v, loc("montecarlo", "rho"))
        if (v := get("montecarlo", "delta")) is not None:
            cfg.mc_delta = _floats(v, loc("montecarlo", "delta"))
        if (v := get("montecarlo", "feedback")) is not None:
            cfg.mc_feedback = float(v)
        if (v := get("montecarlo", "fn")) is not None:
            cfg.mc_fn = float(v)
        if (v := get("montecarlo", "fp")) is not None:
            cfg.mc_fp = float(v)
        if (v := get("montecarlo", "prevalence")) is not None:
            cfg.mc_prevalence = float(v)
        if (v := get("montecarlo", "instrument_effect")) is not None:
            cfg.mc_instrument_effect = float(v)
        if (v := get("montecarlo", "reps")) is not None:
            cfg.mc_reps = int(v)
    except ValueError as exc:
        raise ConfigError(f"{path}: [montecarlo] has a non-numeric value ({exc})")
    if (v := get("montecarlo", "estimators")) is not None:
        cfg.mc_estimators = _split_list(v)
        bad = set(cfg.mc_estimators) - {"ols", "lewbel", "external"}
        if bad:
            raise ConfigError(
                f"{loc('montecarlo', 'estimators')}: unknown estimator(s) {sorted(bad)}"
            )

    if cfg.mode == "replicate":
        if cfg.input is None:
            raise ConfigError(f"{path}: replicate mode requires data.input")
        if not os.path.exists(cfg.input):
            raise ConfigError(f"{path}: data.input file not found: {cfg.input}")
        if not cfg.outcomes:
            raise ConfigError(f"{path}: replicate mode requires model.outcomes")
        if cfg.instrument_mode in ("external", "both") and not cfg.external_instrument:
            raise ConfigError(
                f"{path}: instrument_mode {cfg.instrument_mode!r} requires model.external_instrument"
            )

    all_keys = {
        "run.mode": "mode",
        "run.seed": "seed",
        "run.output": "output",
        "run.threads": "threads",
        "run.format": "format",
        "data.input": "input",
        "data.weight": "weight",
        "data.delimiter": "delimiter",
        "restrictions.min_age": "min_age",
        "restrictions.max_age": "max_age",
        "restrictions.sex": "sex",
        "restrictions.activity_exclusions": "activity_exclusions",
        "restrictions.age_column": "age_column",
        "restrictions.sex_column": "sex_column",
        "restrictions.activity_column": "activity_column",
        "model.outcomes": "outcomes",
        "model.taxonomy": "taxonomy",
        "model.treatment": "treatment",
        "model.drug_window": "drug_window",
        "model.controls": "controls",
        "model.square": "square",
        "model.factors": "factors",
        "model.fixed_effects": "fixed_effects",
        "model.instrument_mode": "instrument_mode",
        "model.external_instrument": "external_instrument",
        "model.robust": "robust",
        "model.weighted": "weighted",
        "model.include_fixed_effects_in_z": "include_fixed_effects_in_z",
        "subgroups.age_bands": "age_bands",
        "subgroups.education_split": "education_split",
        "subgroups.education_column": "education_column",
        "subgroups.drug_pairs": "drug_pairs",
        "subgroups.exclusion_variants": "exclusion_variants",
        "montecarlo.n": "mc_n",
        "montecarlo.beta": "mc_beta",
        "montecarlo.rho": "mc_rho",
        "montecarlo.delta": "mc_delta",
        "montecarlo.feedback": "mc_feedback",
        "montecarlo.fn": "mc_fn",
        "montecarlo.fp": "mc_fp",
        "montecarlo.prevalence": "mc_prevalence",
        "montecarlo.instrument_effect": "mc_instrument_effect",
        "montecarlo.reps": "mc_reps",
        "montecarlo.estimators": "mc_estimators",
    }
    cfg.defaulted = tuple(
        sorted(attr for key, attr in all_keys.items() if key not in provided)
    )
    return cfg
