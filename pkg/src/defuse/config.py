"""Run configuration: defaults, TOML file loading, ``section.key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json

from .errors import ConfigError

DEFAULTS: dict[str, dict] = {
    "nuisance": {
        "K": 5,
        "eps_clip": 0.01,
        "ratio_learner": "logistic",
        "cmean_learner": "poly2",
        "ratio_penalty": 1.0,
    },
    "estimator": {
        "family": "linear",
        "strategy": "cm",
        "ci_level": 0.95,
        "one_step": True,
        "control_learner": "poly2",
        "ss_learner": "auto",
        "ss_family": "",
        "z_max": 8,
        "m_centers": 200,
    },
    "screening": {
        "enabled": True,
        "epsilon": 0.02,
        "basis": "quadratic",
        "recalibrate": True,
    },
    "simbench": {
        "n": 500,
        "N": 20000,
        "rho": 0.0,  # 0 means the setting's default
        "R": 0,
        "shift": -1.0,  # negative means the setting's default
        "nonlinearity": 0.5,
        "omega_size": 4,
        "gamma_size": 22,
        "misaligned": 2,
        "strength": 0.5,
        "mean_matched": False,
        "noise": 0.0,
        "reps": 200,
        "oracle_rows": 1000000,
    },
    "run": {
        "seed": 0,
        "out": ".",
        "verbosity": 0,
    },
}


def _coerce(value, default, where):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "1", "yes", "on"):
            return True
        if isinstance(value, str) and value.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    return str(value)


def resolve(file_config: dict | None = None, overrides: dict[str, str] | None = None) -> dict:
    """Defaults, then the file, then ``section.key`` overrides. Unknown keys fail."""
    cfg = copy.deepcopy(DEFAULTS)
    for section, values in (file_config or {}).items():
        if section not in cfg or not isinstance(values, dict):
            raise ConfigError(f"unknown config section [{section}]")
        for key, v in values.items():
            if key not in cfg[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            cfg[section][key] = _coerce(v, DEFAULTS[section][key], f"{section}.{key}")
    for dotted, v in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in cfg or key not in cfg[section]:
            raise ConfigError(f"unknown config key {dotted}")
        cfg[section][key] = _coerce(v, DEFAULTS[section][key], dotted)
    return cfg


def load_file(path) -> dict:
    import tomli

    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON of the resolved config."""
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def pipeline_from(cfg: dict):
    """Build a ``PipelineConfig`` from a resolved config dict."""
    from .estimator import EstimatorConfig, PipelineConfig
    from .nuisance import NuisanceConfig

    nu, es, sc = cfg["nuisance"], cfg["estimator"], cfg["screening"]
    try:
        est = EstimatorConfig(
            family=es["family"], strategy=es["strategy"], ci_level=es["ci_level"], one_step=es["one_step"],
            control_learner=es["control_learner"], ss_learner=es["ss_learner"],
            ss_family=es["ss_family"] or None, z_max=es["z_max"], m_centers=es["m_centers"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if sc["basis"] not in ("constant", "linear", "quadratic"):
        raise ConfigError("screening.basis must be constant, linear or quadratic")
    if not 0.0 < sc["epsilon"] < 0.5:
        raise ConfigError("screening.epsilon must lie in (0, 1/2)")
    if nu["K"] < 2:
        raise ConfigError("nuisance.K must be at least 2")
    if nu["cmean_learner"] not in ("linear", "poly2", "krr"):
        raise ConfigError("nuisance.cmean_learner must be linear, poly2 or krr")
    if nu["ratio_learner"] != "logistic":
        raise ConfigError("nuisance.ratio_learner must be logistic")
    if es["control_learner"] not in ("linear", "poly2", "krr", "forest"):
        raise ConfigError("estimator.control_learner must be linear, poly2, krr or forest")
    if es["ss_learner"] not in ("auto", "linear", "poly2", "krr", "forest"):
        raise ConfigError("estimator.ss_learner must be auto, linear, poly2, krr or forest")
    nuis = NuisanceConfig(K=nu["K"], eps_clip=nu["eps_clip"], ratio_learner=nu["ratio_learner"],
                          cmean_learner=nu["cmean_learner"], ratio_penalty=nu["ratio_penalty"])
    return PipelineConfig(nuisance=nuis, estimator=est, screening_enabled=sc["enabled"],
                          screening_epsilon=sc["epsilon"], screening_basis=sc["basis"],
                          recalibrate=sc["recalibrate"], seed=cfg["run"]["seed"])
