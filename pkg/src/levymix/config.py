"""Sectioned key=value configuration files.

Sections are ``[levy]``, ``[spectrum]``, ``[nonlinearity]``, ``[numerics]``
and ``[verification]``.  Keys are case-sensitive; unknown sections or keys
are errors.  ``effective_config_text`` prints every key including defaults,
and its output parses back to the same model.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass

from levymix.levy_noise import LevyConfig
from levymix.spde_model import (
    ModelConfig,
    NonlinearitySpec,
    SpectrumSpec,
    VerificationConfig,
    build_example_spectrum,
)

REQUIRED = {"levy": ("alpha", "D", "K"), "spectrum": ("N",)}

DEFAULTS = {
    "levy": {"alpha": None, "D": None, "K": None, "c_nu": "1.0", "eps_small": "", "gaussian_correction": "true"},
    "spectrum": {"N": None, "source": "example_dirichlet:1", "lambdas": ""},
    "nonlinearity": {"kind": "zero", "a": "0.0", "g": "1.0", "modes": "all"},
    "numerics": {"dt": "0.001", "T_refractory": "1.0", "block_size": "4096", "record_every": "100"},
    "verification": {
        "p": "",
        "M": "1.0",
        "d_small": "0.05",
        "horizon": "10.0",
        "replicas": "1000",
        "seed": "0",
        "k_max": "20",
        "gap0": "0.001",
        "x0": "1:1.0",
        "y0": "",
        "observable": "tanh_mode:1:1.0",
        "contraction_diagnostics": "true",
        "tail_l": "3",
        "tail_t": "10.0",
        "noise_t": "1.0",
        "noise_replicas": "100000",
    },
}


class ConfigError(ValueError):
    """Malformed or invalid configuration."""


@dataclass
class RunConfig:
    model: ModelConfig
    settings: dict  # section -> key -> effective string value

    def get(self, section: str, key: str) -> str:
        return self.settings[section][key]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _sparse_vector(text: str) -> dict:
    """``"1:0.5, 3:-1"`` -> ``{0: 0.5, 2: -1.0}`` (1-based modes in the file)."""
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        try:
            m, v = item.split(":")
            mode = int(m)
            out[mode - 1] = float(v)
        except ValueError:
            raise ConfigError(f"bad sparse vector entry {item!r}; expected mode:value") from None
        if mode < 1:
            raise ConfigError("mode indices are 1-based")
    return out


def _fmt_sparse(d: dict) -> str:
    return ", ".join(f"{m + 1}:{v!r}" for m, v in sorted(d.items()))


def read_settings(text: str, overrides: list[str] | None = None) -> dict:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    settings = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    for sec in cp.sections():
        if sec not in DEFAULTS:
            raise ConfigError(f"unknown section [{sec}]")
        for key, val in cp.items(sec):
            if key not in DEFAULTS[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]; allowed: {', '.join(DEFAULTS[sec])}")
            settings[sec][key] = val.strip()
    for ov in overrides or []:
        try:
            lhs, val = ov.split("=", 1)
            sec, key = lhs.strip().split(".", 1)
        except ValueError:
            raise ConfigError(f"override {ov!r} must look like section.key=value") from None
        if sec not in DEFAULTS or key not in DEFAULTS[sec]:
            raise ConfigError(f"unknown override key {lhs!r}")
        settings[sec][key] = val.strip()
    for sec, keys in REQUIRED.items():
        for key in keys:
            if settings[sec][key] in (None, ""):
                raise ConfigError(f"missing required key {key!r} in [{sec}]")
    return settings


def build_model(settings: dict) -> ModelConfig:
    s = settings
    try:
        lv = s["levy"]
        alpha, D, K = float(lv["alpha"]), int(lv["D"]), float(lv["K"])
        eps = float(lv["eps_small"]) if lv["eps_small"] else None
        levy = LevyConfig(alpha, D, K, float(lv["c_nu"]), eps, _bool(lv["gaussian_correction"]))

        sp = s["spectrum"]
        N = int(sp["N"])
        src = sp["source"]
        if src.startswith("example_dirichlet"):
            _, _, d = src.partition(":")
            spectrum = build_example_spectrum(int(d or 1), N, D)
        elif src == "explicit":
            lam = [float(v) for v in sp["lambdas"].split(",") if v.strip()]
            if len(lam) != N:
                raise ConfigError(f"explicit spectrum lists {len(lam)} eigenvalues but N={N}")
            spectrum = SpectrumSpec(lam, D, "explicit")
        else:
            raise ConfigError(f"unknown spectrum source {src!r}")

        nl = s["nonlinearity"]
        if nl["kind"] == "zero":
            F = NonlinearitySpec.zero()
        elif nl["kind"] == "mode_tanh":
            modes = None if nl["modes"].strip() in ("", "all") else [int(m) - 1 for m in nl["modes"].split(",")]
            F = NonlinearitySpec.mode_tanh(float(nl["a"]), float(nl["g"]), N, modes)
        else:
            raise ConfigError(f"unknown nonlinearity kind {nl['kind']!r}")

        nu = s["numerics"]
        vf = s["verification"]
        ver = VerificationConfig(
            p=float(vf["p"]) if vf["p"] else None,
            M=float(vf["M"]),
            d_small=float(vf["d_small"]),
            horizon=float(vf["horizon"]),
            replicas=int(vf["replicas"]),
            seed=int(vf["seed"]),
            k_max=int(vf["k_max"]),
            gap0=float(vf["gap0"]),
            x0=_sparse_vector(vf["x0"]),
            y0=_sparse_vector(vf["y0"]),
            observable=vf["observable"],
            contraction_diagnostics=_bool(vf["contraction_diagnostics"]),
            record_every=int(nu["record_every"]),
            block_size=int(nu["block_size"]),
        )
        if ver.replicas < 1 or ver.block_size < 1 or ver.record_every < 1:
            raise ConfigError("replicas, block_size and record_every must be positive")
        if ver.seed < 0:
            raise ConfigError("seed must be non-negative")
        model = ModelConfig(levy, spectrum, F, float(nu["T_refractory"]), float(nu["dt"]), ver)
        from levymix.estimators import ObservableSpec

        obs = ObservableSpec.parse(vf["observable"])
        if obs.kind == "tanh_mode" and obs.mode >= N:
            raise ConfigError(f"observable mode {obs.mode + 1} outside 1..{N}")
        for key in ("tail_l", "noise_replicas"):
            if int(vf[key]) < 1:
                raise ConfigError(f"{key} must be >= 1")
        float(vf["tail_t"]), float(vf["noise_t"])
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return model


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    settings = read_settings(text, overrides)
    model = build_model(settings)
    _fill_effective(settings, model)
    return RunConfig(model, settings)


def parse_config(path) -> ModelConfig:
    return load_config(path).model


def _fill_effective(settings: dict, model: ModelConfig):
    """Replace blank defaults by the values actually used."""
    settings["levy"]["eps_small"] = repr(model.levy.eps_small)
    settings["verification"]["p"] = repr(model.verification.p)
    settings["verification"]["x0"] = _fmt_sparse(model.verification.x0)
    settings["verification"]["y0"] = _fmt_sparse(model.verification.y0)
    if settings["spectrum"]["source"] == "explicit":
        settings["spectrum"]["lambdas"] = ", ".join(repr(float(v)) for v in model.lambdas)


def effective_config_text(settings: dict) -> str:
    lines = []
    for sec, vals in settings.items():
        lines.append(f"[{sec}]")
        lines.extend(f"{k} = {v}" for k, v in vals.items())
        lines.append("")
    return "\n".join(lines)
