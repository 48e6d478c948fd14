"""Strict YAML run configuration.

Every physical field carries its unit in the key name (``_cm``, ``_K``,
``_ps``); conversion into internal units happens in the ``build_*`` helpers
and nowhere else.  Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .network import PRESETS, Network, Preset, preset_network
from .spectral import (
    AdolphsRenger,
    DrudeLorentz,
    ModeComb,
    SpectralDensity,
    SuperOhmic,
    combine,
    load_mode_file,
)
from .units import CM_TO_RADPS, cm

__all__ = [
    "ConfigError",
    "NetworkConfig",
    "OptimizerConfig",
    "DynamicsConfig",
    "RatesConfig",
    "ScanConfig",
    "AblationConfig",
    "ConvergenceConfig",
    "RunConfig",
    "parse_config",
    "load_config",
    "emit_config",
    "config_hash",
    "build_bath",
    "build_problem",
]

ASYMMETRY_TOL = 1e-9
#: site: |n><n|; eigenstate: eigenvector with most weight on initial_site;
#: eigenstate_index: k-th eigenvector by energy; matrix: .npy file holding rho0
INITIAL_KINDS = ("site", "eigenstate", "eigenstate_index", "matrix")


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-8`` (no dot) as a float, as YAML 1.2 and JSON do."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+][0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


class ConfigError(ValueError):
    """Validation failure; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class NetworkConfig:
    preset: str | None = None
    file: str | None = None
    energies_cm: tuple | None = None
    couplings_cm: tuple | None = None
    labels: tuple | None = None
    mode_file: str | None = None


@dataclass(frozen=True)
class OptimizerConfig:
    p: int | None = None
    tol: float = 5e-4
    max_iter: int = 500
    damping: float = 0.5


@dataclass(frozen=True)
class DynamicsConfig:
    solver: str = "variational"
    initial: str = "site"
    initial_site: Any = 0
    eigenstate_index: int = 0
    initial_file: str | None = None
    t_max_ps: float = 2.0
    stride_ps: float = 0.01
    rtol: float = 1e-8
    atol: float = 1e-10
    markov: bool = False
    lamb_shift: bool = True
    dump_states: bool = False


@dataclass(frozen=True)
class RatesConfig:
    site: Any = 0
    alpha_cm: float | None = None
    fit_terms: int = 12
    expansion_order: int | None = None
    t_fit_ps: float = 0.6
    n_samples: int = 601
    omega_min_cm: float = -1000.0
    omega_max_cm: float = 1000.0
    n_omega: int = 201


@dataclass(frozen=True)
class ScanConfig:
    A_cm: tuple | None = None
    T_K: tuple | None = None


@dataclass(frozen=True)
class AblationConfig:
    target: Any = None
    threshold: float = 0.8
    cluster_size: int = 5


@dataclass(frozen=True)
class ConvergenceConfig:
    p_min: int = 1
    p_max: int = 8
    tol: float = 1e-10


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration with defaults filled."""

    network: NetworkConfig
    baths: Any = None
    temperature_K: float | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    rates: RatesConfig = field(default_factory=RatesConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    convergence: ConvergenceConfig = field(default_factory=ConvergenceConfig)
    output_dir: str | None = None
    seed: int = 0


_SECTIONS = {
    "network": NetworkConfig,
    "optimizer": OptimizerConfig,
    "dynamics": DynamicsConfig,
    "rates": RatesConfig,
    "scan": ScanConfig,
    "ablation": AblationConfig,
    "convergence": ConvergenceConfig,
}

# (key, expected unit / type) used in error messages
_UNITS = {
    "temperature_K": "K",
    "energies_cm": "cm^-1",
    "couplings_cm": "cm^-1",
    "t_max_ps": "ps",
    "stride_ps": "ps",
    "t_fit_ps": "ps",
    "alpha_cm": "cm^-1",
    "omega_min_cm": "cm^-1",
    "omega_max_cm": "cm^-1",
    "A_cm": "cm^-1",
    "T_K": "K",
}

_BATH_KEYS = {
    "drude_lorentz": {"terms_cm"},
    "super_ohmic": {"A_cm", "wc_cm"},
    "adolphs_renger": {"S", "s1", "s2", "w1_cm", "w2_cm"},
    "mode_comb": {"modes_cm", "file", "gamma_cm"},
    "sum": {"parts"},
}


def _freeze(x):
    if isinstance(x, list):
        return tuple(_freeze(v) for v in x)
    if isinstance(x, dict):
        return {k: _freeze(v) for k, v in x.items()}
    return x


def _thaw(x):
    if isinstance(x, tuple):
        return [_thaw(v) for v in x]
    if isinstance(x, dict):
        return {k: _thaw(v) for k, v in x.items()}
    return x


def _number(key, v, integer=False, positive=False, allow_none=False):
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        unit = _UNITS.get(key.rsplit(".", 1)[-1])
        raise ConfigError(key, f"expected a number{f' in {unit}' if unit else ''}, got {v!r}")
    if integer:
        if float(v) != int(v):
            raise ConfigError(key, f"expected an integer, got {v!r}")
        v = int(v)
    else:
        v = float(v)
    if not np.isfinite(v):
        raise ConfigError(key, "must be finite")
    if positive and v <= 0:
        raise ConfigError(key, f"must be positive, got {v!r}")
    return v


def _section(cls, raw, prefix):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(prefix, "expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    for k in raw:
        if k not in names:
            raise ConfigError(f"{prefix}.{k}", f"unknown key; allowed: {sorted(names)}")
    return cls(**{k: _freeze(v) for k, v in raw.items()})


def _resolve(path, base: Path, key: str) -> str:
    p = Path(path)
    if not p.is_absolute():
        p = base / p
    if not p.exists():
        raise ConfigError(key, f"file not found: {p}")
    return str(p.resolve())


def _check_bath(raw, key: str, base: Path):
    if not isinstance(raw, dict) or len(raw) != 1:
        raise ConfigError(key, f"a bath is a one-key mapping from a kind in {sorted(_BATH_KEYS)}")
    (kind, body), = raw.items()
    if kind not in _BATH_KEYS:
        raise ConfigError(f"{key}.{kind}", f"unknown bath kind; choose from {sorted(_BATH_KEYS)}")
    k2 = f"{key}.{kind}"
    if kind == "sum":
        parts = body.get("parts") if isinstance(body, dict) else None
        if set(body) != {"parts"} or not isinstance(parts, list) or not parts:
            raise ConfigError(k2, "expects 'parts': a non-empty list of baths")
        return {kind: {"parts": [_check_bath(p, f"{k2}.parts[{i}]", base) for i, p in enumerate(parts)]}}
    if not isinstance(body, dict):
        raise ConfigError(k2, "expected a mapping")
    for k in body:
        if k not in _BATH_KEYS[kind]:
            raise ConfigError(f"{k2}.{k}", f"unknown key; allowed: {sorted(_BATH_KEYS[kind])}")
    out = dict(body)
    if kind == "drude_lorentz":
        terms = body.get("terms_cm")
        if not isinstance(terms, list) or not terms:
            raise ConfigError(f"{k2}.terms_cm", "expected a list of [lambda, gamma, wc] triples in cm^-1")
        for i, t in enumerate(terms):
            if not isinstance(t, list) or len(t) not in (2, 3):
                raise ConfigError(f"{k2}.terms_cm[{i}]", "expected [lambda, gamma] or [lambda, gamma, wc] in cm^-1")
        out["terms_cm"] = [[_number(f"{k2}.terms_cm[{i}]", x) for x in (t if len(t) == 3 else t + [0.0])]
                           for i, t in enumerate(terms)]
    elif kind == "mode_comb":
        if "gamma_cm" not in body:
            raise ConfigError(f"{k2}.gamma_cm", "missing linewidth in cm^-1")
        out["gamma_cm"] = _number(f"{k2}.gamma_cm", body["gamma_cm"], positive=True)
        if ("file" in body) == ("modes_cm" in body):
            raise ConfigError(k2, "give exactly one of 'file' or 'modes_cm'")
        if "file" in body:
            out["file"] = _resolve(body["file"], base, f"{k2}.file")
        else:
            modes = body["modes_cm"]
            if not isinstance(modes, list) or any(not isinstance(m, list) or len(m) != 2 for m in modes):
                raise ConfigError(f"{k2}.modes_cm", "expected a list of [frequency_cm, huang_rhys] pairs")
            out["modes_cm"] = [[_number(f"{k2}.modes_cm[{i}]", x) for x in m] for i, m in enumerate(modes)]
    else:
        for k in _BATH_KEYS[kind]:
            if k not in body:
                raise ConfigError(f"{k2}.{k}", "missing" + (" (cm^-1)" if k.endswith("_cm") else ""))
            out[k] = _number(f"{k2}.{k}", body[k])
    try:
        build_bath(out if kind != "sum" else {}, kind)
    except (ValueError, TypeError) as exc:
        raise ConfigError(k2, str(exc)) from None
    return {kind: out}


def build_bath(body: dict, kind: str | None = None) -> SpectralDensity:
    """Spectral density from a validated bath tree (units converted here)."""
    if kind is None:
        (kind, body), = body.items()
    if kind == "drude_lorentz":
        return DrudeLorentz(tuple(tuple(cm(x) for x in t) for t in body["terms_cm"]))
    if kind == "super_ohmic":
        return SuperOhmic(cm(body["A_cm"]), cm(body["wc_cm"]))
    if kind == "adolphs_renger":
        return AdolphsRenger(body["S"], body["s1"], body["s2"], cm(body["w1_cm"]), cm(body["w2_cm"]))
    if kind == "mode_comb":
        if "file" in body:
            return load_mode_file(body["file"], cm(body["gamma_cm"]), CM_TO_RADPS)
        return ModeComb(tuple((s, cm(w)) for w, s in body["modes_cm"]), cm(body["gamma_cm"]))
    if kind == "sum":
        return combine([build_bath(p) for p in body["parts"]])
    raise ValueError(f"unknown bath kind {kind!r}")


def _check_network(net: NetworkConfig, base: Path) -> NetworkConfig:
    # a file-backed network re-emits its contents inline; the file wins on re-parse
    keys = ("preset", "file") if net.file is not None else ("preset", "energies_cm")
    given = [k for k in keys if getattr(net, k) is not None]
    if len(given) != 1:
        raise ConfigError("network", "give exactly one of 'preset', 'file' or inline 'energies_cm'/'couplings_cm'")
    upd = {}
    if net.preset is not None and net.preset not in PRESETS:
        raise ConfigError("network.preset", f"unknown preset {net.preset!r}; choose from {list(PRESETS)}")
    if net.mode_file is not None:
        upd["mode_file"] = _resolve(net.mode_file, base, "network.mode_file")
    if net.file is not None:
        path = _resolve(net.file, base, "network.file")
        with open(path) as fh:
            body = yaml.load(fh, Loader=_Loader) or {}
        extra = set(body) - {"energies_cm", "couplings_cm", "labels"}
        if extra:
            raise ConfigError(f"network.file.{sorted(extra)[0]}", "unknown key in network file")
        upd.update(file=path, energies_cm=_freeze(body.get("energies_cm")),
                   couplings_cm=_freeze(body.get("couplings_cm")), labels=_freeze(body.get("labels")))
    net = dataclasses.replace(net, **upd)
    if net.energies_cm is not None or net.couplings_cm is not None:
        prefix = "network.file" if net.file else "network"
        E = net.energies_cm
        V = net.couplings_cm
        if E is None or V is None:
            raise ConfigError(prefix, "inline networks need both energies_cm and couplings_cm")
        E = [_number(f"{prefix}.energies_cm[{i}]", x) for i, x in enumerate(E)]
        n = len(E)
        if len(V) != n or any(not isinstance(r, tuple) or len(r) != n for r in V):
            raise ConfigError(f"{prefix}.couplings_cm", f"expected a {n}x{n} matrix in cm^-1")
        Vm = np.array([[_number(f"{prefix}.couplings_cm[{i}][{j}]", x) for j, x in enumerate(r)] for i, r in enumerate(V)])
        for i in range(n):
            if Vm[i, i] != 0:
                raise ConfigError(f"{prefix}.couplings_cm[{i}][{i}]", "diagonal couplings must be 0 (put energies in energies_cm)")
        asym = np.abs(Vm - Vm.T)
        if asym.max(initial=0.0) > ASYMMETRY_TOL * max(1.0, np.abs(Vm).max()):
            i, j = np.unravel_index(np.argmax(asym), asym.shape)
            i, j = min(i, j), max(i, j)
            raise ConfigError(f"{prefix}.couplings_cm[{i}][{j}]",
                              f"coupling matrix not symmetric: [{i}][{j}]={float(Vm[i, j])!r} vs [{j}][{i}]={float(Vm[j, i])!r} cm^-1")
        if net.labels is not None and len(net.labels) != n:
            raise ConfigError(f"{prefix}.labels", f"expected {n} labels")
        labels = None if net.labels is None else tuple(str(x) for x in net.labels)
        net = dataclasses.replace(net, energies_cm=tuple(E), couplings_cm=tuple(tuple(r) for r in Vm.tolist()),
                                  labels=labels)
    return net


def parse_config(raw: dict, base: str | Path = ".") -> RunConfig:
    """Validate a configuration tree; relative paths resolve against ``base``."""
    base = Path(base)
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a mapping at the top level")
    names = {f.name for f in dataclasses.fields(RunConfig)}
    for k in raw:
        if k not in names:
            raise ConfigError(k, f"unknown key; allowed: {sorted(names)}")
    if "network" not in raw:
        raise ConfigError("network", "missing")
    kw = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kw[name] = _section(cls, raw[name], name)
    kw["network"] = _check_network(kw["network"], base)
    if "dynamics" in kw and kw["dynamics"].initial_file is not None:
        kw["dynamics"] = dataclasses.replace(
            kw["dynamics"], initial_file=_resolve(kw["dynamics"].initial_file, base, "dynamics.initial_file"))
    if raw.get("baths") is not None:
        b = raw["baths"]
        if isinstance(b, list):
            kw["baths"] = _freeze([_check_bath(x, f"baths[{i}]", base) for i, x in enumerate(b)])
        else:
            kw["baths"] = _freeze(_check_bath(b, "baths", base))
    if raw.get("temperature_K") is not None:
        T = _number("temperature_K", raw["temperature_K"])
        if T < 0:
            raise ConfigError("temperature_K", "must be >= 0 K")
        kw["temperature_K"] = T
    if raw.get("output_dir") is not None:
        kw["output_dir"] = str(raw["output_dir"])
    if "seed" in raw:
        kw["seed"] = _number("seed", raw["seed"], integer=True)
    cfg = RunConfig(**kw)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    o = cfg.optimizer
    _number("optimizer.p", o.p, integer=True, positive=True, allow_none=True)
    _number("optimizer.tol", o.tol, positive=True)
    _number("optimizer.max_iter", o.max_iter, integer=True, positive=True)
    if not 0 < _number("optimizer.damping", o.damping) <= 1:
        raise ConfigError("optimizer.damping", "must lie in (0, 1]")
    d = cfg.dynamics
    if d.solver not in ("variational", "polaron", "redfield"):
        raise ConfigError("dynamics.solver", "choose from variational, polaron, redfield")
    if d.initial not in INITIAL_KINDS:
        raise ConfigError("dynamics.initial", f"choose from {', '.join(INITIAL_KINDS)}")
    _number("dynamics.eigenstate_index", d.eigenstate_index, integer=True)
    if d.initial == "matrix" and d.initial_file is None:
        raise ConfigError("dynamics.initial_file", "required when initial is 'matrix'")
    _number("dynamics.t_max_ps", d.t_max_ps, positive=True)
    _number("dynamics.stride_ps", d.stride_ps, positive=True)
    if d.stride_ps > d.t_max_ps:
        raise ConfigError("dynamics.stride_ps", "larger than t_max_ps")
    _number("dynamics.rtol", d.rtol, positive=True)
    _number("dynamics.atol", d.atol, positive=True)
    for k in ("markov", "lamb_shift", "dump_states"):
        if not isinstance(getattr(d, k), bool):
            raise ConfigError(f"dynamics.{k}", "expected true or false")
    r = cfg.rates
    _number("rates.alpha_cm", r.alpha_cm, allow_none=True)
    _number("rates.fit_terms", r.fit_terms, integer=True, positive=True)
    _number("rates.expansion_order", r.expansion_order, integer=True, positive=True, allow_none=True)
    _number("rates.t_fit_ps", r.t_fit_ps, positive=True)
    _number("rates.n_samples", r.n_samples, integer=True, positive=True)
    _number("rates.omega_min_cm", r.omega_min_cm)
    _number("rates.omega_max_cm", r.omega_max_cm)
    _number("rates.n_omega", r.n_omega, integer=True, positive=True)
    if r.omega_max_cm < r.omega_min_cm:
        raise ConfigError("rates.omega_max_cm", "below omega_min_cm")
    s = cfg.scan
    for k in ("A_cm", "T_K"):
        v = getattr(s, k)
        if v is not None:
            if not isinstance(v, tuple) or not v:
                raise ConfigError(f"scan.{k}", f"expected a non-empty list in {_UNITS[k]}")
            vals = [_number(f"scan.{k}[{i}]", x) for i, x in enumerate(v)]
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ConfigError(f"scan.{k}", "values must increase strictly")
    if s.A_cm is not None and s.T_K is not None:
        raise ConfigError("scan", "give one of A_cm or T_K, not both")
    a = cfg.ablation
    if not 0 < _number("ablation.threshold", a.threshold) <= 1:
        raise ConfigError("ablation.threshold", "must lie in (0, 1]")
    _number("ablation.cluster_size", a.cluster_size, integer=True, positive=True)
    c = cfg.convergence
    _number("convergence.p_min", c.p_min, integer=True, positive=True)
    _number("convergence.p_max", c.p_max, integer=True, positive=True)
    _number("convergence.tol", c.tol, positive=True)
    if c.p_max < c.p_min:
        raise ConfigError("convergence.p_max", "below p_min")
    if isinstance(cfg.baths, tuple) and cfg.network.energies_cm is not None:
        if len(cfg.baths) != len(cfg.network.energies_cm):
            raise ConfigError("baths", f"expected one bath per site ({len(cfg.network.energies_cm)})")


def load_config(path: str | Path) -> RunConfig:
    """Read a YAML config, or the config embedded in a JSON run manifest."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("<file>", str(exc)) from None
    try:
        raw = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from None
    if isinstance(raw, dict) and "manifest_version" in raw:
        raw = raw["config"]
    return parse_config(raw, path.parent)


def to_dict(cfg: RunConfig) -> dict:
    return _thaw(dataclasses.asdict(cfg))


def emit_config(cfg: RunConfig) -> str:
    """Canonical YAML: every field present, sorted keys."""
    return yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=False)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(to_dict(cfg), sort_keys=True).encode()).hexdigest()


def build_problem(cfg: RunConfig) -> Preset:
    """Network, per-site baths (internal units) and temperature in K."""
    nc = cfg.network
    if nc.preset is not None:
        pre = preset_network(nc.preset, mode_file=nc.mode_file)
    else:
        net = Network.from_cm(np.array(nc.energies_cm), np.array(nc.couplings_cm), nc.labels)
        pre = Preset(net, (), 300.0, nc.file or "inline network")
    n = pre.network.n_sites
    baths = pre.baths
    if cfg.baths is not None:
        if isinstance(cfg.baths, tuple):
            if len(cfg.baths) != n:
                raise ConfigError("baths", f"expected one bath per site ({n})")
            baths = tuple(build_bath(_thaw(b)) for b in cfg.baths)
        else:
            baths = (build_bath(_thaw(cfg.baths)),) * n
    if not baths:
        raise ConfigError("baths", "required for networks without a preset")
    T = cfg.temperature_K if cfg.temperature_K is not None else pre.temperature
    return Preset(pre.network, tuple(baths), T, pre.notes, pre.groups)
