"""INI run configuration.

Grammar (all keys optional unless noted; lists are comma-separated)::

    [run]
    scheme = explicit | implicit_time | implicit_spacetime
    family = spectral | fe
    n = 8                     ; fine reference size for implicit_time
    m = 64
    T = 1.0
    paths = 1
    seed = 0
    gamma = 0.5
    initial = sine1           ; sine1 | bump | zero | parabola | ones | c1, c2, ...
    quadrature_order =        ; blank = default for the family
    tolerance = 1e-10
    layout = single           ; single | per_path
    output_dir = out

    [operator]
    family = linear_heat      ; linear_heat | example
    mu_scale = 1.0            ; linear_heat
    sigma = 1.0               ; linear_heat: amplitude of mode j on W^j
    p = 4                     ; example
    a = 1.0
    b = 1.0                   ; one entry per noise component
    c = 0.0
    d = sine1:0.5             ; number, or sine<k>:<amplitude>
    epsilon = 0.1
    time_factor = const       ; const | ramp
    field_amplitude = 0.0     ; > 0 makes a a seeded random field
    field_modes = 4

    [scan]
    n_list = 2, 4, 6, 8, 10, 12
    m_list = 16, 32, 64, 128, 256, 512
    mode = deterministic      ; deterministic | stochastic
    initial = ones

    [ladder]
    levels = 8:16, 8:64, 8:256
    reference = oracle        ; oracle | <n>:<m>

    [check]
    samples = 10000
    k = none                  ; none | auto | <float>
"""
from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields

from . import operators as ops
from .schemes import Scheme
from .spaces import PROFILES, Family


class ConfigError(ValueError):
    pass


def _floats(text: str, key: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"{key}: expected a comma-separated list of numbers, got {text!r}") from None


def _ints(text: str, key: str) -> tuple:
    vals = _floats(text, key)
    if any(v != int(v) for v in vals):
        raise ConfigError(f"{key}: expected integers, got {text!r}")
    return tuple(int(v) for v in vals)


def _pairs(text: str, key: str) -> tuple:
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        try:
            n, m = item.split(":")
            out.append((int(n), int(m)))
        except ValueError:
            raise ConfigError(f"{key}: expected n:m entries, got {item!r}") from None
    return tuple(out)


def _join(vals) -> str:
    return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in vals)


@dataclass
class OperatorConfig:
    family: str = "linear_heat"
    mu_scale: float = 1.0
    sigma: tuple = (1.0,)
    p: float = 2.0
    a: float = 1.0
    b: tuple = ()
    c: tuple = ()
    d: tuple = ()
    epsilon: float = 0.1
    time_factor: str = "const"
    field_amplitude: float = 0.0
    field_modes: int = 4
    validate: bool = True

    def build(self, T: float = 1.0, seed: int = 0):
        tf = {"const": ops.UnitFactor(), "ramp": ops.RampFactor(T)}.get(self.time_factor)
        if tf is None:
            raise ConfigError(f"[operator] time_factor: expected const or ramp, got {self.time_factor!r}")
        try:
            if self.family == "linear_heat":
                return ops.make_linear_heat(self.mu_scale, self.sigma, T=T, time_factor=tf)
            if self.family == "example":
                a = self.a if self.field_amplitude == 0 else ops.SeededField(self.a, self.field_amplitude,
                                                                            self.field_modes, seed)
                d = tuple(_profile(v) for v in self.d)
                return ops.make_example_family(self.p, a, self.b, self.c, d, self.epsilon, T=T, time_factor=tf,
                                               validate=self.validate)
        except (ops.HypothesisError, ValueError) as exc:
            raise ConfigError(f"[operator] {exc}") from None
        raise ConfigError(f"[operator] family: expected linear_heat or example, got {self.family!r}")


def _profile(v):
    if isinstance(v, str) and v.startswith("sine"):
        k, amp = v[4:].split(":")
        return ops.SineMode(int(k), float(amp))
    return float(v)


@dataclass
class RunConfig:
    scheme: str = "implicit_spacetime"
    family: str = "spectral"
    n: int = 8
    m: int = 64
    T: float = 1.0
    paths: int = 1
    seed: int = 0
    gamma: float = 0.5
    initial: object = "sine1"
    quadrature_order: int | None = None
    tolerance: float = 1e-10
    layout: str = "single"
    output_dir: str = "out"
    operator: OperatorConfig = field(default_factory=OperatorConfig)
    n_list: tuple = (2, 4, 6, 8, 10, 12)
    m_list: tuple = (16, 32, 64, 128, 256, 512)
    scan_mode: str = "deterministic"
    scan_initial: object = "ones"
    levels: tuple = ((8, 16), (8, 64), (8, 256))
    reference: object = "oracle"
    samples: int = 10000
    k: str = "none"

    def validate(self) -> "RunConfig":
        try:
            Scheme.parse(self.scheme)
        except ValueError as exc:
            raise ConfigError(f"[run] scheme: {exc}") from None
        try:
            Family.parse(self.family)
        except ValueError as exc:
            raise ConfigError(f"[run] family: {exc}") from None
        for key in ("n", "m", "paths"):
            if getattr(self, key) < 1:
                raise ConfigError(f"[run] {key}: must be >= 1")
        if self.T <= 0:
            raise ConfigError("[run] T: must be positive")
        if not 0 < self.gamma < 1:
            raise ConfigError("[run] gamma: must lie in (0, 1)")
        if self.layout not in ("single", "per_path"):
            raise ConfigError("[run] layout: expected single or per_path")
        for key in ("initial", "scan_initial"):
            v = getattr(self, key)
            if isinstance(v, str) and v not in PROFILES and v != "ones":
                raise ConfigError(f"[run] {key}: unknown profile {v!r}")
        if self.scan_mode not in ("deterministic", "stochastic"):
            raise ConfigError("[scan] mode: expected deterministic or stochastic")
        if self.k not in ("none", "auto"):
            try:
                float(self.k)
            except ValueError:
                raise ConfigError(f"[check] k: expected none, auto or a number, got {self.k!r}") from None
        if self.samples < 1:
            raise ConfigError("[check] samples: must be >= 1")
        return self

    def pair(self):
        return self.operator.build(self.T, self.seed)

    # -- serialization ----------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = [list(x) for x in self.levels]
        return d

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        init = self.initial if isinstance(self.initial, str) else _join(self.initial)
        cp["run"] = {
            "scheme": self.scheme, "family": self.family, "n": str(self.n), "m": str(self.m), "T": repr(self.T),
            "paths": str(self.paths), "seed": str(self.seed), "gamma": repr(self.gamma), "initial": init,
            "quadrature_order": "" if self.quadrature_order is None else str(self.quadrature_order),
            "tolerance": repr(self.tolerance), "layout": self.layout, "output_dir": self.output_dir,
        }
        o = self.operator
        cp["operator"] = {
            "family": o.family, "mu_scale": repr(o.mu_scale), "sigma": _join(o.sigma), "p": repr(o.p),
            "a": repr(o.a), "b": _join(o.b), "c": _join(o.c), "d": _join(o.d), "epsilon": repr(o.epsilon),
            "time_factor": o.time_factor, "field_amplitude": repr(o.field_amplitude),
            "field_modes": str(o.field_modes), "validate": str(o.validate).lower(),
        }
        sinit = self.scan_initial if isinstance(self.scan_initial, str) else _join(self.scan_initial)
        cp["scan"] = {"n_list": _join(self.n_list), "m_list": _join(self.m_list), "mode": self.scan_mode,
                      "initial": sinit}
        ref = self.reference if isinstance(self.reference, str) else f"{self.reference[0]}:{self.reference[1]}"
        cp["ladder"] = {"levels": ", ".join(f"{n}:{m}" for n, m in self.levels), "reference": ref}
        cp["check"] = {"samples": str(self.samples), "k": self.k}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        known = {"run", "operator", "scan", "ladder", "check"}
        extra = set(cp.sections()) - known
        if extra:
            raise ConfigError(f"unknown section(s): {sorted(extra)}")
        cfg = cls()
        run = cp["run"] if cp.has_section("run") else {}
        _check_keys("run", run, {"scheme", "family", "n", "m", "T", "paths", "seed", "gamma", "initial",
                                 "quadrature_order", "tolerance", "layout", "output_dir"})
        conv = {"n": int, "m": int, "paths": int, "seed": int, "T": float, "gamma": float, "tolerance": float}
        for key, val in run.items():
            if key == "initial":
                cfg.initial = _initial(val, "[run] initial")
            elif key == "quadrature_order":
                cfg.quadrature_order = int(val) if val.strip() else None
            else:
                setattr(cfg, key, _convert(conv.get(key, str), val, f"[run] {key}"))
        if cp.has_section("operator"):
            sec = cp["operator"]
            ofields = {f.name: f for f in fields(OperatorConfig)}
            _check_keys("operator", sec, set(ofields))
            op = OperatorConfig()
            for key, val in sec.items():
                if key in ("sigma", "b", "c"):
                    setattr(op, key, _floats(val, f"[operator] {key}"))
                elif key == "d":
                    op.d = tuple(_d_entry(v.strip()) for v in val.split(",") if v.strip())
                elif key == "validate":
                    op.validate = val.strip().lower() in ("1", "true", "yes")
                elif key in ("family", "time_factor"):
                    setattr(op, key, val.strip())
                elif key == "field_modes":
                    op.field_modes = _convert(int, val, "[operator] field_modes")
                else:
                    setattr(op, key, _convert(float, val, f"[operator] {key}"))
            cfg.operator = op
        if cp.has_section("scan"):
            sec = cp["scan"]
            _check_keys("scan", sec, {"n_list", "m_list", "mode", "initial"})
            if "n_list" in sec:
                cfg.n_list = _ints(sec["n_list"], "[scan] n_list")
            if "m_list" in sec:
                cfg.m_list = _ints(sec["m_list"], "[scan] m_list")
            cfg.scan_mode = sec.get("mode", cfg.scan_mode).strip()
            if "initial" in sec:
                cfg.scan_initial = _initial(sec["initial"], "[scan] initial")
        if cp.has_section("ladder"):
            sec = cp["ladder"]
            _check_keys("ladder", sec, {"levels", "reference"})
            if "levels" in sec:
                cfg.levels = _pairs(sec["levels"], "[ladder] levels")
            ref = sec.get("reference", "oracle").strip()
            cfg.reference = ref if ref == "oracle" else _pairs(ref, "[ladder] reference")[0]
        if cp.has_section("check"):
            sec = cp["check"]
            _check_keys("check", sec, {"samples", "k"})
            cfg.samples = _convert(int, sec.get("samples", str(cfg.samples)), "[check] samples")
            cfg.k = sec.get("k", cfg.k).strip()
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_ini(fh.read())


def _check_keys(section, sec, allowed):
    bad = set(sec.keys()) - set(allowed)
    if bad:
        raise ConfigError(f"[{section}] unknown key(s): {sorted(bad)}")


def _convert(kind, val, key):
    try:
        return kind(val.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot read {val!r} as {kind.__name__}") from None


def _initial(val: str, key: str):
    val = val.strip()
    if val and (val[0].isdigit() or val[0] in "-+."):
        return _floats(val, key)
    return val


def _d_entry(v: str):
    if v.startswith("sine"):
        try:
            k, amp = v[4:].split(":")
            int(k), float(amp)
        except ValueError:
            raise ConfigError(f"[operator] d: expected sine<k>:<amplitude>, got {v!r}") from None
        return v
    return _convert(float, v, "[operator] d")
