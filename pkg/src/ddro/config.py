"""Experiment configuration: a small sectioned key/value format.

Grammar (one statement per line)::

    # comment                      blank lines and '#' comments are ignored
    [section]                      opens a section; keys before any section are top level
    key = value                    value is a Python literal (number, "string",
                                   [list], (tuple), True/False/None); anything
                                   that is not a literal is kept as a bare string

Every parse or validation error names the file and line it came from, so a
bad value reads ``desk.cfg:14: inner.kappa must lie in (0, 1), got 1.5``.
``configparser`` is not used because it drops line numbers after parsing.
"""

from __future__ import annotations

import ast
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import NoiseSpec, SynthSpec
from .diffusion import SIGMA_MODES
from .inner import REWARD_MODES

METHODS = ("ml", "dml", "ddro", "wdro", "kldro")
OUTPUT_ROOT_ENV = "DDRO_OUTPUT_ROOT"


class ConfigError(ValueError):
    def __init__(self, msg, source="<config>", line=None):
        self.source, self.line = source, line
        where = f"{source}:{line}: " if line else f"{source}: "
        super().__init__(where + msg)


def parse_document(text: str, source: str = "<config>") -> tuple[dict, dict]:
    """Text -> ({section: {key: value}}, {"section.key": line}). Top-level keys use section ''."""
    doc: dict = {"": {}}
    lines: dict = {}
    section = ""
    for n, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if not s or s.startswith("#"):
            continue
        if s.startswith("["):
            if not s.endswith("]") or not s[1:-1].strip():
                raise ConfigError(f"malformed section header {raw.strip()!r}", source, n)
            section = s[1:-1].strip()
            if section in doc:
                raise ConfigError(f"section [{section}] appears twice", source, n)
            doc[section] = {}
            continue
        if "=" not in s:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", source, n)
        key, val = (p.strip() for p in s.split("=", 1))
        if not key.isidentifier():
            raise ConfigError(f"invalid key {key!r}", source, n)
        if key in doc[section]:
            raise ConfigError(f"duplicate key {key!r}", source, n)
        doc[section][key] = _literal(val)
        lines[f"{section}.{key}" if section else key] = n
    return doc, lines


def _literal(val: str):
    """A Python literal, else the text before any trailing comment."""
    for text in (val, val.split("#", 1)[0].strip()):
        try:
            return ast.literal_eval(text)
        except (ValueError, SyntaxError):
            continue
    return val.split("#", 1)[0].strip()


@dataclass
class DiffusionBlock:
    T: int = 50
    beta_min: float = 1e-3
    beta_max: float = 0.2
    sigma_mode: str = "ddpm"
    sigma: float = 0.3
    tuned_steps: int = 15
    train_steps: int = 3000
    hidden: int = 64
    emb_dim: int = 16
    lr: float = 2e-3


@dataclass
class InnerBlock:
    K: int = 10
    eps: float = 0.1
    eta: float = 1.0
    kappa: float = 0.4
    mu: float = 1.0
    surrogate: str = "ppo"
    reset: str = "continuous"
    updates: int = 1
    lr: float = 1e-3
    reward: str = "standardized"
    batch_size: int = 64
    n_eval: int = 128
    dsm_repeats: int = 4
    relative_budget: bool = True


@dataclass
class OuterBlock:
    iterations: int = 15
    lr: float = 1e-3
    epochs: int = 2
    batch_size: int = 64
    optimizer: str = "adam"
    n: int | None = None
    select: str = "last"


@dataclass
class PredictorBlock:
    L_in: int = 24
    L_out: int = 1
    hidden: tuple = (32,)
    arch: str = "mlp"
    pretrain_epochs: int = 100
    pretrain_lr: float = 3e-3


@dataclass
class DataBlock:
    source: str = "synthetic"
    train_csv: str | None = None
    test_csv: str | None = None
    length: int = 600
    test_length: int = 400
    periods: tuple = (24.0, 168.0)
    amplitudes: tuple = (1.0, 0.4)
    noise: float = 0.2
    ar: float = 0.5
    trend: float = 0.0
    level: float = 0.0


@dataclass
class NoiseBlock:
    """Shifted test sets: each kind at its default level, plus level sweeps."""

    kinds: tuple = ("gaussian", "perlin", "cutout")
    sigma: float = 0.1
    octaves: int = 8
    amplitude: float = 0.2
    ratio: float = 0.3
    fill: float = 1.0
    gaussian_levels: tuple = ()
    perlin_levels: tuple = ()
    cutout_levels: tuple = ()

    def spec(self, kind: str) -> NoiseSpec:
        return NoiseSpec(kind, self.sigma, self.octaves, self.amplitude, self.ratio, self.fill)

    def levels(self, kind: str) -> tuple:
        return tuple(getattr(self, f"{kind}_levels"))


@dataclass
class BaselineBlock:
    wdro_budget: float = 0.3
    wdro_steps: int = 5
    kl_eps: float = 4.0


@dataclass
class SweepBlock:
    eps: tuple = ()


@dataclass
class ExperimentConfig:
    seed: int = 0
    methods: tuple = METHODS
    output: str = "runs/default"
    diffusion: DiffusionBlock = field(default_factory=DiffusionBlock)
    inner: InnerBlock = field(default_factory=InnerBlock)
    outer: OuterBlock = field(default_factory=OuterBlock)
    predictor: PredictorBlock = field(default_factory=PredictorBlock)
    data: DataBlock = field(default_factory=DataBlock)
    noise: NoiseBlock = field(default_factory=NoiseBlock)
    baselines: BaselineBlock = field(default_factory=BaselineBlock)
    sweep: SweepBlock = field(default_factory=SweepBlock)
    source: str = "<config>"

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        return d

    def canonical(self) -> str:
        """Stable JSON used for hashing; the output location is excluded."""
        d = self.to_dict()
        d.pop("output")
        return json.dumps(d, sort_keys=True, separators=(",", ":"), default=list)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def output_dir(self) -> Path:
        p = Path(self.output)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            p = Path(root) / p
        return p

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)

    def synth_spec(self, length: int | None = None) -> SynthSpec:
        d = self.data
        return SynthSpec(length or d.length, tuple(d.periods), tuple(d.amplitudes), d.trend, d.level, d.noise, d.ar)


_BLOCKS = {f.name: f for f in fields(ExperimentConfig) if f.name not in ("seed", "methods", "output", "source")}


def _coerce(cls, name, value, where):
    """Match a parsed value to the declared field type."""
    default = next(f for f in fields(cls) if f.name == name).default
    kind = type(default) if default is not None else None
    if isinstance(default, tuple) or (default is None and isinstance(value, (list, tuple))):
        if not isinstance(value, (list, tuple)):
            value = (value,)
        return tuple(value)
    if kind is bool:
        if not isinstance(value, bool):
            raise where(f"expected True or False, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise where(f"expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise where(f"expected a number, got {value!r}")
        return float(value)
    if kind is str and not isinstance(value, str):
        raise where(f"expected a string, got {value!r}")
    return value


def _check(cfg: ExperimentConfig, lines: dict) -> None:
    src = cfg.source

    def fail(key, msg):
        raise ConfigError(f"{key} {msg}", src, lines.get(key))

    def need(cond, key, msg):
        if not cond:
            fail(key, msg)

    for m in cfg.methods:
        need(m in METHODS, "methods", f"has unknown method {m!r} (choose from {', '.join(METHODS)})")
    need(len(cfg.methods) > 0, "methods", "must name at least one method")
    d, i, o, p, da, nz, b = cfg.diffusion, cfg.inner, cfg.outer, cfg.predictor, cfg.data, cfg.noise, cfg.baselines
    need(d.T >= 1, "diffusion.T", f"must be >= 1, got {d.T}")
    need(0 < d.beta_min <= d.beta_max < 1, "diffusion.beta_max", f"needs 0 < beta_min <= beta_max < 1, got {d.beta_min}, {d.beta_max}")
    need(d.sigma_mode in SIGMA_MODES, "diffusion.sigma_mode", f"must be one of {SIGMA_MODES}, got {d.sigma_mode!r}")
    need(1 <= d.tuned_steps <= d.T, "diffusion.tuned_steps", f"must lie in [1, T={d.T}], got {d.tuned_steps}")
    need(d.train_steps >= 0 and d.hidden >= 1 and d.emb_dim >= 2, "diffusion.train_steps", "and hidden/emb_dim must be positive")
    need(i.K >= 0, "inner.K", f"must be >= 0, got {i.K}")
    need(i.eps > 0, "inner.eps", f"must be positive, got {i.eps}")
    need(i.eta > 0, "inner.eta", f"must be positive, got {i.eta}")
    need(0 < i.kappa < 1, "inner.kappa", f"must lie in (0, 1), got {i.kappa}")
    need(i.mu >= 0, "inner.mu", f"must be non-negative, got {i.mu}")
    need(i.surrogate in ("ppo", "pg"), "inner.surrogate", f"must be ppo or pg, got {i.surrogate!r}")
    need(i.reset in ("continuous", "reset"), "inner.reset", f"must be continuous or reset, got {i.reset!r}")
    need(i.reward in REWARD_MODES, "inner.reward", f"must be one of {REWARD_MODES}, got {i.reward!r}")
    need(i.updates >= 1, "inner.updates", f"must be >= 1, got {i.updates}")
    need(i.lr > 0 and i.batch_size >= 1 and i.n_eval >= 1 and i.dsm_repeats >= 1, "inner.lr", "and batch sizes must be positive")
    need(o.iterations >= 0 and o.epochs >= 0, "outer.iterations", "and epochs must be non-negative")
    need(o.lr >= 0, "outer.lr", f"must be non-negative, got {o.lr}")
    need(o.optimizer in ("adam", "gd"), "outer.optimizer", f"must be adam or gd, got {o.optimizer!r}")
    need(o.select in ("last", "uniform"), "outer.select", f"must be last or uniform, got {o.select!r}")
    need(o.batch_size >= 1, "outer.batch_size", f"must be >= 1, got {o.batch_size}")
    need(o.n is None or o.n >= 1, "outer.n", f"must be >= 1, got {o.n}")
    need(p.L_in >= 1 and p.L_out >= 1, "predictor.L_in", "and L_out must be >= 1")
    need(p.arch in ("mlp", "rnn"), "predictor.arch", f"must be mlp or rnn, got {p.arch!r}")
    need(all(isinstance(h, int) and h >= 1 for h in p.hidden), "predictor.hidden", "must be positive integers")
    need(p.arch != "rnn" or len(p.hidden) == 1, "predictor.hidden", "must have one entry for arch rnn")
    need(da.source in ("synthetic", "csv"), "data.source", f"must be synthetic or csv, got {da.source!r}")
    if da.source == "csv":
        for key in ("train_csv", "test_csv"):
            path = getattr(da, key)
            need(path is not None, f"data.{key}", "is required when source = csv")
            need(Path(path).is_file(), f"data.{key}", f"does not exist: {path}")
    need(da.length >= p.L_in + p.L_out and da.test_length >= p.L_in + p.L_out, "data.length", "and test_length must cover one window")
    need(len(da.periods) == len(da.amplitudes), "data.amplitudes", "must match periods in length")
    need(da.noise >= 0 and -1 < da.ar < 1, "data.noise", "must be >= 0 with |ar| < 1")
    for kind in nz.kinds:
        need(kind in ("gaussian", "perlin", "cutout"), "noise.kinds", f"has unknown kind {kind!r}")
        try:
            nz.spec(kind).validate()
            for lv in nz.levels(kind):
                nz.spec(kind).at_level(lv).validate()
        except ValueError as exc:
            fail(f"noise.{kind}_levels", f"invalid: {exc}")
    need(b.wdro_budget >= 0 and b.wdro_steps >= 0 and b.kl_eps > 0, "baselines.kl_eps", "budgets must be non-negative (kl_eps positive)")
    need(all(isinstance(e, (int, float)) and e > 0 for e in cfg.sweep.eps), "sweep.eps", "must be positive numbers")


def config_from_dict(doc: dict, lines: dict | None = None, source: str = "<config>") -> ExperimentConfig:
    lines = lines or {}
    top = dict(doc.get("", {}))
    kw: dict = {"source": source}
    for key, val in top.items():
        def where(msg, _k=key):
            return ConfigError(f"{_k}: {msg}", source, lines.get(_k))

        if key == "seed":
            if isinstance(val, bool) or not isinstance(val, int) or val < 0:
                raise where(f"expected a non-negative integer, got {val!r}")
            kw["seed"] = val
        elif key in ("methods", "method"):
            kw["methods"] = tuple(val) if isinstance(val, (list, tuple)) else (val,)
        elif key == "output":
            kw["output"] = str(val)
        else:
            raise where("unknown top-level key")
    for section, values in doc.items():
        if section == "":
            continue
        if section not in _BLOCKS:
            first = min((lines.get(f"{section}.{k}", 0) for k in values), default=None)
            raise ConfigError(f"unknown section [{section}]", source, first)
        cls = _BLOCKS[section].default_factory
        names = {f.name for f in fields(cls)}
        args = {}
        for key, val in values.items():
            full = f"{section}.{key}"

            def where(msg, _k=full):
                return ConfigError(f"{_k}: {msg}", source, lines.get(_k))

            if key not in names:
                raise where("unknown key")
            args[key] = _coerce(cls, key, val, where)
        kw[section] = cls(**args)
    cfg = ExperimentConfig(**kw)
    _check(cfg, lines)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from exc
    doc, lines = parse_document(text, str(path))
    return config_from_dict(doc, lines, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    """Inverse of load_config up to comments and key order."""
    d = cfg.to_dict()
    out = [f"seed = {d.pop('seed')!r}", f"methods = {list(d.pop('methods'))!r}", f"output = {d.pop('output')!r}"]
    for section, values in d.items():
        out.append(f"\n[{section}]")
        out.extend(f"{k} = {v!r}" for k, v in values.items())
    return "\n".join(out) + "\n"
