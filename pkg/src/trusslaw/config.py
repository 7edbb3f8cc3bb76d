"""Run configuration: an INI file with one section per command plus
``[global]``. Every key must be a known field; values are parsed by the
type of the field's default."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields, replace

from .design import PerturbParams
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GlobalSection:
    seed: int = 0
    threads: int = 1
    out: str = "run"
    log_level: str = "INFO"


@dataclass(frozen=True)
class GenSection:
    n_designs: int = 64
    p_add_edge: float = 0.5
    p_remove_edge: float = 0.3
    p_toggle_face_node: float = 0.3
    jitter_sigma: float = 0.05
    min_strut_length: float = 0.05
    max_attempts: int = 20

    def perturb_params(self) -> PerturbParams:
        return PerturbParams(self.p_add_edge, self.p_remove_edge, self.p_toggle_face_node,
                             self.jitter_sigma, self.min_strut_length, self.max_attempts)


@dataclass(frozen=True)
class HomogenizeSection:
    steps: int = 20
    n_test_g: int = 16
    n_test_l: int = 8
    k_gl: int = 2
    k_l: int = 7
    rho: float = 0.025
    youngs_modulus: float = 1.0
    poisson_ratio: float = 0.3
    tol_rel: float = 1e-10
    tol_abs: float = 1e-12
    max_iter: int = 60
    max_cutbacks: int = 6
    subdivision: int = 1


@dataclass(frozen=True)
class TrainSection:
    lambda_S: float = 1.0
    lambda_W: float = 0.2
    learning_rate: float = 5e-4
    batch_size: int = 64
    epochs: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float = 1e3
    checkpoint_every: int = 0
    trunk: tuple = (256, 256, 256, 256, 256)
    head_hidden: tuple = (256, 256, 256, 256)
    icnn_hidden: tuple = (20, 20, 20)
    alpha: float = 0.1
    beta: float = 1.0
    lambda_sweep: tuple = ()

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.lambda_S, self.lambda_W, self.learning_rate, self.batch_size,
                           self.epochs, self.beta1, self.beta2, self.epsilon, seed,
                           self.clip_norm, self.checkpoint_every)


@dataclass(frozen=True)
class EvalSection:
    splits: tuple = ("test_G", "test_GL", "test_L")


@dataclass(frozen=True)
class SimulateSection:
    design: int = 0
    tiling: int = 3
    mesh: int = 3
    steps: int = 50
    u_over_L: float = -0.05
    loading: str = "uniaxial"
    resolved: bool = True
    imperfection: float = 0.0
    checkpoint: str = "model.ckpt"


@dataclass(frozen=True)
class ExportSection:
    splits: tuple = ("train", "test_G", "test_GL", "test_L")


SECTIONS = {
    "global": GlobalSection,
    "gen": GenSection,
    "homogenize": HomogenizeSection,
    "train": TrainSection,
    "eval": EvalSection,
    "simulate": SimulateSection,
    "export": ExportSection,
}


@dataclass(frozen=True)
class RunConfig:
    global_: GlobalSection = GlobalSection()
    gen: GenSection = GenSection()
    homogenize: HomogenizeSection = HomogenizeSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    simulate: SimulateSection = SimulateSection()
    export: ExportSection = ExportSection()

    def section(self, name: str):
        return self.global_ if name == "global" else getattr(self, name)

    def with_overrides(self, **kw) -> "RunConfig":
        """Override global keys (seed, threads, out) given on the command line."""
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, global_=replace(self.global_, **kw))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in SECTIONS:
            sec = self.section(name)
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(s) for s in items)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values = {}
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
        cls = SECTIONS[name]
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in cp[name].items():
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
            kw[key] = _parse(raw, known[key].default, f"{source} [{name}] {key}")
        try:
            sec = cls(**kw)
            if name == "train":
                sec.train_config(0)
            values["global_" if name == "global" else name] = sec
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source} [{name}]: {exc}") from None
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))
