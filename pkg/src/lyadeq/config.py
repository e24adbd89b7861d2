"""Declarative experiment configuration and its JSON form."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .attacks import AttackConfig
from .fixedpoint import SolverConfig
from .lyapunov import StabilityConfig
from .training import TrainConfig

COMMANDS = ("train", "eval", "attack-eval", "ablate", "verify-invariants")


class ConfigError(ValueError):
    pass


@dataclass
class SolverSection:
    tol: float = 1e-4
    max_iter: int = 50
    anderson_m: int = 5
    beta: float = 1.0
    solver: str = "anderson"


@dataclass
class StabilitySection:
    alpha: float = 0.1
    gamma: float = 1.0
    steps: int = 1


@dataclass
class TrainSection:
    epochs: int = 3
    batch: int = 128
    lr: float = 1e-3
    adv_training: str = "none"
    norm: str = "layer"


@dataclass
class AttackSection:
    family: str = "pgd"
    eps_255: int = 8
    step_255: float = 1.0


@dataclass
class SubsetSection:
    train: int | None = 10_000
    test: int | None = 2_000


@dataclass
class ExperimentConfig:
    command: str = "ablate"
    dataset: str = "mnist"  # "mnist" | "blobs"
    data_dir: str | None = None
    subset: SubsetSection = field(default_factory=SubsetSection)
    variant: str = "lyadeq"
    variants: list[str] = field(default_factory=lambda: ["deq", "deq-orth", "lyadeq-noorth", "lyadeq"])
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    radii_255: list[int] = field(default_factory=lambda: [2, 4, 6, 8])
    attacks: list[str] = field(default_factory=lambda: ["ifgsm", "pgd"])
    solver: SolverSection = field(default_factory=SolverSection)
    stability: StabilitySection = field(default_factory=StabilitySection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    out: str = "runs"
    workers: int = 1

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.dataset not in ("mnist", "blobs"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")

    # -- conversions to the library configs ----------------------------------
    def solver_config(self, **over) -> SolverConfig:
        s = self.solver
        return SolverConfig(tol=s.tol, max_iter=s.max_iter, anderson_m=s.anderson_m, beta=s.beta, **over)

    def stability_config(self) -> StabilityConfig:
        s = self.stability
        return StabilityConfig(alpha=s.alpha, gamma=s.gamma, steps=s.steps)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t.epochs, batch=t.batch, lr=t.lr,
                           seed=self.seed if seed is None else seed, adv_training=t.adv_training)

    def attack_config(self, family=None, eps_255=None, seed=None) -> AttackConfig:
        a = self.attack
        return AttackConfig.from_255(family or a.family, a.eps_255 if eps_255 is None else eps_255,
                                     a.step_255, seed=self.seed if seed is None else seed)

    # -- JSON ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        return _build(cls, raw, "config")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())


_SECTIONS = {
    "subset": SubsetSection,
    "solver": SolverSection,
    "stability": StabilitySection,
    "train": TrainSection,
    "attack": AttackSection,
}


def _build(cls, raw: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        if cls is ExperimentConfig and k in _SECTIONS:
            if not isinstance(v, dict):
                raise ConfigError(f"{k} must be an object")
            v = _build(_SECTIONS[k], v, k)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
