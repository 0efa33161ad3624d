"""
Experiment configuration: one YAML file with a top-level seed and one
section per stage.

    seed: 0
    simulator: {n_trajectories: 200, n_steps: 500, ...}
    predictor: {...}
    flow: {...}
    dpgmm: {...}
    stats: {...}

Unknown keys and out-of-range values raise ConfigError.
"""
from __future__ import annotations

from dataclasses import MISSING, asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Optional, Tuple, Type, TypeVar

import numpy as np
import yaml

from dpgmm import DPGMMConfig
from flows import FlowConfig
from ood_stats import SubsampleTestConfig
from predictor import PredictorConfig
from simulation import DatasetManifest, InterventionSpec, ParamPrior, default_interventions
from utils import ConfigError, PathLike, atomic_write_text, derive_seed

C = TypeVar("C")

ESTIMATORS = ("flow-snf", "flow-bnf", "dpgmm", "entropy")


@dataclass
class SimulatorConfig:
    n_trajectories: int = 200
    n_steps: int = 500
    n_locations: int = 100
    mu_rho: float = 0.6
    sigma_rho: float = 0.1
    mu_gamma: float = 0.5
    sigma_gamma: float = 0.1
    interventions: Tuple[str, ...] = tuple(spec.dataset_id for spec in default_interventions())
    workers: int = 1

    def __post_init__(self) -> None:
        self.interventions = tuple(str(s) for s in self.interventions)
        if self.n_trajectories < 1 or self.n_steps < 1:
            raise ValueError("n_trajectories and n_steps must be >= 1")
        if self.n_locations < 2:
            raise ValueError("n_locations must be >= 2")
        for text in self.interventions:
            InterventionSpec.parse(text)

    @property
    def prior(self) -> ParamPrior:
        return ParamPrior(self.mu_rho, self.sigma_rho, self.mu_gamma, self.sigma_gamma)

    def manifest(self, dataset_id: str, seed: int) -> DatasetManifest:
        """Manifest of 'train', 'test' or an intervention id such as 'hard_p=0.5'."""
        intervention = InterventionSpec() if dataset_id in ("train", "test") else InterventionSpec.parse(dataset_id)
        return DatasetManifest(
            dataset_id=dataset_id,
            n_trajectories=self.n_trajectories,
            n_steps=self.n_steps,
            n_locations=self.n_locations,
            prior=self.prior,
            intervention=intervention,
            seed=dataset_seed(seed, dataset_id),
        )

    @property
    def dataset_ids(self) -> List[str]:
        return ["train", "test", *self.interventions]


@dataclass
class StatsConfig:
    sizes: Tuple[int, ...] = (100, 200)
    repetitions: int = 100
    alpha: float = 0.01
    seed: int = 0
    per_trajectory: bool = False
    estimators: Tuple[str, ...] = ("flow-snf", "flow-bnf", "dpgmm")

    def __post_init__(self) -> None:
        self.sizes = tuple(int(n) for n in self.sizes)
        self.estimators = tuple(self.estimators)
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ValueError(f"unknown estimators {unknown} (choose from {ESTIMATORS})")
        self.test_config()

    def test_config(self) -> SubsampleTestConfig:
        return SubsampleTestConfig(self.sizes, self.repetitions, self.seed, self.alpha)


@dataclass
class ExperimentConfig:
    seed: int = 0
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    dpgmm: DPGMMConfig = field(default_factory=DPGMMConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)

    def __post_init__(self) -> None:
        if self.predictor.num_locations != self.simulator.n_locations:
            raise ConfigError(
                f"predictor.num_locations ({self.predictor.num_locations}) must equal "
                f"simulator.n_locations ({self.simulator.n_locations})"
            )
        if self.predictor.window >= self.simulator.n_steps:
            raise ConfigError("predictor.window must be shorter than simulator.n_steps")

    def to_dict(self) -> Dict[str, Any]:
        return _plain(asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def write(self, path: PathLike) -> None:
        atomic_write_text(path, self.to_yaml())

    def with_seed(self, seed: int) -> "ExperimentConfig":
        data = self.to_dict()
        data["seed"] = int(seed)
        return config_from_dict(data)


SECTIONS: Dict[str, Type] = {
    "simulator": SimulatorConfig,
    "predictor": PredictorConfig,
    "flow": FlowConfig,
    "dpgmm": DPGMMConfig,
    "stats": StatsConfig,
}


def dataset_seed(base: int, dataset_id: str) -> int:
    """Per-dataset seed, independent across dataset ids."""
    words = derive_seed(base, "dataset", dataset_id).generate_state(2, dtype=np.uint32)
    return int(words[0]) << 32 | int(words[1])


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _coerce(section: str, name: str, value: Any, default: Any) -> Any:
    where = f"{section}.{name}"
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent literals without a dot (3e-4) as strings
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{where}: expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _default(f) -> Any:
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def section_from_dict(cls: Type[C], section: str, data: Optional[Mapping[str, Any]]) -> C:
    data = dict(data or {})
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    kwargs = {name: _coerce(section, name, value, _default(known[name])) for name, value in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def config_from_dict(data: Optional[Mapping[str, Any]]) -> ExperimentConfig:
    data = dict(data or {})
    unknown = sorted(set(data) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    sections = {}
    for name, cls in SECTIONS.items():
        section = data.get(name)
        if section is not None and not isinstance(section, Mapping):
            raise ConfigError(f"[{name}] must be a mapping")
        sections[name] = section_from_dict(cls, name, section)
    return ExperimentConfig(seed=seed, **sections)


def load_config(path: Optional[PathLike] = None) -> ExperimentConfig:
    """Read a YAML config; no path gives the built-in desk-scale defaults."""
    if path is None:
        return ExperimentConfig()
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if data is not None and not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)
