import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from simulation_errors import ConfigurationError

logger = logging.getLogger(__name__)

NOISE_POWER_DBM = -114.0
BANDWIDTH_HZ = 10e6


def dbm_to_watts(dbm: float) -> float:
    """Convert a power level in dBm to watts."""
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watts_to_dbm(watts: float) -> float:
    """Convert a power level in watts to dBm."""
    return 10.0 * np.log10(watts) + 30.0


class AgentConfig(BaseModel):
    """Network sizes and learning hyperparameters of the MASC trainer."""
    model_config = ConfigDict(extra="forbid")

    actor_hidden: Tuple[int, int] = (100, 100)
    critic_state_hidden: Tuple[int, int] = (200, 200)
    critic_action_hidden: int = Field(200, ge=1)
    critic_mixed_hidden: int = Field(200, ge=1)
    actor_learning_rate: float = Field(1e-4, gt=0)
    critic_learning_rate: float = Field(1e-3, gt=0)
    adam_beta1: float = Field(0.9, gt=0, lt=1)
    adam_beta2: float = Field(0.999, gt=0, lt=1)
    adam_epsilon: float = Field(1e-8, gt=0)
    tau_actor: float = Field(0.001, ge=0, le=1)
    tau_critic: float = Field(0.001, ge=0, le=1)
    discount: float = Field(0.5, ge=0, lt=1)
    noise_variance: float = Field(2.0, ge=0)
    noise_decay: float = Field(0.9995, gt=0, le=1)
    noise_floor_std: float = Field(0.01, ge=0)
    other_actions: Literal["online", "logged"] = "online"
    p_min_fraction: float = Field(1e-6, gt=0, lt=1)
    checkpoint_interval: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_widths(self) -> "AgentConfig":
        if min(self.actor_hidden) < 1 or min(self.critic_state_hidden) < 1:
            raise ValueError("hidden layer widths must be >= 1")
        return self


class ScenarioConfig(BaseModel):
    """Topology, power caps, channel and training-timeline parameters of one experiment."""
    model_config = ConfigDict(extra="forbid")

    name: str = "custom"
    ap_positions: List[Tuple[float, float]]
    layer_of_ap: List[int]
    p_max_watts: List[float]
    nu_min_m: List[float]
    nu_max_m: List[float]
    bandwidth_hz: float = Field(BANDWIDTH_HZ, gt=0)
    noise_power_watts: float = Field(dbm_to_watts(NOISE_POWER_DBM), gt=0)
    rho: float = Field(0.0, ge=0, le=1)
    rho_mode: Literal["fixed", "random-per-trial", "random-per-slot"] = "fixed"
    shadowing_std_db: float = Field(8.0, ge=0)
    min_link_distance_m: float = Field(10.0, gt=0)
    T_d: int = Field(50, ge=0)
    T_u: int = Field(100, ge=1)
    M: int = Field(1000, ge=1)
    D: int = Field(128, ge=1)
    train_slots: int = Field(5000, ge=0)
    test_slots: int = Field(2000, ge=0)
    trials: int = Field(10, ge=1)
    oracle_levels: int = Field(11, ge=2)
    agent: AgentConfig = Field(default_factory=AgentConfig)

    @model_validator(mode="after")
    def _check_per_ap_lists(self) -> "ScenarioConfig":
        n = len(self.ap_positions)
        if n == 0:
            raise ValueError("at least one AP is required")
        for field_name in ("layer_of_ap", "p_max_watts", "nu_min_m", "nu_max_m"):
            if len(getattr(self, field_name)) != n:
                raise ValueError(f"{field_name} has {len(getattr(self, field_name))} entries for {n} APs")
        if any(p <= 0 for p in self.p_max_watts):
            raise ValueError("p_max_watts entries must be positive")
        for index, (low, high) in enumerate(zip(self.nu_min_m, self.nu_max_m)):
            if not 0 < low <= high:
                raise ValueError(f"AP {index + 1}: need 0 < nu_min <= nu_max, got {low}, {high}")
        return self

    @property
    def num_aps(self) -> int:
        return len(self.ap_positions)

    @property
    def p_max(self) -> np.ndarray:
        return np.asarray(self.p_max_watts, dtype=float)

    @property
    def p_floor(self) -> np.ndarray:
        return self.agent.p_min_fraction * self.p_max

    @property
    def first_update_slot(self) -> int:
        return self.T_d + self.D

    @property
    def first_replacement_slot(self) -> int:
        return 2 * self.T_d + self.D + self.T_u


def _layered_preset(name: str, positions: Sequence[Tuple[float, float]], layers: Sequence[int]) -> ScenarioConfig:
    caps_dbm = {1: 30.0, 2: 23.0, 3: 20.0}
    nu_max = {1: 1000.0, 2: 200.0, 3: 100.0}
    return ScenarioConfig(
        name=name,
        ap_positions=list(positions),
        layer_of_ap=list(layers),
        p_max_watts=[dbm_to_watts(caps_dbm[layer]) for layer in layers],
        nu_min_m=[10.0] * len(layers),
        nu_max_m=[nu_max[layer] for layer in layers],
    )


def two_layer_preset() -> ScenarioConfig:
    """One macro AP at the origin and four second-layer APs 500 m away."""
    positions = [(0.0, 0.0), (500.0, 0.0), (0.0, 500.0), (-500.0, 0.0), (0.0, -500.0)]
    return _layered_preset("two-layer", positions, [1, 2, 2, 2, 2])


def three_layer_preset() -> ScenarioConfig:
    """The two-layer geometry plus four third-layer APs 700 m away."""
    positions = [
        (0.0, 0.0), (500.0, 0.0), (0.0, 500.0), (-500.0, 0.0), (0.0, -500.0),
        (700.0, 0.0), (0.0, 700.0), (-700.0, 0.0), (0.0, -700.0),
    ]
    return _layered_preset("three-layer", positions, [1, 2, 2, 2, 2, 3, 3, 3, 3])


PRESETS = {
    "two-layer": two_layer_preset,
    "three-layer": three_layer_preset,
}


def get_preset(name: str) -> ScenarioConfig:
    """Return a fresh copy of a named preset."""
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigurationError(f"Unknown preset '{name}'; choose one of {sorted(PRESETS)}")


def format_validation_error(error: ValidationError, root: str) -> str:
    """Render a pydantic error as one 'key.path: message' line per failure."""
    lines = []
    for item in error.errors():
        path = ".".join([root] + [str(part) for part in item["loc"]]) if item["loc"] else root
        lines.append(f"{path}: {item['msg']}")
    return "; ".join(lines)


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def scenario_from_mapping(data: Optional[Dict[str, Any]], root: str = "scenario") -> ScenarioConfig:
    """
    Build a scenario from a nested mapping.

    A `preset` key selects the base scenario; every other key overrides it.

    Args:
        data: Parsed `scenario:` section
        root: Key path prefix used in error messages

    Returns:
        Validated ScenarioConfig
    """
    data = dict(data or {})
    preset_name = data.pop("preset", None)
    base: Dict[str, Any] = get_preset(preset_name).model_dump() if preset_name else {}
    try:
        return ScenarioConfig.model_validate(_merge(base, data))
    except ValidationError as e:
        raise ConfigurationError(format_validation_error(e, root)) from e


def load_yaml(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a YAML configuration file into a mapping."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Configuration file not found: {path}")
    try:
        with path.open("r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Could not parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return data


def validate_scenario(config: ScenarioConfig, algorithms: Sequence[str] = ()) -> Dict[str, Any]:
    """
    Check a scenario for settings that are legal but will not do what is expected.

    Args:
        config: Scenario to inspect
        algorithms: Algorithms that will be run on it

    Returns:
        Validation result with 'valid', 'errors' and 'warnings'
    """
    validation_result: Dict[str, Any] = {
        'valid': True,
        'errors': [],
        'warnings': []
    }

    if config.D > config.M:
        validation_result['warnings'].append(
            f"Mini-batch size D={config.D} exceeds buffer capacity M={config.M}: training never starts"
        )
    elif config.train_slots < config.first_update_slot:
        validation_result['warnings'].append(
            f"Only {config.train_slots} training slots; the first update needs slot {config.first_update_slot}"
        )
    elif config.train_slots < config.first_replacement_slot:
        validation_result['warnings'].append(
            f"Local networks are first refreshed at slot {config.first_replacement_slot}, "
            f"after the {config.train_slots} training slots end"
        )

    if "oracle" in algorithms and config.num_aps > 4:
        validation_result['valid'] = False
        validation_result['errors'].append(
            f"Grid oracle supports at most 4 APs, scenario has {config.num_aps}"
        )

    if config.rho_mode == "fixed" and config.rho == 1.0:
        validation_result['warnings'].append("rho=1 freezes the small-scale fading for the whole trial")

    return validation_result
