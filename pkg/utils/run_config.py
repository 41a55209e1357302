"""
Run configuration
JSON run files: nested frozen dataclasses with unknown-key rejection and a JSON schema
"""

import json
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from core.exceptions import ConfigurationError
from core.exlin import CubicMonotoneMap, ExlinModel, StateScaledInputMap
from core.powertrain import (
    PowertrainConfig,
    PowertrainSetup,
    PowertrainSpecMaps,
    SpeedScenarioModel,
)
from core.solver import SolverConfig
from utils import config as env
from utils.lookup import MonotoneLookup
from utils.powertrain_data import (
    ENGINE_TORQUE_LIMIT_TABLE,
    INPUT_CHANNELS,
    SOC_TARGET_TABLE,
    STATE_CHANNELS,
    default_exlin_parameters,
)

ENUMS = {
    'distribution_mode': env.DISTRIBUTION_MODES,
    'regularizer': ('inverse', 'neglog', 'squared'),
    'input_bound_strategy': env.INPUT_BOUND_STRATEGIES,
}


def _tupled(value):
    if isinstance(value, (list, tuple)):
        return tuple(_tupled(v) for v in value)
    return value


_DEFAULT_EXLIN = {key: _tupled(value) for key, value in default_exlin_parameters().items()}


@dataclass(frozen=True)
class LookupTable:
    breakpoints: Tuple[float, ...]
    values: Tuple[float, ...]

    def to_lookup(self) -> MonotoneLookup:
        return MonotoneLookup.from_pairs(self.breakpoints, self.values)


@dataclass(frozen=True)
class SpecMapsConfig:
    engine_torque_limit: LookupTable = field(
        default_factory=lambda: LookupTable(**{k: _tupled(v) for k, v in ENGINE_TORQUE_LIMIT_TABLE.items()}))
    soc_target: LookupTable = field(
        default_factory=lambda: LookupTable(**{k: _tupled(v) for k, v in SOC_TARGET_TABLE.items()}))

    def to_spec_maps(self) -> PowertrainSpecMaps:
        return PowertrainSpecMaps(engine_torque_limit=self.engine_torque_limit.to_lookup(),
                                  soc_target=self.soc_target.to_lookup())


@dataclass(frozen=True)
class ExlinParameters:
    """Phi_i(x) = a_i x + b_i x^3; Psi_i(u; x) = (1 + kappa_i expit(w_i . x)) (u_i + d_i u_i^3)."""

    phi_a: Tuple[float, ...] = _DEFAULT_EXLIN['phi_a']
    phi_b: Tuple[float, ...] = _DEFAULT_EXLIN['phi_b']
    psi_d: Tuple[float, ...] = _DEFAULT_EXLIN['psi_d']
    psi_w: Tuple[Tuple[float, ...], ...] = _DEFAULT_EXLIN['psi_w']
    psi_kappa: Tuple[float, ...] = _DEFAULT_EXLIN['psi_kappa']
    A: Tuple[Tuple[float, ...], ...] = _DEFAULT_EXLIN['A']
    B: Tuple[Tuple[float, ...], ...] = _DEFAULT_EXLIN['B']
    c: Tuple[float, ...] = _DEFAULT_EXLIN['c']

    def to_model(self) -> ExlinModel:
        phi = CubicMonotoneMap(self.phi_a, self.phi_b)
        psi = StateScaledInputMap(CubicMonotoneMap([1.0] * len(self.psi_d), self.psi_d),
                                  w=self.psi_w, kappa=self.psi_kappa)
        return ExlinModel(phi=phi, psi=psi, A=self.A, B=self.B, c=self.c,
                          names={'states': STATE_CHANNELS, 'inputs': INPUT_CHANNELS})


@dataclass(frozen=True)
class RunConfig:
    powertrain: PowertrainConfig = field(default_factory=PowertrainConfig)
    speed_model: SpeedScenarioModel = field(default_factory=SpeedScenarioModel)
    solver: SolverConfig = field(default_factory=SolverConfig)
    exlin: ExlinParameters = field(default_factory=ExlinParameters)
    spec_maps: SpecMapsConfig = field(default_factory=SpecMapsConfig)
    distribution_mode: str = 'mv'
    regularizer: str = 'inverse'
    input_bound_strategy: str = 'shifted'
    output_dir: str = 'results'
    seed: int = env.DEFAULT_SEED
    n_jobs: int = env.N_JOBS

    def __post_init__(self):
        for name, allowed in ENUMS.items():
            if getattr(self, name) not in allowed:
                raise ConfigurationError(f"{name}='{getattr(self, name)}' not in {list(allowed)}")
        if self.n_jobs == 0:
            raise ConfigurationError("n_jobs must be non-zero")

    # ------------------------------------------------------------ conversion

    @classmethod
    def from_dict(cls, data: Dict) -> 'RunConfig':
        return _build(cls, data, 'config')

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> 'RunConfig':
        """Read a run file or a run manifest (whose 'config' entry is used)."""
        try:
            with open(path, encoding='utf-8') as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}")
        if isinstance(data, dict) and 'manifest_version' in data:
            data = data.get('config', {})
        return cls.from_dict(data)

    def to_dict(self) -> Dict:
        return json.loads(json.dumps(asdict(self)))

    def to_json(self, path: Union[str, Path]) -> None:
        with open(path, 'w', encoding='utf-8') as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write('\n')

    def with_overrides(self, **changes) -> 'RunConfig':
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    def build_setup(self) -> PowertrainSetup:
        return PowertrainSetup(
            powertrain=self.powertrain,
            speed_model=self.speed_model,
            solver=self.solver,
            exlin=self.exlin.to_model(),
            spec_maps=self.spec_maps.to_spec_maps(),
            mode=self.distribution_mode,
            regularizer=self.regularizer,
            input_bound_strategy=self.input_bound_strategy,
        )

    @classmethod
    def schema(cls) -> Dict:
        """JSON Schema (draft-07) of the run file."""
        body = _schema_for(cls)
        body['$schema'] = 'http://json-schema.org/draft-07/schema#'
        body['title'] = 'ccmpc run configuration'
        return body


# ============================================================================
# Dataclass <-> JSON helpers
# ============================================================================

def _unwrap_optional(hint):
    if typing.get_origin(hint) is Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return hint, False


def _coerce(hint, value, where: str):
    hint, optional = _unwrap_optional(hint)
    if value is None:
        if optional:
            return None
        raise ConfigurationError(f"{where} must not be null")
    if is_dataclass(hint):
        return _build(hint, value, where)
    origin = typing.get_origin(hint)
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where} must be an array, got {type(value).__name__}")
        args = typing.get_args(hint)
        inner = args[0] if args else Any
        return tuple(_coerce(inner, v, f"{where}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where} must be a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where} must be a string, got {value!r}")
        return value
    return value


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {unknown}")
    kwargs = {name: _coerce(hints[name], value, f"{where}.{name}") for name, value in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}")


def _schema_for_hint(hint, name: Optional[str] = None) -> Dict:
    hint, optional = _unwrap_optional(hint)
    if is_dataclass(hint):
        out = _schema_for(hint)
    elif typing.get_origin(hint) in (tuple, Tuple):
        args = typing.get_args(hint)
        out = {'type': 'array', 'items': _schema_for_hint(args[0]) if args else {}}
    elif hint is bool:
        out = {'type': 'boolean'}
    elif hint is int:
        out = {'type': 'integer'}
    elif hint is float:
        out = {'type': 'number'}
    elif hint is str:
        out = {'type': 'string'}
        if name in ENUMS:
            out['enum'] = list(ENUMS[name])
    else:
        out = {}
    if optional and 'type' in out:
        out['type'] = [out['type'], 'null']
    return out


def _schema_for(cls) -> Dict:
    hints = typing.get_type_hints(cls)
    properties = {}
    for f in fields(cls):
        prop = _schema_for_hint(hints[f.name], f.name)
        if f.default is not MISSING and not is_dataclass(f.default):
            prop['default'] = json.loads(json.dumps(f.default))
        properties[f.name] = prop
    return {'type': 'object', 'properties': properties, 'additionalProperties': False}
