"""
Configuración del pipeline: un único JSON + overrides de la línea de comandos
Cada directorio de salida recibe una copia (resolved_config.json) de la configuración usada
"""
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional

from attack_presets import get_preset_config
from autoencoder import TrainConfig
from errors import ConfigError, ParameterError
from log_utils import log_info
from perlin_noise import PerlinConfig

RESOLVED_CONFIG_FILENAME = 'resolved_config.json'

# Límites permitidos de cada parámetro (se comprueban antes de ejecutar nada)
CONFIG_LIMITS = {
    'perlin.max_norm': {'min': 0, 'max': 255},
    'perlin.period': {'min': 1e-6, 'max': 1e6},
    'perlin.freq_sine': {'min': 0, 'max': 1e4},
    'perlin.octaves': {'min': 1, 'max': 16, 'integer': True},
    'train.learning_rate': {'min': 0, 'max': 1},
    'train.batch_size': {'min': 1, 'max': 4096, 'integer': True},
    'train.epochs': {'min': 0, 'max': 100000, 'integer': True},
    'threads': {'min': 1, 'max': 256, 'integer': True},
    'num_scenes': {'min': 2, 'max': 1000000, 'integer': True},
    'scene_size': {'min': 16, 'max': 4096, 'integer': True},
    'max_objects': {'min': 0, 'max': 64, 'integer': True},
    'train_fraction': {'min': 0.01, 'max': 0.99},
}



@dataclass
class PipelineConfig:
    dataset_root: Optional[str] = None
    output_dir: str = 'output'
    checkpoint: Optional[str] = None
    perlin: PerlinConfig = field(default_factory=PerlinConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    threads: int = 1
    preset: Optional[str] = None
    per_channel: bool = False
    fixed_field: bool = False
    num_scenes: int = 200
    scene_size: int = 64
    max_objects: int = 5
    train_fraction: float = 0.8

    def to_dict(self) -> dict:
        data = asdict(self)
        data['train']['input_size'] = list(self.train.input_size)
        return data


def desk_scale_config() -> PipelineConfig:
    """Base del subcomando pipeline: escenas de 64x64, lr 0.002, 20 épocas"""
    return PipelineConfig(train=TrainConfig(input_size=(64, 64), learning_rate=0.002, batch_size=8, epochs=20))


def _get(config: PipelineConfig, key: str):
    value = config
    for part in key.split('.'):
        value = getattr(value, part)
    return value


def check_limits(config: PipelineConfig) -> List[str]:
    """Devuelve la lista de parámetros fuera de rango (vacía si todo es válido)"""
    problems = []
    for key, limit in CONFIG_LIMITS.items():
        value = _get(config, key)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{key}: {value!r} no es numérico")
            continue
        if not limit['min'] <= value <= limit['max']:
            problems.append(f"{key}: {value} (debe estar entre {limit['min']} y {limit['max']})")
        elif limit.get('integer') and int(value) != value:
            problems.append(f"{key}: {value} debe ser entero")
    return problems


def validate(config: PipelineConfig) -> PipelineConfig:
    problems = check_limits(config)
    if isinstance(config.seed, bool) or not isinstance(config.seed, int):
        problems.append(f"seed: {config.seed!r} no es un entero")
    if problems:
        raise ConfigError("Configuración inválida:\n  " + "\n  ".join(problems))
    try:
        config.perlin.validate()
    except ParameterError as e:
        raise ConfigError(str(e)) from e
    config.train.validate()
    return config


def _known(cls, data: dict, section: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"La sección '{section}' debe ser un objeto JSON")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"Claves desconocidas en '{section}': {', '.join(unknown)}")
    return data


def _input_size(value) -> tuple:
    try:
        width, height = (int(v) for v in value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"input_size debe ser [ancho, alto]: {value!r}") from e
    return (width, height)


def config_from_dict(data: dict, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("La configuración debe ser un objeto JSON")
    data = dict(_known(PipelineConfig, data, 'raíz'))
    base = base or PipelineConfig()

    perlin = base.perlin
    if 'perlin' in data:
        perlin = replace(perlin, **_known(PerlinConfig, data.pop('perlin') or {}, 'perlin'))
    train = base.train
    if 'train' in data:
        train_data = dict(_known(TrainConfig, data.pop('train') or {}, 'train'))
        if 'input_size' in train_data:
            train_data['input_size'] = _input_size(train_data['input_size'])
        train = replace(train, **train_data)
    return replace(base, perlin=perlin, train=train, **data)


def load_config(path: Optional[str], base: Optional[PipelineConfig] = None) -> PipelineConfig:
    """Carga el JSON de configuración sobre base (o devuelve base si path es None)"""
    base = base or PipelineConfig()
    if path is None:
        return base
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"No existe el fichero de configuración: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"JSON inválido en {path} (línea {e.lineno}, columna {e.colno}): {e.msg}") from e
    log_info(f"Configuración cargada desde {path}")
    return config_from_dict(data, base=base)


def apply_overrides(config: PipelineConfig, overrides: Dict[str, object]) -> PipelineConfig:
    """
    Aplica los flags de la CLI; las claves con punto apuntan a secciones ('perlin.period')
    Los valores None se ignoran. El preset se aplica antes que los parámetros sueltos.
    """
    overrides = {k: v for k, v in overrides.items() if v is not None}
    preset = overrides.pop('preset', config.preset)
    if preset:
        preset_config = get_preset_config(preset, seed=config.perlin.seed)
        config = replace(config, preset=preset, perlin=preset_config)

    top, perlin, train = {}, {}, {}
    for key, value in overrides.items():
        section, _, name = key.rpartition('.')
        target = {'': top, 'perlin': perlin, 'train': train}.get(section)
        if target is None:
            raise ConfigError(f"Override desconocido: {key}")
        target[name] = value
    if 'input_size' in train:
        train['input_size'] = _input_size(train['input_size'])

    config = replace(config, **top)
    if perlin:
        config = replace(config, perlin=replace(config.perlin, **perlin))
    if train:
        config = replace(config, train=replace(config.train, **train))
    return config


def resolve(config: PipelineConfig) -> PipelineConfig:
    """Una sola semilla gobierna ruido y entrenamiento"""
    config = replace(config, perlin=replace(config.perlin, seed=config.seed),
                     train=replace(config.train, seed=config.seed))
    return validate(config)


def write_resolved_config(config: PipelineConfig, directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, RESOLVED_CONFIG_FILENAME)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(config.to_dict(), f, indent=2, ensure_ascii=False, sort_keys=True)
    return path
