"""
Construcción de imágenes adversarias: I_adv = clip(I + ε·sign(N_perlin), 0, 1)

ImageTensor: np.ndarray (H, W, 3) float64 con valores en [0, 1].
max_norm se da en la escala 0-255, así que ε = max_norm / 255.
"""
import concurrent.futures
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ParameterError, PerlinDefenseError, ShapeError
from log_utils import StageLogger
from perlin_noise import NoiseField, PerlinConfig, derive_image_seed, generate_noise_field, with_seed

logger = StageLogger('ATTACK')


@dataclass
class AttackFailure:
    image_id: object
    message: str


@dataclass
class BatchAttackResult:
    """Resultado de attack_batch en el mismo orden que la entrada"""
    image_ids: List[object] = field(default_factory=list)
    images: List[Optional[np.ndarray]] = field(default_factory=list)
    noise_seeds: Dict[object, int] = field(default_factory=dict)
    failures: List[AttackFailure] = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def successful(self) -> List[Tuple[object, np.ndarray]]:
        return [(i, img) for i, img in zip(self.image_ids, self.images) if img is not None]


def _check_image(image: np.ndarray):
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"Se esperaba una imagen (H, W, 3), recibido {image.shape}")


def apply_perturbation(image: np.ndarray, noise: Union[NoiseField, Sequence[NoiseField]],
                       max_norm: float) -> np.ndarray:
    """
    Suma ε·sign(ruido) a la imagen y recorta a [0, 1]
    `noise` es un campo (monocromático, se replica en RGB) o tres campos (uno por canal)
    sign(0) = 0: los píxeles con ruido exactamente nulo no cambian
    """
    _check_image(image)
    if not 0 <= max_norm <= 255:
        raise ParameterError(f"max_norm debe estar en [0, 255], recibido {max_norm}")

    height, width = image.shape[:2]
    fields = [noise] if isinstance(noise, NoiseField) else list(noise)
    if len(fields) not in (1, 3):
        raise ShapeError(f"Se esperan 1 o 3 campos de ruido, recibidos {len(fields)}")
    for f in fields:
        if (f.height, f.width) != (height, width):
            raise ShapeError(
                f"Campo de ruido {f.width}x{f.height} no coincide con la imagen {width}x{height}"
            )

    signs = np.stack([np.sign(f.values) for f in fields], axis=-1)  # (H, W, 1) o (H, W, 3)
    epsilon = max_norm / 255.0
    adversarial = np.asarray(image, dtype=np.float64) + epsilon * signs
    return np.clip(adversarial, 0.0, 1.0)


def linf_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)), initial=0.0))


def noise_seed_for(config: PerlinConfig, image_id, global_seed: int = None, fixed_field: bool = False) -> int:
    """Semilla del campo para una imagen: derivada de (semilla global, id) o fija"""
    base = config.seed if global_seed is None else global_seed
    if fixed_field:
        return int(base)
    return derive_image_seed(base, image_id)


def make_noise(width: int, height: int, config: PerlinConfig, seed: int,
               per_channel: bool = False) -> Union[NoiseField, List[NoiseField]]:
    if not per_channel:
        return generate_noise_field(width, height, with_seed(config, seed))
    return [generate_noise_field(width, height, with_seed(config, derive_image_seed(seed, f"channel{c}")))
            for c in range(3)]


def attack_image(image: np.ndarray, config: PerlinConfig, seed: int, per_channel: bool = False) -> np.ndarray:
    _check_image(image)
    height, width = image.shape[:2]
    noise = make_noise(width, height, config, seed, per_channel=per_channel)
    return apply_perturbation(image, noise, config.max_norm)


def attack_batch(items: Sequence[Tuple[object, np.ndarray]], config: PerlinConfig,
                 global_seed: int = None, fixed_field: bool = False, per_channel: bool = False,
                 workers: int = 1) -> BatchAttackResult:
    """
    Ataca una lista de (image_id, imagen)
    Los errores por imagen se registran con su id y el lote continúa
    """
    config.validate()
    result = BatchAttackResult()
    if not items:
        return result

    seeds = [noise_seed_for(config, image_id, global_seed, fixed_field) for image_id, _ in items]

    def run(index):
        image_id, image = items[index]
        return attack_image(image, config, seeds[index], per_channel=per_channel)

    outputs: List[Optional[np.ndarray]] = [None] * len(items)
    errors: List[Optional[str]] = [None] * len(items)

    if workers <= 1:
        for index in range(len(items)):
            try:
                outputs[index] = run(index)
            except (PerlinDefenseError, ValueError) as e:
                errors[index] = str(e)
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            futures = {executor.submit(run, index): index for index in range(len(items))}
            for future in concurrent.futures.as_completed(futures):
                index = futures[future]
                try:
                    outputs[index] = future.result()
                except (PerlinDefenseError, ValueError) as e:
                    errors[index] = str(e)

    # Se agrega en orden de entrada para que el resultado no dependa del scheduling
    for index, (image_id, _) in enumerate(items):
        result.image_ids.append(image_id)
        result.images.append(outputs[index])
        result.noise_seeds[image_id] = seeds[index]
        if errors[index] is not None:
            logger.error(f"Imagen {image_id}: {errors[index]}")
            result.failures.append(AttackFailure(image_id=image_id, message=errors[index]))

    return result
