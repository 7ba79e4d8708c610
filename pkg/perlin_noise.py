"""
Generador de ruido Perlin procedural (2D, fractal por octavas) con mapa de color seno

El parámetro "frequency sine" se interpreta como el mapa S(v) = sin(2π·f·v)
aplicado DESPUÉS de la suma de octavas. Lacunaridad 2.0 y persistencia 0.5.
"""
import hashlib
import math
from dataclasses import dataclass, replace
from typing import Union

import numpy as np
from PIL import Image

from errors import ParameterError

LACUNARITY = 2.0
PERSISTENCE = 0.5

# Gradientes diagonales de la construcción clásica 2D; con fade quíntico el rango queda en [-1, 1]
GRADIENTS = np.array([[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]])

_SEED_MASK = (1 << 64) - 1

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class PerlinConfig:
    """Los cuatro parámetros del ataque más la semilla de la tabla de permutación"""
    max_norm: float = 30.0
    period: float = 30.0
    freq_sine: float = 30.0
    octaves: int = 2
    seed: int = 0

    def validate(self) -> "PerlinConfig":
        if not 0 <= self.max_norm <= 255:
            raise ParameterError(f"max_norm debe estar en [0, 255], recibido {self.max_norm}")
        if not self.period > 0:
            raise ParameterError(f"period debe ser > 0, recibido {self.period}")
        if not self.freq_sine >= 0:
            raise ParameterError(f"freq_sine debe ser >= 0, recibido {self.freq_sine}")
        if int(self.octaves) != self.octaves or self.octaves < 1:
            raise ParameterError(f"octaves debe ser un entero >= 1, recibido {self.octaves}")
        return self

    @property
    def label(self) -> str:
        """Etiqueta de condición estilo '30_30_30_2'"""
        def fmt(value):
            return str(int(value)) if float(value).is_integer() else str(value)
        return f"{fmt(self.max_norm)}_{fmt(self.period)}_{fmt(self.freq_sine)}_{int(self.octaves)}"

    def to_dict(self) -> dict:
        return {
            'max_norm': self.max_norm,
            'period': self.period,
            'freq_sine': self.freq_sine,
            'octaves': self.octaves,
            'seed': self.seed,
        }


@dataclass(frozen=True)
class NoiseField:
    """Campo de ruido (height, width) con valores en [-1, 1]"""
    width: int
    height: int
    values: np.ndarray


_PERMUTATION_CACHE = {}


def make_permutation(seed: int) -> np.ndarray:
    """Tabla de permutación de 256 entradas barajada con la semilla, duplicada a 512"""
    key = int(seed) & _SEED_MASK
    table = _PERMUTATION_CACHE.get(key)
    if table is None:
        perm = np.random.default_rng(key).permutation(256)
        table = np.concatenate([perm, perm]).astype(np.int64)
        table.setflags(write=False)
        _PERMUTATION_CACHE[key] = table
    return table


def derive_image_seed(global_seed: int, image_id) -> int:
    """Semilla de 64 bits estable para (semilla global, id de imagen)"""
    digest = hashlib.blake2b(f"{int(global_seed)}:{image_id}".encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'little')


def fade(t):
    # 6t^5 - 15t^4 + 10t^3
    return t * t * t * (t * (t * 6 - 15) + 10)


def lerp(a, b, t):
    return a + t * (b - a)


def _corner_dot(perm, xi, yi, xf, yf):
    g = GRADIENTS[perm[perm[xi & 255] + (yi & 255)] & 3]
    return g[..., 0] * xf + g[..., 1] * yf


def perlin2(x: ArrayLike, y: ArrayLike, period: float, seed: int = 0) -> ArrayLike:
    """
    Ruido Perlin 2D clásico sobre celdas de tamaño `period` píxeles
    Acepta escalares o arrays; vale exactamente 0 en los puntos de la retícula
    """
    if not period > 0:
        raise ParameterError(f"period debe ser > 0, recibido {period}")
    scalar = np.isscalar(x) and np.isscalar(y)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    perm = make_permutation(seed)

    cell_x = np.floor(x / period)
    cell_y = np.floor(y / period)
    # Posición dentro de la celda calculada desde la esquina para que la retícula dé 0 exacto
    xf = (x - cell_x * period) / period
    yf = (y - cell_y * period) / period
    xi = cell_x.astype(np.int64)
    yi = cell_y.astype(np.int64)

    u = fade(xf)
    v = fade(yf)

    n00 = _corner_dot(perm, xi, yi, xf, yf)
    n10 = _corner_dot(perm, xi + 1, yi, xf - 1, yf)
    n01 = _corner_dot(perm, xi, yi + 1, xf, yf - 1)
    n11 = _corner_dot(perm, xi + 1, yi + 1, xf - 1, yf - 1)

    value = np.clip(lerp(lerp(n00, n10, u), lerp(n01, n11, u), v), -1.0, 1.0)
    return float(value) if scalar else value


def fractal_perlin2(x: ArrayLike, y: ArrayLike, config: PerlinConfig) -> ArrayLike:
    """Suma de octavas normalizada por la suma de amplitudes; la octava o usa semilla seed ^ o"""
    config.validate()
    total = 0.0
    amplitude_sum = 0.0
    for octave in range(int(config.octaves)):
        amplitude = PERSISTENCE ** octave
        frequency = LACUNARITY ** octave
        seed = (int(config.seed) & _SEED_MASK) ^ octave
        total = total + amplitude * perlin2(np.multiply(x, frequency), np.multiply(y, frequency),
                                            config.period, seed)
        amplitude_sum += amplitude
    result = total / amplitude_sum
    return float(result) if np.isscalar(x) and np.isscalar(y) else result


def sine_colormap(v: ArrayLike, freq_sine: float) -> ArrayLike:
    """S(v) = sin(2π · freq_sine · v)"""
    result = np.sin(2.0 * math.pi * freq_sine * np.asarray(v, dtype=np.float64))
    return float(result) if np.isscalar(v) else result


def generate_noise_field(width: int, height: int, config: PerlinConfig) -> NoiseField:
    """Campo de ruido del tamaño de la imagen; función pura de (width, height, config)"""
    if width < 1 or height < 1:
        raise ParameterError(f"Dimensiones del campo inválidas: {width}x{height}")
    config.validate()
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64),
                         indexing='ij')
    values = sine_colormap(fractal_perlin2(xs, ys, config), config.freq_sine)
    values = np.clip(values, -1.0, 1.0)
    values.setflags(write=False)
    return NoiseField(width=int(width), height=int(height), values=values)


def with_seed(config: PerlinConfig, seed: int) -> PerlinConfig:
    return replace(config, seed=int(seed) & _SEED_MASK)


def noise_field_to_image(field: NoiseField) -> Image.Image:
    """Vista en escala de grises: [-1, 1] -> [0, 255]"""
    gray = np.floor((field.values + 1.0) * 0.5 * 255.0 + 0.5)
    return Image.fromarray(np.clip(gray, 0, 255).astype(np.uint8))


def save_noise_field(field: NoiseField, path: str):
    """Guarda el campo como PNG en gris para inspección visual"""
    noise_field_to_image(field).save(path, format='PNG')
