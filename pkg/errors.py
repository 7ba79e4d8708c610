"""
Jerarquía de errores del proyecto
Las funciones de librería lanzan estas excepciones; la CLI y la API REST las traducen
"""


class PerlinDefenseError(Exception):
    """Error base de todo el proyecto"""


class ShapeError(PerlinDefenseError, ValueError):
    """Formas de tensores o imágenes incompatibles"""


class ParameterError(PerlinDefenseError, ValueError):
    """Parámetro fuera de rango"""


class PreconditionError(PerlinDefenseError, ValueError):
    """Precondición no cumplida por el llamador (ej. dimensiones impares)"""


class ConfigError(PerlinDefenseError):
    """Configuración o dataset inválido"""


class NonFiniteError(PerlinDefenseError, FloatingPointError):
    """Aparece un NaN/Inf donde no debería"""


class TrainingError(PerlinDefenseError):
    """Fallo durante el entrenamiento (lleva época y lote)"""

    def __init__(self, message: str, epoch: int = None, batch: int = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class CheckpointError(PerlinDefenseError):
    """Checkpoint corrupto, truncado o de otra versión"""


class DecodeError(PerlinDefenseError):
    """Imagen no soportada o corrupta"""

    def __init__(self, message: str, path: str = None):
        super().__init__(f"{message} ({path})" if path else message)
        self.path = path


class ParseError(PerlinDefenseError):
    """JSON de anotaciones/detecciones mal formado; incluye posición"""

    def __init__(self, message: str, field: str = None, index: int = None):
        location = []
        if index is not None:
            location.append(f"registro #{index}")
        if field is not None:
            location.append(f"campo '{field}'")
        suffix = f" [{', '.join(location)}]" if location else ""
        super().__init__(f"{message}{suffix}")
        self.field = field
        self.index = index


class PlacementError(PerlinDefenseError):
    """No se pudo colocar un objeto en la escena sintética"""


class ImageWriteError(PerlinDefenseError, OSError):
    """No se pudo escribir una imagen"""
