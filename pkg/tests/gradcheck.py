"""Diferencias finitas centrales para comprobar gradientes analíticos"""
import numpy as np

STEP = 1e-5


def numeric_grad(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Gradiente numérico de la función escalar f respecto a x (x se modifica y se restaura)"""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=['multi_index'])
    for _ in it:
        index = it.multi_index
        original = x[index]
        x[index] = original + h
        plus = f()
        x[index] = original - h
        minus = f()
        x[index] = original
        grad[index] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)
