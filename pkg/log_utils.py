"""
Utilidades de log con timestamp
Mismo formato que usamos en la API: [HH:MM:SS] <emoji> mensaje
"""
import os
from datetime import datetime


def _quiet() -> bool:
    return os.getenv('PERLIN_DEFENSE_QUIET', '0') not in ('', '0', 'false', 'False')


def _timestamp() -> str:
    return datetime.now().strftime("%H:%M:%S")


def log_info(message):
    """Log con timestamp"""
    if not _quiet():
        print(f"[{_timestamp()}] ℹ️  {message}")


def log_success(message):
    """Log de éxito"""
    if not _quiet():
        print(f"[{_timestamp()}] ✅ {message}")


def log_warning(message):
    """Log de advertencia (siempre se imprime)"""
    print(f"[{_timestamp()}] ⚠️  {message}")


def log_error(message):
    """Log de error (siempre se imprime)"""
    print(f"[{_timestamp()}] ❌ {message}")


class StageLogger:
    """Logger con etiqueta para cada etapa del pipeline (SYNTH, ATTACK, TRAIN...)"""

    def __init__(self, tag: str):
        self.tag = tag.upper()

    def info(self, message: str):
        if not _quiet():
            print(f"[{_timestamp()}] 🔄 {self.tag}: {message}")

    def success(self, message: str):
        if not _quiet():
            print(f"[{_timestamp()}] ✅ {self.tag}: {message}")

    def warning(self, message: str):
        print(f"[{_timestamp()}] ⚠️ {self.tag}: {message}")

    def error(self, message: str):
        print(f"[{_timestamp()}] ❌ {self.tag}: {message}")
