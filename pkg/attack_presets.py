#!/usr/bin/env python3
"""
Presets de ataque Perlin predefinidos
"""
from dataclasses import replace

from errors import ConfigError
from perlin_noise import PerlinConfig

# Presets ordenados: primero el de referencia, luego variantes más suaves / más fuertes
ATTACK_PRESETS = {
    "referencia": {
        "name": "📄 Referencia (30_30_30_2)",
        "description": "Configuración de referencia: máxima norma 30, periodo 30, frecuencia seno 30, 2 octavas",
        "display_order": 1,
        "category": "reference",
        "max_norm": 30,
        "period": 30,
        "freq_sine": 30,
        "octaves": 2,
    },

    # === VARIANTES SUAVES (perturbación menos visible) ===

    "suave": {
        "name": "🌫️ Suave",
        "description": "Misma textura con la mitad de amplitud, para comparar la degradación",
        "display_order": 2,
        "category": "ablation",
        "max_norm": 15,
        "period": 30,
        "freq_sine": 30,
        "octaves": 2,
    },

    "bandas_anchas": {
        "name": "〰️ Bandas anchas",
        "description": "Frecuencia seno baja: bandas grandes y lentas",
        "display_order": 3,
        "category": "ablation",
        "max_norm": 30,
        "period": 60,
        "freq_sine": 8,
        "octaves": 1,
    },

    # === VARIANTES FUERTES ===

    "fuerte": {
        "name": "🔥 Fuerte",
        "description": "Doble amplitud y tres octavas; degrada mucho más al detector",
        "display_order": 4,
        "category": "ablation",
        "max_norm": 60,
        "period": 30,
        "freq_sine": 30,
        "octaves": 3,
    },
}

DEFAULT_PRESET = "referencia"


def get_available_presets():
    """Lista de presets ordenada por display_order"""
    presets = []
    for preset_id, preset in ATTACK_PRESETS.items():
        presets.append({
            'id': preset_id,
            'name': preset['name'],
            'description': preset['description'],
            'display_order': preset['display_order'],
            'category': preset['category'],
            'label': get_preset_config(preset_id).label,
        })
    presets.sort(key=lambda p: p['display_order'])
    return presets


def get_preset_config(preset_id: str, seed: int = 0) -> PerlinConfig:
    """PerlinConfig del preset pedido"""
    preset = ATTACK_PRESETS.get(preset_id)
    if preset is None:
        raise ConfigError(
            f"Preset desconocido '{preset_id}'. Disponibles: {', '.join(sorted(ATTACK_PRESETS))}"
        )
    config = PerlinConfig(
        max_norm=preset['max_norm'],
        period=preset['period'],
        freq_sine=preset['freq_sine'],
        octaves=preset['octaves'],
    )
    return replace(config, seed=seed).validate()
