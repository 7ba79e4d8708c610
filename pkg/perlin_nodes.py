"""
ComfyUI Custom Nodes: ataque de ruido Perlin y limpieza con autoencoder
Los tensores IMAGE de ComfyUI son (B, H, W, C) float32 en [0, 1]
"""
import os

import numpy as np
import torch

from attack import apply_perturbation, make_noise, noise_seed_for
from attack_presets import ATTACK_PRESETS, DEFAULT_PRESET, get_preset_config
from autoencoder import denoise_image, load_checkpoint
from perlin_noise import PerlinConfig


def tensor_to_images(tensor):
    """Tensor de ComfyUI -> lista de imágenes (H, W, 3) float64"""
    batch = tensor.cpu().numpy().astype(np.float64)
    return [np.clip(image[..., :3], 0.0, 1.0) for image in batch]


def images_to_tensor(images):
    """Lista de imágenes (H, W, C) -> tensor (B, H, W, C) float32"""
    return torch.from_numpy(np.stack(images).astype(np.float32))


class PerlinAttackNode:
    """
    Nodo que añade ruido Perlin con mapa sinusoidal acotado en L∞
    Devuelve la imagen adversaria y el campo de ruido como vista previa en gris
    """

    @classmethod
    def INPUT_TYPES(s):
        return {
            "required": {
                "image": ("IMAGE",),
                "preset": (sorted(ATTACK_PRESETS, key=lambda k: ATTACK_PRESETS[k]['display_order']), {
                    "default": DEFAULT_PRESET
                }),
                "max_norm": ("FLOAT", {"default": 30.0, "min": 0.0, "max": 255.0, "step": 1.0}),
                "period": ("FLOAT", {"default": 30.0, "min": 1.0, "max": 1024.0, "step": 1.0}),
                "freq_sine": ("FLOAT", {"default": 30.0, "min": 0.0, "max": 200.0, "step": 1.0}),
                "octaves": ("INT", {"default": 2, "min": 1, "max": 8}),
                "seed": ("INT", {"default": 0, "min": 0, "max": 0xffffffffffffffff}),
            },
            "optional": {
                "use_preset": ("BOOLEAN", {
                    "default": True,
                    "label_on": "Parámetros del Preset",
                    "label_off": "Parámetros Manuales"
                }),
                "per_channel": ("BOOLEAN", {"default": False}),
                "fixed_field": ("BOOLEAN", {"default": False}),
            }
        }

    RETURN_TYPES = ("IMAGE", "IMAGE")
    RETURN_NAMES = ("adversarial_image", "noise_preview")
    FUNCTION = "apply_attack"
    CATEGORY = "image/adversarial"

    def apply_attack(self, image, preset, max_norm, period, freq_sine, octaves, seed,
                     use_preset=True, per_channel=False, fixed_field=False):
        """Cada imagen del lote usa la semilla derivada de (seed, índice) salvo con fixed_field"""
        if use_preset:
            config = get_preset_config(preset, seed=seed)
        else:
            config = PerlinConfig(max_norm=max_norm, period=period, freq_sine=freq_sine,
                                  octaves=octaves, seed=seed).validate()

        adversarial, previews = [], []
        for index, img in enumerate(tensor_to_images(image)):
            height, width = img.shape[:2]
            image_seed = noise_seed_for(config, index, global_seed=seed, fixed_field=fixed_field)
            noise = make_noise(width, height, config, image_seed, per_channel=per_channel)
            adversarial.append(apply_perturbation(img, noise, config.max_norm))
            first = noise[0] if isinstance(noise, list) else noise
            gray = (first.values + 1.0) / 2.0
            previews.append(np.repeat(gray[..., None], 3, axis=-1))
        return (images_to_tensor(adversarial), images_to_tensor(previews))


class AutoencoderDenoiseNode:
    """Nodo que limpia imágenes con un checkpoint del autoencoder"""

    _cache = {}

    @classmethod
    def INPUT_TYPES(s):
        return {
            "required": {
                "image": ("IMAGE",),
                "checkpoint_path": ("STRING", {
                    "default": os.getenv('PERLIN_DEFENSE_CHECKPOINT', 'checkpoint_final.adnz')
                }),
            }
        }

    RETURN_TYPES = ("IMAGE",)
    RETURN_NAMES = ("denoised_image",)
    FUNCTION = "denoise"
    CATEGORY = "image/adversarial"

    def denoise(self, image, checkpoint_path):
        if checkpoint_path not in self._cache:
            self._cache[checkpoint_path] = load_checkpoint(checkpoint_path)
        model = self._cache[checkpoint_path]
        return (images_to_tensor([denoise_image(model, img) for img in tensor_to_images(image)]),)


# Registrar los nodos
NODE_CLASS_MAPPINGS = {
    "PerlinAttackNode": PerlinAttackNode,
    "AutoencoderDenoiseNode": AutoencoderDenoiseNode,
}

NODE_DISPLAY_NAME_MAPPINGS = {
    "PerlinAttackNode": "Perlin Noise Attack",
    "AutoencoderDenoiseNode": "Autoencoder Denoise (Defense)",
}
