"""Gradient saliency over the input waveform."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter1d

from ..errors import InvalidInputError
from .model import ModelParams, backward, forward_with_cache


def input_gradient(params: ModelParams, waveform: np.ndarray) -> np.ndarray:
    """d(prediction)/d(input) for a single waveform, computed in float64."""
    waveform = np.asarray(waveform, dtype=np.float64).ravel()
    if waveform.size != params.config.input_length:
        raise InvalidInputError(
            f"waveform length {waveform.size} != {params.config.input_length}"
        )
    p64 = params.astype(np.float64)
    batch = waveform[None, None, :]
    _, caches = forward_with_cache(p64, batch)
    _, d_input = backward(p64, caches, np.ones(1))
    return d_input[0, 0, :]


def smooth_and_rescale(magnitude: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian-smooth a magnitude trace and rescale it to [0, 1]."""
    if sigma > 0:
        magnitude = gaussian_filter1d(magnitude, sigma=sigma, mode="reflect")
    low, high = magnitude.min(), magnitude.max()
    if high <= low:
        return np.zeros_like(magnitude)
    return (magnitude - low) / (high - low)


def saliency(
    params: ModelParams, waveform: np.ndarray, smooth_sigma: float = 2.0
) -> np.ndarray:
    """Absolute input gradient, Gaussian-smoothed and rescaled to [0, 1]."""
    return smooth_and_rescale(np.abs(input_gradient(params, waveform)), smooth_sigma)
