"""Spectrogram inversion and spectrogram noise augmentation.

Griffin-Lim stands in for a neural vocoder; any object with an
``invert(mel) -> waveform`` method can replace :class:`GriffinLim`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .data import LOG_FLOOR, FeatureConfig, ShapeError, istft, mel_filterbank, stft


class NoiseError(ValueError):
    pass


@dataclass(frozen=True)
class NoisePolicy:
    """Inject noise at ``target_snr_db`` into every ``period``-th sample (1-based index)."""

    target_snr_db: float = 5.0
    period: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if math.isnan(self.target_snr_db) or self.target_snr_db == -math.inf:
            raise ValueError("target_snr_db must be finite or +inf (disabled)")

    def applies_to(self, sample_index: int) -> bool:
        return math.isfinite(self.target_snr_db) and sample_index % self.period == 0


def noise_inject(mel: np.ndarray, policy: NoisePolicy, sample_index: int) -> np.ndarray:
    """Add Gaussian noise in the linear-magnitude domain at the policy's SNR.

    Off-cycle samples are returned unchanged (the same object). Magnitudes
    cannot go below the log floor, so the noise scale is solved such that the
    noise actually realized after flooring has the target power.
    """
    mel = np.asarray(mel)
    if mel.size == 0:
        raise NoiseError("empty spectrogram")
    if not policy.applies_to(sample_index):
        return mel
    linear = np.exp(mel.astype(np.float64))
    signal_power = float(np.mean(linear**2))
    if signal_power <= LOG_FLOOR**2 * (1 + 1e-9):
        raise NoiseError("spectrogram is silent; SNR is undefined")
    target_power = signal_power / 10.0 ** (policy.target_snr_db / 10.0)
    draw = np.random.default_rng([policy.seed, sample_index]).standard_normal(mel.shape)
    limit = LOG_FLOOR - linear  # realized noise cannot push below the floor

    def realized_power(scale: float) -> float:
        return float(np.mean(np.maximum(scale * draw, limit) ** 2))

    lo, hi = 0.0, math.sqrt(target_power / max(np.mean(draw**2), 1e-12))
    while realized_power(hi) < target_power:
        hi *= 2.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if realized_power(mid) < target_power:
            lo = mid
        else:
            hi = mid
    noisy = linear + np.maximum(hi * draw, limit)
    return np.log(noisy).astype(mel.dtype)


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    """SNR of a noise-injected log-mel against its clean version, in the linear domain."""
    lin = np.exp(np.asarray(clean, dtype=np.float64))
    noise = np.exp(np.asarray(noisy, dtype=np.float64)) - lin
    return 10.0 * math.log10(np.mean(lin**2) / np.mean(noise**2))


class Vocoder(Protocol):
    def invert(self, mel: np.ndarray) -> np.ndarray: ...


class GriffinLim:
    def __init__(self, config: FeatureConfig = FeatureConfig(), n_iter: int = 60, nnls_iter: int = 100,
                 momentum: float = 0.99, seed: int = 0):
        self.config = config
        self.n_iter = n_iter
        self.nnls_iter = nnls_iter
        self.momentum = momentum
        self.seed = seed
        self._fb = mel_filterbank(config)

    def mel_to_linear(self, mel: np.ndarray) -> np.ndarray:
        """Non-negative least-squares magnitude spectrogram for a log-mel (multiplicative updates)."""
        target = np.exp(np.asarray(mel, dtype=np.float64))
        fb = self._fb
        est = np.maximum(target @ np.linalg.pinv(fb).T, 1e-8)
        numer = target @ fb
        for _ in range(self.nnls_iter):
            est *= numer / np.maximum((est @ fb.T) @ fb, 1e-12)
        return est

    def invert(self, mel: np.ndarray) -> np.ndarray:
        mel = np.asarray(mel)
        if mel.ndim != 2 or mel.shape[1] != self.config.n_mels:
            raise ShapeError(f"expected frames x {self.config.n_mels} mel, got {mel.shape}")
        T = mel.shape[0]
        length = T * self.config.hop_length
        mag = self.mel_to_linear(mel)
        if mag.max() <= LOG_FLOOR * 10:
            return np.zeros(length, dtype=np.float32)
        rng = np.random.default_rng(self.seed)
        angles = np.exp(2j * np.pi * rng.random(mag.shape))
        prev = np.zeros_like(angles)
        wave = istft(mag * angles, self.config, length)
        for _ in range(self.n_iter):
            rebuilt = stft(wave, self.config)[:T]
            accel = rebuilt - (self.momentum / (1 + self.momentum)) * prev
            prev = rebuilt
            angles = accel / np.maximum(np.abs(accel), 1e-12)
            wave = istft(mag * angles, self.config, length)
        return wave.astype(np.float32)


def invert(mel: np.ndarray, config: FeatureConfig = FeatureConfig(), n_iter: int = 60) -> np.ndarray:
    return GriffinLim(config, n_iter=n_iter).invert(mel)
