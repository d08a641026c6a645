"""Waveform generation: mel inversion + Griffin-Lim phase reconstruction."""
from dataclasses import dataclass

import numpy as np

from . import signal as sig


@dataclass(frozen=True)
class GriffinLimConfig:
    iterations: int = 60
    momentum: float = 0.99
    power: float = 1.2  # sharpening exponent applied to magnitudes

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


def mel_to_linear(mel):
    """Pseudo-inverse mapping from log-mel energies to linear magnitudes.

    Output is T x (fft_size/2 + 1), clamped at zero.
    """
    cfg = mel.config
    bank = sig.mel_filterbank(cfg)
    if mel.frames.shape[1] != bank.shape[0]:
        raise ValueError(
            f"mel has {mel.frames.shape[1]} bins but filterbank expects "
            f"{bank.shape[0]}")
    energies = np.exp(mel.frames)
    inv = np.linalg.pinv(bank)
    return np.maximum(energies @ inv.T, 0.0)


def _stft(samples, cfg):
    clip = sig.AudioClip(samples, cfg.sample_rate)
    frames = sig.frame_signal(clip, cfg)
    win = np.hanning(cfg.window)
    return np.fft.rfft(frames * win[None, :], n=cfg.fft_size, axis=1)


def _istft(spec, cfg, n_samples):
    """Weighted overlap-add inverse of the left-aligned framing."""
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, :cfg.window]
    win = np.hanning(cfg.window)
    t = spec.shape[0]
    total = (t - 1) * cfg.hop + cfg.window
    num = np.zeros(total)
    den = np.zeros(total)
    for i in range(t):
        start = i * cfg.hop
        num[start:start + cfg.window] += frames[i] * win
        den[start:start + cfg.window] += win ** 2
    out = num / np.maximum(den, 1e-8)
    return out[:n_samples]


def griffin_lim(magnitudes, config, frame_config, return_errors=False):
    """Iterative phase reconstruction with momentum, zero-phase init.

    Returns an AudioClip with peak limited to 0.95; with return_errors=True
    also returns the per-iteration spectral convergence of the projected
    estimate.
    """
    cfg = frame_config
    mags = np.asarray(magnitudes, dtype=np.float64) ** config.power
    t = mags.shape[0]
    n_samples = t * cfg.hop
    target_norm = max(np.linalg.norm(mags), 1e-12)
    angles = np.ones_like(mags, dtype=np.complex128)  # zero phase
    rebuilt_prev = np.zeros_like(mags, dtype=np.complex128)
    errors = []

    def project(a):
        x = _istft(mags * a, cfg, n_samples)
        r = _stft(x, cfg)[:t]
        return r, float(np.linalg.norm(np.abs(r) - mags) / target_norm)

    last_rebuilt = None
    for _ in range(config.iterations):
        rebuilt, err = project(angles)
        if errors and err > errors[-1] and last_rebuilt is not None:
            # momentum overshoot: redo this step as a plain projection
            angles = last_rebuilt / np.maximum(np.abs(last_rebuilt), 1e-12)
            rebuilt, err = project(angles)
            rebuilt_prev = np.zeros_like(mags, dtype=np.complex128)
        errors.append(err)
        step = rebuilt - (config.momentum / (1 + config.momentum)) * rebuilt_prev
        rebuilt_prev = rebuilt
        last_rebuilt = rebuilt
        angles = step / np.maximum(np.abs(step), 1e-12)
    samples = _istft(mags * angles, cfg, n_samples)
    # normalize downward only: near-silent input must stay near-silent
    peak = np.max(np.abs(samples))
    if peak > 0.95:
        samples = samples * (0.95 / peak)
    clip = sig.AudioClip(samples, cfg.sample_rate)
    if return_errors:
        return clip, errors
    return clip


def mel_to_audio(mel, config=None):
    """Convenience: predicted mel-spectrogram straight to an AudioClip."""
    if config is None:
        config = GriffinLimConfig()
    return griffin_lim(mel_to_linear(mel), config, mel.config)
