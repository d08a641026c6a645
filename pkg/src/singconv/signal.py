"""DSP front end: framing, mel-spectrogram, F0, RMSE, position codes.

All functions here are pure and operate on numpy arrays; frame counts are
consistent across every track extracted with the same FrameConfig.
"""
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile


@dataclass(frozen=True)
class FrameConfig:
    sample_rate: int = 24000
    hop: int = 300
    window: int = 1200
    fft_size: int = 2048
    mel_bins: int = 80
    fmin: float = 40.0
    fmax: float = 12000.0
    # F0 estimator settings
    f0_min: float = 60.0
    f0_max: float = 1000.0
    f0_voicing_threshold: float = 0.3
    f0_median_filter: bool = False
    log_floor: float = 1e-5

    def validate(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.window < self.hop:
            raise ValueError("window must be >= hop")
        if self.fft_size < self.window:
            raise ValueError("fft_size must be >= window")
        nyquist = self.sample_rate / 2
        if not (0 <= self.fmin < self.fmax <= nyquist):
            raise ValueError(
                f"need 0 <= fmin < fmax <= {nyquist}, got fmin={self.fmin} fmax={self.fmax}")
        if not (0 < self.f0_min < self.f0_max < nyquist):
            raise ValueError("F0 search range must lie inside (0, Nyquist)")

    def to_dict(self):
        return {
            "sample_rate": self.sample_rate, "hop": self.hop, "window": self.window,
            "fft_size": self.fft_size, "mel_bins": self.mel_bins,
            "fmin": self.fmin, "fmax": self.fmax,
            "f0_min": self.f0_min, "f0_max": self.f0_max,
            "f0_voicing_threshold": self.f0_voicing_threshold,
            "f0_median_filter": self.f0_median_filter,
            "log_floor": self.log_floor,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = 24000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # T x mel_bins, log energies
    config: FrameConfig


def load_wav(path, expected_rate=None):
    """Read a mono PCM WAV (int16 or float32) into an AudioClip."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.ndim} channels")
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} != expected {expected_rate} "
                         "(resampling not supported)")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported WAV sample format {data.dtype}")
    return AudioClip(samples, rate)


def save_wav(path, clip):
    """Write an AudioClip as mono PCM-16 WAV (atomic write)."""
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype(np.int16)
    tmp = f"{path}.tmp.{os.getpid()}"
    wavfile.write(tmp, clip.sample_rate, pcm)
    os.replace(tmp, path)


def num_frames(n_samples, config):
    return int(np.ceil(n_samples / config.hop))


def frame_signal(clip, config):
    """Slice a clip into T = ceil(len/hop) frames of `window` samples.

    Frame i covers samples [i*hop, i*hop + window); the tail is zero-padded.
    """
    config.validate()
    x = clip.samples
    if x.size == 0:
        raise ValueError("empty audio")
    t = num_frames(x.size, config)
    needed = (t - 1) * config.hop + config.window
    if needed > x.size:
        x = np.concatenate([x, np.zeros(needed - x.size)])
    idx = np.arange(config.window)[None, :] + config.hop * np.arange(t)[:, None]
    return x[idx]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config):
    """Triangular mel filterbank, mel_bins x (fft_size/2 + 1).

    Unit-peak triangles: adjacent filters overlap so that no FFT bin
    receives total weight above 1.
    """
    n_bins = config.fft_size // 2 + 1
    fft_freqs = np.arange(n_bins) * config.sample_rate / config.fft_size
    mel_pts = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax),
                          config.mel_bins + 2)
    hz_pts = mel_to_hz(mel_pts)
    bank = np.zeros((config.mel_bins, n_bins))
    for m in range(config.mel_bins):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (fft_freqs - lo) / (center - lo)
        down = (hi - fft_freqs) / (hi - center)
        bank[m] = np.maximum(0.0, np.minimum(up, down))
        if bank[m].sum() <= 0:
            # filter narrower than one FFT bin: take the nearest bin
            bank[m, int(np.argmin(np.abs(fft_freqs - center)))] = 1.0
    return bank


def mel_filter_centers(config):
    mel_pts = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax),
                          config.mel_bins + 2)
    return mel_to_hz(mel_pts)[1:-1]


def stft_magnitudes(clip, config):
    frames = frame_signal(clip, config)
    win = np.hanning(config.window)
    spec = np.fft.rfft(frames * win[None, :], n=config.fft_size, axis=1)
    return np.abs(spec)


def compute_mel_spectrogram(clip, config):
    """Log mel energies, T x mel_bins, clamped at log_floor before the log."""
    mags = stft_magnitudes(clip, config)
    mel = mags @ mel_filterbank(config).T
    return MelSpectrogram(np.log(np.maximum(mel, config.log_floor)), config)


def compute_rmse(clip, config):
    """Per-frame RMS energy aligned with the mel frames."""
    frames = frame_signal(clip, config)
    return np.sqrt(np.mean(frames ** 2, axis=1))


def _acf_peak(frame, lag_min, lag_max):
    """Best normalized-autocorrelation peak in [lag_min, lag_max].

    Returns (lag, value) with parabolic interpolation around the chosen
    local maximum; prefers the shortest lag among near-equal peaks to
    avoid period-doubling on harmonic signals.
    """
    n = frame.size
    acf = np.correlate(frame, frame, mode="full")[n - 1:]
    # normalized by the energies of the two overlapping segments
    energy = np.cumsum(frame ** 2)
    e0 = energy[-1]
    lags = np.arange(lag_min, lag_max + 1)
    head = e0 - np.concatenate([[0.0], energy[:-1]])[lags]  # sum x[lag:]^2
    tail = energy[n - 1 - lags]                             # sum x[:n-lag]^2
    denom = np.sqrt(head * tail)
    with np.errstate(invalid="ignore", divide="ignore"):
        nacf = np.where(denom > 0, acf[lags] / denom, 0.0)
    if nacf.size < 3:
        return None
    # local maxima
    peaks = np.where((nacf[1:-1] >= nacf[:-2]) & (nacf[1:-1] >= nacf[2:]))[0] + 1
    if peaks.size == 0:
        peaks = np.array([int(np.argmax(nacf))])
    best = nacf[peaks].max()
    if best > 0:
        chosen = peaks[nacf[peaks] >= 0.9 * best][0]
    else:
        chosen = peaks[int(np.argmax(nacf[peaks]))]
    lag = lags[chosen]
    val = nacf[chosen]
    # parabolic interpolation for sub-sample period
    if 0 < chosen < nacf.size - 1:
        a, b, c = nacf[chosen - 1], nacf[chosen], nacf[chosen + 1]
        denom2 = a - 2 * b + c
        if abs(denom2) > 1e-12:
            delta = 0.5 * (a - c) / denom2
            if abs(delta) < 1:
                lag = lag + delta
    return lag, val


def estimate_f0(clip, config):
    """Per-frame F0 in Hz via normalized autocorrelation; 0.0 = unvoiced."""
    config.validate()
    frames = frame_signal(clip, config)
    sr = config.sample_rate
    lag_min = max(2, int(np.floor(sr / config.f0_max)))
    lag_max = min(config.window - 2, int(np.ceil(sr / config.f0_min)))
    out = np.zeros(frames.shape[0])
    for i, frame in enumerate(frames):
        frame = frame - frame.mean()
        if np.sqrt(np.mean(frame ** 2)) < 1e-6:
            continue
        peak = _acf_peak(frame, lag_min, lag_max)
        if peak is None:
            continue
        lag, val = peak
        if val < config.f0_voicing_threshold:
            continue
        f0 = sr / lag
        if config.f0_min <= f0 <= config.f0_max:
            out[i] = f0
    if config.f0_median_filter:
        out = _median3_voiced(out)
    return out


def _median3_voiced(f0):
    """Width-3 median filter applied over voiced runs only."""
    out = f0.copy()
    for i in range(1, len(f0) - 1):
        window = f0[i - 1:i + 2]
        if np.all(window > 0):
            out[i] = np.median(window)
    return out


def position_codes(durations):
    """Relative frame positions inside each phone: frame j of d gets j/d."""
    durations = list(durations)
    if any(d <= 0 for d in durations):
        raise ValueError(f"all durations must be >= 1, got {durations}")
    parts = [np.arange(1, d + 1) / d for d in durations]
    return np.concatenate(parts) if parts else np.zeros(0)


def f0_conditioning(f0, reference_hz=220.0):
    """Encode F0 as (log2 pitch ratio, voicing flag), T x 2."""
    if reference_hz <= 0:
        raise ValueError("reference_hz must be positive")
    f0 = np.asarray(f0, dtype=np.float64)
    voiced = f0 > 0
    out = np.zeros((f0.size, 2))
    out[voiced, 0] = np.log2(f0[voiced] / reference_hz)
    out[voiced, 1] = 1.0
    return out
