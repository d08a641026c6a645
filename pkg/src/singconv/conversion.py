"""Singing voice conversion: condition on source features, swap in the
target speaker embedding, rescale F0, free-run the decoder."""
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from . import signal as sig
from .training import F0_REFERENCE_HZ, denormalize_mel


@dataclass
class ConversionRequest:
    source_utterance: object     # corpus.Utterance
    source_features: object      # corpus.FeatureRecord
    target_speaker_id: str
    nu_mode: str = "auto"        # "auto" | "manual" | "none"
    nu: float = None             # required for manual mode
    key_shift_semitones: int = 0

    def __post_init__(self):
        if self.nu_mode not in ("auto", "manual", "none"):
            raise ValueError(f"unknown nu_mode {self.nu_mode!r}")
        if self.nu_mode == "manual":
            if self.nu is None or self.nu <= 0:
                raise ValueError("manual nu must be > 0")


@dataclass
class SpeakerF0Profile:
    """Per-utterance voiced-vowel mean F0 of one speaker."""
    speaker_id: str
    utterance_means: list  # Hz, one per utterance

    @property
    def count(self):
        return len(self.utterance_means)


def vowel_frame_mask(utterance):
    """Boolean frame mask: True where the frame lies inside a vowel phone."""
    mask = np.zeros(utterance.total_frames, dtype=bool)
    offset = 0
    for phone, dur in zip(utterance.phonemes, utterance.durations):
        if phone.is_vowel:
            mask[offset:offset + dur] = True
        offset += dur
    return mask


def vowel_mean_f0(utterance, features):
    """Mean F0 over voiced frames inside vowel phones."""
    mask = vowel_frame_mask(utterance) & (features.f0 > 0)
    if not mask.any():
        raise ValueError(f"utterance {utterance.id}: no voiced vowel frames")
    return float(features.f0[mask].mean())


def speaker_f0_profile(speaker_id, utterances, records):
    means = []
    for u in utterances:
        if u.speaker_id != speaker_id:
            continue
        try:
            means.append(vowel_mean_f0(u, records[u.id]))
        except ValueError:
            continue
    if not means:
        raise ValueError(f"speaker {speaker_id!r} has no voiced vowel frames "
                         "in any utterance")
    return SpeakerF0Profile(speaker_id, means)


def compute_f0_ratio(profile, source_mean):
    """Ratio of the target speaker's average vowel pitch to the source's."""
    if profile.count < 1:
        raise ValueError("empty speaker F0 profile")
    if source_mean <= 0:
        raise ValueError("source mean F0 must be > 0")
    return float(sum(profile.utterance_means) / (profile.count * source_mean))


def scale_f0(f0, nu, key_shift_semitones=0, f0_min=60.0, f0_max=1000.0):
    """Multiply voiced frames by nu * 2^(key_shift/12); unvoiced stay 0.

    Values pushed outside the estimator range are clamped; a warning is
    issued when more than 20% of voiced frames clamp.
    """
    if nu <= 0:
        raise ValueError("nu must be > 0")
    f0 = np.asarray(f0, dtype=np.float64)
    factor = nu * 2.0 ** (key_shift_semitones / 12.0)
    out = np.where(f0 > 0, f0 * factor, 0.0)
    voiced = out > 0
    clamped = voiced & ((out < f0_min) | (out > f0_max))
    n_voiced = int(voiced.sum())
    clamped_fraction = float(clamped.sum() / n_voiced) if n_voiced else 0.0
    if clamped_fraction > 0.2:
        warnings.warn(
            f"{clamped_fraction:.0%} of voiced frames fall outside "
            f"[{f0_min}, {f0_max}] Hz after scaling; clamping")
    out[voiced] = np.clip(out[voiced], f0_min, f0_max)
    return out, clamped_fraction


def convert(request, checkpoint, corpus, records):
    """Generate the converted mel-spectrogram (denormalized) + diagnostics.

    corpus/records supply the target speaker's training utterances for the
    automatic nu computation; only the target embedding enters the model.
    """
    if request.target_speaker_id not in checkpoint.speakers:
        raise ValueError(
            f"unknown speaker {request.target_speaker_id!r}; known: "
            f"{sorted(checkpoint.speakers)}")
    utterance = request.source_utterance
    features = request.source_features

    source_mean = None
    profile_means = []
    if request.nu_mode == "auto":
        source_mean = vowel_mean_f0(utterance, features)
        profile = speaker_f0_profile(request.target_speaker_id,
                                     corpus.utterances, records)
        profile_means = profile.utterance_means
        nu = compute_f0_ratio(profile, source_mean)
    elif request.nu_mode == "manual":
        nu = request.nu
    else:
        nu = 1.0

    cfg = checkpoint.frame_config
    scaled_f0, clamped_fraction = scale_f0(
        features.f0, nu, request.key_shift_semitones,
        f0_min=cfg.f0_min, f0_max=cfg.f0_max)

    model = checkpoint.model
    model.eval()
    dtype = torch.float32
    t = features.frames
    phoneme_ids = torch.tensor(
        [[checkpoint.inventory.index(p.symbol) for p in utterance.phonemes]])
    speaker_ids = torch.tensor([checkpoint.speakers[request.target_speaker_id]])
    f0_cond = torch.as_tensor(
        sig.f0_conditioning(scaled_f0, F0_REFERENCE_HZ), dtype=dtype).unsqueeze(0)
    rmse = torch.as_tensor(features.rmse, dtype=dtype).unsqueeze(0)
    positions = torch.as_tensor(features.positions, dtype=dtype).unsqueeze(0)
    with torch.no_grad():
        _, post = model(phoneme_ids, speaker_ids, [list(utterance.durations)],
                        f0_cond, rmse, positions, targets=None,
                        frame_lengths=[t])
    mel = denormalize_mel(post[0].numpy().astype(np.float64),
                          checkpoint.mel_mean, checkpoint.mel_std)
    diagnostics = {
        "nu": nu,
        "source_mean_f0": source_mean,
        "target_profile_means": list(profile_means),
        "frames": t,
        "clamped_voiced_fraction": clamped_fraction,
        "key_shift_semitones": request.key_shift_semitones,
        "target_speaker": request.target_speaker_id,
        "scaled_f0_median_voiced": float(np.median(scaled_f0[scaled_f0 > 0]))
        if (scaled_f0 > 0).any() else 0.0,
    }
    return sig.MelSpectrogram(mel, cfg), diagnostics
