"""Corpus data model, manifest I/O, feature caching and the synthetic toy corpus."""
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, lfilter

from . import signal as sig

CACHE_FORMAT_VERSION = 1

# Fixed non-tonal inventory: 5 vowels + 5 consonants.
VOWELS = ("a", "e", "i", "o", "u")
CONSONANTS = ("s", "t", "k", "n", "f")
PHONEME_INVENTORY = VOWELS + CONSONANTS

# Rough formant targets (F1, F2, F3) in Hz per vowel.
VOWEL_FORMANTS = {
    "a": (800, 1200, 2500),
    "e": (500, 1800, 2500),
    "i": (300, 2300, 3000),
    "o": (500, 900, 2400),
    "u": (350, 800, 2200),
}
# Band-pass noise bands per consonant.
CONSONANT_BANDS = {
    "s": (4000, 8000),
    "t": (2000, 6000),
    "k": (1000, 4000),
    "n": (200, 1500),
    "f": (1500, 7000),
}

PENTATONIC_SEMITONES = (0, 2, 4, 7, 9, 12)


@dataclass(frozen=True)
class Phoneme:
    symbol: str
    is_vowel: bool

    def __post_init__(self):
        if self.symbol not in PHONEME_INVENTORY:
            raise ValueError(f"unknown phoneme symbol {self.symbol!r}")


@dataclass
class Utterance:
    id: str
    speaker_id: str
    kind: str  # "speech" | "singing"
    audio_path: str
    phonemes: list
    durations: list  # frames per phone
    phone_f0: list = None  # toy-corpus ground truth, Hz per phone (0 = unvoiced)

    def __post_init__(self):
        if self.kind not in ("speech", "singing"):
            raise ValueError(f"utterance {self.id}: kind must be speech|singing")
        if len(self.phonemes) != len(self.durations):
            raise ValueError(f"utterance {self.id}: phoneme/duration length mismatch")
        if any(d < 1 for d in self.durations):
            raise ValueError(f"utterance {self.id}: durations must be >= 1")

    @property
    def total_frames(self):
        return sum(self.durations)


@dataclass
class FeatureRecord:
    utterance_id: str
    mel: np.ndarray        # T x mel_bins, log energies
    f0: np.ndarray         # T
    rmse: np.ndarray       # T
    positions: np.ndarray  # T

    @property
    def frames(self):
        return self.mel.shape[0]


@dataclass
class Corpus:
    utterances: list
    speakers: dict  # speaker_id -> dense index
    inventory: tuple = PHONEME_INVENTORY

    def phoneme_index(self, symbol):
        return self.inventory.index(symbol)

    def utterances_of_speaker(self, speaker_id):
        return [u for u in self.utterances if u.speaker_id == speaker_id]


def _utterance_to_json(u, base_dir=None):
    audio = u.audio_path
    if base_dir is not None and os.path.isabs(audio):
        audio = os.path.relpath(audio, base_dir)
    rec = {
        "utt_id": u.id,
        "speaker": u.speaker_id,
        "kind": u.kind,
        "audio": audio,
        "phones": [{"sym": p.symbol, "vowel": p.is_vowel, "dur_frames": int(d)}
                   for p, d in zip(u.phonemes, u.durations)],
    }
    if u.phone_f0 is not None:
        for entry, f0 in zip(rec["phones"], u.phone_f0):
            entry["f0_hz"] = float(f0)
    return rec


def save_manifest(path, corpus):
    """Write JSON Lines; audio paths are stored relative to the manifest."""
    base_dir = os.path.dirname(os.path.abspath(path))
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as f:
        for u in corpus.utterances:
            f.write(json.dumps(_utterance_to_json(u, base_dir)) + "\n")
    os.replace(tmp, path)


def load_manifest(path):
    """Parse a JSON Lines manifest into a validated Corpus.

    Speaker indices are assigned in first-appearance order.
    """
    utterances = []
    speakers = {}
    seen_ids = set()
    base_dir = os.path.dirname(os.path.abspath(path))
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({e})") from e
            phones = []
            durations = []
            phone_f0 = []
            has_f0 = False
            for p in rec["phones"]:
                if p["sym"] not in PHONEME_INVENTORY:
                    raise ValueError(
                        f"{path}:{lineno}: unknown phoneme symbol {p['sym']!r}")
                phones.append(Phoneme(p["sym"], bool(p["vowel"])))
                durations.append(int(p["dur_frames"]))
                if "f0_hz" in p:
                    has_f0 = True
                    phone_f0.append(float(p["f0_hz"]))
                else:
                    phone_f0.append(0.0)
            if rec["utt_id"] in seen_ids:
                raise ValueError(f"{path}:{lineno}: duplicate utterance id {rec['utt_id']!r}")
            seen_ids.add(rec["utt_id"])
            audio = rec["audio"]
            if not os.path.isabs(audio):
                audio = os.path.join(base_dir, audio)
            u = Utterance(rec["utt_id"], rec["speaker"], rec["kind"], audio,
                          phones, durations, phone_f0 if has_f0 else None)
            if u.speaker_id not in speakers:
                speakers[u.speaker_id] = len(speakers)
            utterances.append(u)
    return Corpus(utterances, speakers)


def validate_utterance(utterance, record):
    """Reconcile Σ durations with the extracted frame count T.

    If they differ by at most 2 frames the last phone duration is adjusted
    and every track truncated or padded so that Σ d = T exactly; a larger
    mismatch is an alignment error.
    """
    total = utterance.total_frames
    t = record.frames
    diff = t - total
    if abs(diff) > 2:
        raise ValueError(
            f"utterance {utterance.id}: durations sum to {total} but features "
            f"have {t} frames (mismatch > 2)")
    if diff == 0:
        return utterance, record
    if utterance.durations[-1] + diff < 1:
        raise ValueError(
            f"utterance {utterance.id}: cannot absorb {diff}-frame mismatch "
            "in the last phone")
    utterance.durations[-1] += diff
    new_t = utterance.total_frames
    record.mel = _fit_length(record.mel, new_t)
    record.f0 = _fit_length(record.f0, new_t)
    record.rmse = _fit_length(record.rmse, new_t)
    record.positions = sig.position_codes(utterance.durations)
    return utterance, record


def _fit_length(arr, t):
    if arr.shape[0] == t:
        return arr
    if arr.shape[0] > t:
        return arr[:t]
    pad = [(0, t - arr.shape[0])] + [(0, 0)] * (arr.ndim - 1)
    return np.pad(arr, pad, mode="edge")


# ---------------------------------------------------------------------------
# Toy corpus generation
# ---------------------------------------------------------------------------

@dataclass
class ToySpeaker:
    speaker_id: str
    base_pitch_hz: float
    kind: str  # "speech" | "singing": what this speaker's utterances are
    formant_shift: float = 1.0  # timbre tint: multiplies all formant frequencies
    note_semitones: tuple = PENTATONIC_SEMITONES  # note choices above base pitch


@dataclass
class ToyCorpusSpec:
    speakers: list  # of ToySpeaker
    utterances_per_speaker: int = 10
    phones_per_utterance: int = 6
    frame_config: sig.FrameConfig = field(default_factory=sig.FrameConfig)

    def __post_init__(self):
        if len(self.speakers) < 2:
            raise ValueError("toy corpus needs at least 2 speakers")


def _harmonic_segment(n, f0, formants, sr, rng):
    """Additive harmonic tone with a formant-shaped spectral envelope."""
    t = np.arange(n) / sr
    out = np.zeros(n)
    k_max = int(sr / 2 / f0)
    for k in range(1, min(k_max, 40) + 1):
        fk = k * f0
        amp = 1.0 / k
        for fc in formants:
            amp += 0.8 * np.exp(-0.5 * ((fk - fc) / 120.0) ** 2)
        amp /= k ** 0.3
        out += amp * np.sin(2 * np.pi * fk * t + rng.uniform(0, 2 * np.pi))
    return out / (np.max(np.abs(out)) + 1e-9)


def _noise_segment(n, band, sr, rng):
    noise = rng.standard_normal(n + 200)
    nyq = sr / 2
    b, a = butter(2, [band[0] / nyq, band[1] / nyq], btype="band")
    return lfilter(b, a, noise)[200:] * 0.3


def _fade(segment, n_fade):
    n_fade = min(n_fade, len(segment) // 2)
    if n_fade > 0:
        ramp = np.linspace(0, 1, n_fade)
        segment[:n_fade] *= ramp
        segment[-n_fade:] *= ramp[::-1]
    return segment


def generate_toy_corpus(spec, seed, out_dir):
    """Deterministic synthetic corpus: WAVs + manifest written under out_dir.

    Vowels are formant-shaped harmonic tones (voiced); consonants are
    band-passed noise (unvoiced). Speech utterances use the speaker's base
    pitch with ±3% jitter; singing utterances use pentatonic notes above
    the base pitch and longer vowels. Pure function of (spec, seed).
    """
    os.makedirs(out_dir, exist_ok=True)
    wav_dir = os.path.join(out_dir, "wav")
    os.makedirs(wav_dir, exist_ok=True)
    cfg = spec.frame_config
    sr = cfg.sample_rate
    rng = np.random.default_rng(seed)
    utterances = []
    speakers = {}
    for speaker in spec.speakers:
        if speaker.speaker_id not in speakers:
            speakers[speaker.speaker_id] = len(speakers)
        for j in range(spec.utterances_per_speaker):
            utt_id = f"{speaker.speaker_id}_{speaker.kind}_{j:03d}"
            phones, durations, phone_f0, audio = _render_utterance(
                speaker, spec, cfg, rng)
            path = os.path.join(wav_dir, f"{utt_id}.wav")
            sig.save_wav(path, sig.AudioClip(audio, sr))
            utterances.append(Utterance(utt_id, speaker.speaker_id, speaker.kind,
                                        path, phones, durations, phone_f0))
    corpus = Corpus(utterances, speakers)
    save_manifest(os.path.join(out_dir, "manifest.jsonl"), corpus)
    return corpus


def _render_utterance(speaker, spec, cfg, rng):
    sr = cfg.sample_rate
    phones = []
    durations = []
    phone_f0 = []
    pieces = []
    singing = speaker.kind == "singing"
    formant_mul = speaker.formant_shift
    for k in range(spec.phones_per_utterance):
        # alternate consonant/vowel so vowels are always present
        if k % 2 == 0:
            sym = CONSONANTS[rng.integers(len(CONSONANTS))]
            dur = int(rng.integers(8, 16))
            f0 = 0.0
        else:
            sym = VOWELS[rng.integers(len(VOWELS))]
            if singing:
                dur = int(rng.integers(30, 60))
                notes = speaker.note_semitones
                semis = notes[rng.integers(len(notes))]
                f0 = speaker.base_pitch_hz * 2.0 ** (semis / 12.0)
            else:
                dur = int(rng.integers(12, 30))
                f0 = speaker.base_pitch_hz * (1.0 + rng.uniform(-0.03, 0.03))
        n = dur * cfg.hop
        if f0 > 0:
            formants = [f * formant_mul for f in VOWEL_FORMANTS[sym]]
            seg = 0.7 * _harmonic_segment(n, f0, formants, sr, rng)
        else:
            seg = _noise_segment(n, CONSONANT_BANDS[sym], sr, rng)
        pieces.append(_fade(seg, cfg.hop // 4))
        phones.append(Phoneme(sym, sym in VOWELS))
        durations.append(dur)
        phone_f0.append(f0)
    audio = np.concatenate(pieces)
    peak = np.max(np.abs(audio))
    if peak > 0.95:
        audio = audio * (0.95 / peak)
    return phones, durations, phone_f0, audio


# ---------------------------------------------------------------------------
# Feature extraction with on-disk cache
# ---------------------------------------------------------------------------

TRACK_NAMES = ("mel", "f0", "rmse", "positions")


@dataclass
class FeaturizeStats:
    extracted: int = 0
    cached: int = 0


def config_hash(frame_config):
    blob = json.dumps(frame_config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_f32(path, arr):
    tmp = f"{path}.tmp.{os.getpid()}"
    np.asarray(arr, dtype="<f4").tofile(tmp)
    os.replace(tmp, path)


def _cache_paths(cache_dir, utt_id):
    meta = os.path.join(cache_dir, f"{utt_id}.meta.json")
    tracks = {t: os.path.join(cache_dir, f"{utt_id}.{t}.f32") for t in TRACK_NAMES}
    return meta, tracks


def _load_cached(cache_dir, utt_id, cfg_hash):
    meta_path, track_paths = _cache_paths(cache_dir, utt_id)
    if not os.path.exists(meta_path):
        return None
    with open(meta_path) as f:
        meta = json.load(f)
    if meta.get("format_version") != CACHE_FORMAT_VERSION:
        return None
    if meta.get("config_hash") != cfg_hash:
        return None
    arrays = {}
    for track in TRACK_NAMES:
        path = track_paths[track]
        if not os.path.exists(path):
            return None
        shape = tuple(meta["shapes"][track])
        arr = np.fromfile(path, dtype="<f4")
        if arr.size != int(np.prod(shape)):
            return None
        arrays[track] = arr.reshape(shape).astype(np.float64)
    return FeatureRecord(utt_id, arrays["mel"], arrays["f0"], arrays["rmse"],
                         arrays["positions"])


def _store_cached(cache_dir, record, cfg_hash):
    meta_path, track_paths = _cache_paths(cache_dir, record.utterance_id)
    arrays = {"mel": record.mel, "f0": record.f0, "rmse": record.rmse,
              "positions": record.positions}
    for track, arr in arrays.items():
        _write_f32(track_paths[track], arr)
    meta = {
        "format_version": CACHE_FORMAT_VERSION,
        "config_hash": cfg_hash,
        "shapes": {t: list(np.asarray(a).shape) for t, a in arrays.items()},
    }
    tmp = f"{meta_path}.tmp.{os.getpid()}"
    with open(tmp, "w") as f:
        json.dump(meta, f)
    os.replace(tmp, meta_path)


def extract_features(utterance, frame_config):
    clip = sig.load_wav(utterance.audio_path, expected_rate=frame_config.sample_rate)
    mel = sig.compute_mel_spectrogram(clip, frame_config)
    record = FeatureRecord(
        utterance.id,
        mel.frames,
        sig.estimate_f0(clip, frame_config),
        sig.compute_rmse(clip, frame_config),
        sig.position_codes(utterance.durations),
    )
    validate_utterance(utterance, record)
    return record


def featurize_corpus(corpus, frame_config, cache_dir, stats=None):
    """FeatureRecord per utterance, cached under cache_dir.

    Cache entries are keyed by utterance id and FrameConfig hash; stale or
    partial entries are re-extracted. Returns {utt_id: FeatureRecord}.
    """
    os.makedirs(cache_dir, exist_ok=True)
    cfg_hash = config_hash(frame_config)
    if stats is None:
        stats = FeaturizeStats()
    records = {}
    for u in corpus.utterances:
        cached = _load_cached(cache_dir, u.id, cfg_hash)
        if cached is not None:
            # position codes must still match the manifest durations
            validate_utterance(u, cached)
            records[u.id] = cached
            stats.cached += 1
            continue
        record = extract_features(u, frame_config)
        # round-trip through float32 so warm and cold cache reads agree
        _store_cached(cache_dir, record, cfg_hash)
        records[u.id] = _load_cached(cache_dir, u.id, cfg_hash)
        stats.extracted += 1
    return records, stats


def mel_statistics(records):
    """Per-bin mean and std of the mel targets across a record set."""
    stacked = np.concatenate([r.mel for r in records], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    return mean, np.maximum(std, 1e-4)
