import numpy as np
import pytest

import singconv.conversion as conv
from singconv.corpus import FeatureRecord, Phoneme, Utterance


def utterance_with_f0(phone_specs, f0_values):
    """phone_specs: list of (symbol, is_vowel, duration)."""
    phones = [Phoneme(s, v) for s, v, _ in phone_specs]
    durations = [d for _, _, d in phone_specs]
    u = Utterance("u", "s", "singing", "x.wav", phones, durations)
    t = sum(durations)
    f0 = np.asarray(f0_values, dtype=np.float64)
    assert len(f0) == t
    rec = FeatureRecord("u", np.zeros((t, 4)), f0, np.zeros(t), np.zeros(t))
    return u, rec


class TestVowelMeanF0:
    def test_all_voiced_vowels(self):
        u, rec = utterance_with_f0([("a", True, 3)], [200.0, 200.0, 200.0])
        assert conv.vowel_mean_f0(u, rec) == pytest.approx(200.0)

    def test_unvoiced_frames_excluded(self):
        u, rec = utterance_with_f0([("a", True, 3)], [200.0, 0.0, 220.0])
        assert conv.vowel_mean_f0(u, rec) == pytest.approx(210.0)

    def test_consonant_frames_ignored(self):
        u, rec = utterance_with_f0(
            [("s", False, 2), ("a", True, 2)], [999.0, 999.0, 200.0, 220.0])
        assert conv.vowel_mean_f0(u, rec) == pytest.approx(210.0)

    def test_no_voiced_vowel_frames_errors(self):
        u, rec = utterance_with_f0([("a", True, 2)], [0.0, 0.0])
        with pytest.raises(ValueError, match="no voiced vowel"):
            conv.vowel_mean_f0(u, rec)


class TestComputeF0Ratio:
    def test_identity(self):
        profile = conv.SpeakerF0Profile("t", [150.0])
        assert conv.compute_f0_ratio(profile, 150.0) == pytest.approx(1.0)

    def test_two_utterance_profile_example(self):
        profile = conv.SpeakerF0Profile("t", [200.0, 220.0])
        assert conv.compute_f0_ratio(profile, 105.0) == pytest.approx(2.0)

    def test_homogeneity(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            means = rng.uniform(80, 400, size=int(rng.integers(1, 6))).tolist()
            source = float(rng.uniform(80, 400))
            c = float(rng.uniform(0.5, 2.0))
            base = conv.compute_f0_ratio(conv.SpeakerF0Profile("t", means), source)
            scaled_t = conv.compute_f0_ratio(
                conv.SpeakerF0Profile("t", [c * m for m in means]), source)
            scaled_s = conv.compute_f0_ratio(
                conv.SpeakerF0Profile("t", means), c * source)
            assert scaled_t == pytest.approx(c * base, rel=1e-12)
            assert scaled_s == pytest.approx(base / c, rel=1e-12)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = int(rng.integers(1, 8))
            means = rng.uniform(80, 400, size=n)
            source = float(rng.uniform(80, 400))
            nu = conv.compute_f0_ratio(
                conv.SpeakerF0Profile("t", means.tolist()), source)
            expected = float(sum(means)) / (n * source)
            assert nu == pytest.approx(expected, abs=1e-9)

    def test_reorder_invariance(self):
        means = [310.0, 120.0, 250.0]
        a = conv.compute_f0_ratio(conv.SpeakerF0Profile("t", means), 100.0)
        b = conv.compute_f0_ratio(
            conv.SpeakerF0Profile("t", means[::-1]), 100.0)
        assert a == b

    def test_errors(self):
        with pytest.raises(ValueError):
            conv.compute_f0_ratio(conv.SpeakerF0Profile("t", []), 100.0)
        with pytest.raises(ValueError):
            conv.compute_f0_ratio(conv.SpeakerF0Profile("t", [100.0]), 0.0)


class TestScaleF0:
    def test_identity(self):
        f0 = np.array([220.0, 0.0, 110.0])
        out, frac = conv.scale_f0(f0, 1.0, 0)
        assert np.array_equal(out, f0)
        assert frac == 0.0

    def test_doubling_preserves_unvoiced(self):
        out, _ = conv.scale_f0(np.array([220.0, 0.0]), 2.0)
        assert np.array_equal(out, [440.0, 0.0])

    def test_key_shift_octave(self):
        out, _ = conv.scale_f0(np.array([220.0, 110.0]), 1.0,
                               key_shift_semitones=12)
        assert np.allclose(out, [440.0, 220.0])

    def test_voicing_pattern_preserved(self):
        rng = np.random.default_rng(5)
        f0 = np.where(rng.random(50) > 0.5, rng.uniform(80, 400, 50), 0.0)
        out, _ = conv.scale_f0(f0, 1.3)
        assert np.array_equal(out > 0, f0 > 0)

    def test_clamp_warning(self):
        f0 = np.full(10, 900.0)
        with pytest.warns(UserWarning, match="clamping"):
            out, frac = conv.scale_f0(f0, 2.0)
        assert np.all(out == 1000.0)
        assert frac == 1.0

    def test_invalid_nu(self):
        with pytest.raises(ValueError):
            conv.scale_f0(np.array([220.0]), 0.0)


class TestConversionRequest:
    def test_manual_requires_positive_nu(self):
        with pytest.raises(ValueError):
            conv.ConversionRequest(None, None, "t", nu_mode="manual", nu=0.0)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            conv.ConversionRequest(None, None, "t", nu_mode="sideways")
