import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tera.errors import DataError, DegenerateSpeakerError, EmptyInputError, FormatError, UnsupportedRateError
from tera.features import (
    LOG_FLOOR,
    FeatureKind,
    FeatureMatrix,
    cmvn_per_speaker,
    decode_tfea,
    deltas,
    encode_tfea,
    fbank,
    hz_to_mel,
    load_features,
    mel_center_frequencies,
    mel_filterbank,
    mfcc,
    num_frames,
    read_wav,
    save_features,
    write_wav,
)

SR = 16000


def tone(freq, seconds=1.0, amp=8000.0):
    t = np.arange(int(SR * seconds)) / SR
    return np.round(amp * np.sin(2 * np.pi * freq * t)).astype(np.int16)


def test_one_second_gives_98_frames():
    assert num_frames(16000) == 98
    assert fbank(tone(440)).frames.shape == (98, 80)
    assert mfcc(tone(440)).frames.shape == (98, 39)


@given(st.integers(400, 40000))
def test_frame_count_formula(n):
    assert num_frames(n) == (n - 400) // 160 + 1


def test_frame_count_matches_extractor_for_odd_lengths():
    rng = np.random.default_rng(0)
    for n in (400, 401, 559, 560, 561, 4321):
        x = rng.integers(-1000, 1000, n).astype(np.int16)
        assert fbank(x).n_frames == (n - 400) // 160 + 1


def test_mel_scale_formula():
    assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2))
    assert hz_to_mel(0.0) == 0.0


def test_mel_filter_peaks_at_centres():
    fb = mel_filterbank(80)
    assert fb.shape == (80, 257)
    assert fb.max() <= 1.0 + 1e-12 and fb.min() >= 0.0
    assert np.all(fb.sum(axis=1) > 0)  # no empty filter


def test_1khz_tone_lands_in_bracketing_filters():
    feats = fbank(tone(1000.0)).frames
    centres = mel_center_frequencies(80)
    peak = int(np.argmax(feats[10:-10].mean(axis=0)))
    below = int(np.searchsorted(centres, 1000.0)) - 1
    assert peak in (below, below + 1)
    assert centres[below] <= 1000.0 <= centres[below + 1]


def test_silence_hits_log_floor():
    feats = fbank(np.zeros(4000, dtype=np.int16)).frames
    np.testing.assert_allclose(feats, np.float32(np.log(LOG_FLOOR)))


def test_input_errors():
    with pytest.raises(EmptyInputError):
        fbank(np.zeros(399, dtype=np.int16))
    with pytest.raises(UnsupportedRateError):
        fbank(np.zeros(16000, dtype=np.int16), sample_rate=8000)
    with pytest.raises(UnsupportedRateError):
        mfcc(np.zeros(16000, dtype=np.int16), sample_rate=44100)


def test_features_are_deterministic():
    x = tone(333.0, 0.5)
    assert fbank(x).frames.tobytes() == fbank(x).frames.tobytes()
    assert mfcc(x).frames.tobytes() == mfcc(x).frames.tobytes()


def test_mfcc_deltas_of_silence_are_zero():
    m = mfcc(np.zeros(8000, dtype=np.int16)).frames
    np.testing.assert_array_equal(m[:, 13:], 0.0)


def test_deltas_of_ramp():
    ramp = np.arange(30, dtype=np.float64)[:, None] * np.array([[0.5, -2.0]])
    d1 = deltas(ramp)
    np.testing.assert_allclose(d1[2:-2], np.tile([[0.5, -2.0]], (26, 1)), atol=1e-12)
    d2 = deltas(d1)
    np.testing.assert_allclose(d2[4:-4], 0.0, atol=1e-12)


def _fm(utt, spk, frames, kind=FeatureKind.OTHER):
    return FeatureMatrix(utt, spk, frames, kind)


def test_feature_matrix_validation():
    with pytest.raises(DataError):
        FeatureMatrix("u", "s", np.zeros((5, 79)), FeatureKind.FBANK)
    with pytest.raises(DataError):
        FeatureMatrix("u", "s", np.zeros((0, 4)))
    with pytest.raises(DataError):
        FeatureMatrix("u", "s", np.array([[np.nan]]))
    FeatureMatrix("u", "s", np.zeros((3, 40)), FeatureKind.FMLLR)


def _pooled_stats(feats, spk):
    allf = np.concatenate([f.frames for f in feats if f.speaker_id == spk]).astype(np.float64)
    return allf.mean(axis=0), allf.var(axis=0)


def test_cmvn_single_utterance():
    x = np.random.default_rng(0).normal(3.0, 2.0, size=(50, 6))
    (out,) = cmvn_per_speaker([_fm("a", "s1", x)])
    np.testing.assert_allclose(out.frames.mean(axis=0), 0.0, atol=1e-4)
    np.testing.assert_allclose(out.frames.var(axis=0), 1.0, atol=1e-3)


def test_cmvn_two_speakers_independent():
    rng = np.random.default_rng(1)
    feats = [
        _fm("a1", "A", rng.normal(5.0, 1.0, (40, 4))),
        _fm("a2", "A", rng.normal(5.0, 1.0, (30, 4))),
        _fm("b1", "B", rng.normal(-3.0, 4.0, (60, 4))),
    ]
    out = cmvn_per_speaker(feats)
    for spk in ("A", "B"):
        mu, var = _pooled_stats(out, spk)
        np.testing.assert_allclose(mu, 0.0, atol=1e-4)
        np.testing.assert_allclose(var, 1.0, atol=1e-3)
    # per-utterance means inside speaker A are not forced to zero
    assert np.abs(out[0].frames.mean(axis=0)).max() > 1e-3


def test_cmvn_idempotent_and_constant_channel():
    x = np.random.default_rng(2).normal(size=(20, 3))
    x[:, 1] = 7.0
    once = cmvn_per_speaker([_fm("u", "s", x)])
    twice = cmvn_per_speaker(once)
    np.testing.assert_allclose(twice[0].frames, once[0].frames, atol=1e-4)
    np.testing.assert_array_equal(once[0].frames[:, 1], 0.0)


def test_cmvn_degenerate_speaker():
    with pytest.raises(DegenerateSpeakerError):
        cmvn_per_speaker([_fm("u", "s", np.ones((1, 3)))])


def test_tfea_roundtrip_bit_exact(tmp_path):
    x = np.random.default_rng(3).normal(size=(17, 80)).astype(np.float32)
    fm = FeatureMatrix("utt-ü", "spk/7", x, FeatureKind.FBANK, 10.0)
    blob = encode_tfea(fm)
    back = decode_tfea(blob)
    assert back.frames.tobytes() == x.tobytes()
    assert (back.utterance_id, back.speaker_id, back.kind, back.frame_shift_ms) == ("utt-ü", "spk/7", FeatureKind.FBANK, 10.0)
    assert encode_tfea(back) == blob
    p = tmp_path / "x.tfea"
    save_features(p, fm)
    assert p.read_bytes() == blob
    assert load_features(p).frames.tobytes() == x.tobytes()


def test_tfea_layout():
    fm = FeatureMatrix("ab", "c", np.array([[1.0, 2.0]]), FeatureKind.OTHER, 10.0)
    blob = encode_tfea(fm)
    assert blob[:5] == b"TFEA1"
    assert blob[5] == 3
    assert int.from_bytes(blob[6:10], "little") == 1
    assert int.from_bytes(blob[10:14], "little") == 2
    assert blob[18:20] == (2).to_bytes(2, "little") and blob[20:22] == b"ab"
    assert blob[-8:] == np.array([1.0, 2.0], dtype="<f4").tobytes()


def test_tfea_corruption():
    blob = encode_tfea(FeatureMatrix("u", "s", np.ones((3, 2))))
    with pytest.raises(FormatError):
        decode_tfea(blob[:-1])
    with pytest.raises(FormatError):
        decode_tfea(b"XXXXX" + blob[5:])
    with pytest.raises(FormatError):
        decode_tfea(blob[:8])


def test_wav_roundtrip(tmp_path):
    x = tone(500.0, 0.1)
    write_wav(tmp_path / "a.wav", x)
    y, rate = read_wav(tmp_path / "a.wav")
    assert rate == SR
    np.testing.assert_array_equal(x, y)
