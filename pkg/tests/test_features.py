import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from oracles import frames_by_counting
from pvc.errors import ContractViolation, EmptyInputError, FormatError
from pvc.features import (ContentProjection, F0Track, FrameMatrix, Waveform,
                          content_features, extract_f0, fit_content_projection, load_waveform, mel_spectrogram,
                          num_frames, read_feature_cache, write_feature_cache)

SR = 24000


def sine(freq, seconds=1.0, amp=0.5):
    t = np.arange(int(SR * seconds)) / SR
    return Waveform(amp * np.sin(2 * np.pi * freq * t), SR)


# ---------------------------------------------------------------- load


def test_load_48k_stereo_resamples_to_mono(tmp_path):
    t = np.arange(48000) / 48000
    left = 0.3 * np.sin(2 * np.pi * 440 * t)
    right = 0.1 * np.sin(2 * np.pi * 220 * t)
    data = (np.stack([left, right], axis=1) * 32767).astype(np.int16)
    path = tmp_path / "stereo.wav"
    wavfile.write(path, 48000, data)
    w = load_waveform(path, 24000)
    assert w.sample_rate == 24000
    assert len(w) == 24000
    assert np.max(np.abs(w.samples)) <= 1.0


def test_load_same_rate_preserves_samples(tmp_path):
    rng = np.random.default_rng(0)
    pcm = rng.integers(-20000, 20000, size=2400).astype(np.int16)
    path = tmp_path / "mono.wav"
    wavfile.write(path, SR, pcm)
    w = load_waveform(path, SR)
    np.testing.assert_array_equal(w.samples, pcm.astype(np.float64) / 32768.0)


def test_load_silence(tmp_path):
    path = tmp_path / "silence.wav"
    wavfile.write(path, SR, np.zeros(SR, dtype=np.int16))
    w = load_waveform(path)
    assert len(w) == SR and not w.samples.any()


def test_load_errors(tmp_path):
    with pytest.raises(OSError):
        load_waveform(tmp_path / "missing.wav")
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not audio at all")
    with pytest.raises(OSError):
        load_waveform(bad)
    empty = tmp_path / "empty.wav"
    wavfile.write(empty, SR, np.zeros(0, dtype=np.int16))
    with pytest.raises(EmptyInputError):
        load_waveform(empty)


# ---------------------------------------------------------------- mel


def test_one_second_gives_100_frames():
    m = mel_spectrogram(sine(200))
    assert m.data.shape == (100, 80)
    assert m.kind == "mel"
    assert frames_by_counting(24000, 240) == 100


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=1200, max_value=9000))
def test_frame_count_formula(n):
    w = Waveform(np.random.default_rng(n).uniform(-0.5, 0.5, n), SR)
    m = mel_spectrogram(w)
    assert m.T == frames_by_counting(n, 240) == num_frames(n, 240)
    assert len(extract_f0(w)) == m.T


def test_silence_is_log_floor():
    m = mel_spectrogram(Waveform(np.zeros(SR), SR))
    np.testing.assert_array_equal(m.data, np.float32(np.log(1e-5)))


def test_scaling_shifts_log_mel_by_log2():
    rng = np.random.default_rng(3)
    x = rng.normal(0, 0.1, 6000)
    a = mel_spectrogram(Waveform(x, SR)).data.astype(np.float64)
    b = mel_spectrogram(Waveform(2 * x, SR)).data.astype(np.float64)
    above = a > np.log(1e-5) + 1e-3
    assert above.mean() > 0.9
    np.testing.assert_allclose(b[above] - a[above], np.log(2), atol=1e-5)


def test_too_short_and_wrong_rate():
    with pytest.raises(EmptyInputError):
        mel_spectrogram(Waveform(np.zeros(1199), SR))
    with pytest.raises(ContractViolation):
        mel_spectrogram(Waveform(np.zeros(16000), 16000))


def test_mel_is_deterministic_and_finite():
    w = Waveform(np.random.default_rng(1).normal(0, 0.3, 5000), SR)
    a, b = mel_spectrogram(w), mel_spectrogram(w)
    assert a.data.tobytes() == b.data.tobytes()
    assert np.all(np.isfinite(a.data))


# ---------------------------------------------------------------- F0


def test_f0_pure_sine():
    f0 = extract_f0(sine(200)).values
    voiced = f0[f0 > 0]
    assert voiced.size >= 95
    assert np.all(np.abs(voiced - 200) <= 5)


def test_f0_silence_is_unvoiced():
    assert not extract_f0(Waveform(np.zeros(SR), SR)).values.any()


def test_f0_two_plateaus():
    t = np.arange(SR) / SR
    inst = np.where(t < 0.5, 200.0, 300.0)
    x = 0.5 * np.sin(2 * np.pi * np.cumsum(inst) / SR)
    f0 = extract_f0(Waveform(x, SR)).values
    first, second = f0[5:45], f0[55:95]
    assert np.all(np.abs(first - 200) <= 5)
    assert np.all(np.abs(second - 300) <= 5)


def test_f0_track_rejects_negative():
    with pytest.raises(ContractViolation):
        F0Track(np.array([100.0, -1.0]), 0.01)


# ---------------------------------------------------------------- content


def test_content_shape_and_determinism():
    rng = np.random.default_rng(0)
    mels = [mel_spectrogram(Waveform(rng.normal(0, 0.2, SR), SR)) for _ in range(3)]
    proj = fit_content_projection(mels, dim=128)
    c1, c2 = content_features(mels[0], proj), content_features(mels[0], proj)
    assert c1.data.shape == (100, 128) and c1.kind == "content"
    assert c1.data.tobytes() == c2.data.tobytes()


def test_content_requires_mel():
    proj = ContentProjection.fit(np.random.default_rng(0).normal(size=(50, 140)), 4)
    with pytest.raises(ContractViolation):
        content_features(FrameMatrix(np.zeros((5, 80)), 0.01, "content"), proj)


def _recon_error(X, proj):
    return float(np.sum((X - proj.inverse_transform(proj.transform(X))) ** 2))


@pytest.mark.parametrize("seed", range(5))
def test_projection_is_optimal_low_rank(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 8)) @ rng.normal(size=(8, 8))
    for k in range(1, 8):
        err_k = _recon_error(X, ContentProjection.fit(X, k))
        # Eckart-Young oracle: trailing eigenvalues of the scatter matrix
        eig = np.sort(np.linalg.eigvalsh(np.cov(X.T, bias=True) * len(X)))[::-1]
        assert err_k == pytest.approx(eig[k:].sum(), rel=1e-8, abs=1e-8)
        for j in range(1, k):
            assert err_k <= _recon_error(X, ContentProjection.fit(X, j)) + 1e-9
        Xc = X - X.mean(axis=0)
        for _ in range(20):
            q, _ = np.linalg.qr(rng.normal(size=(8, k)))
            other = float(np.sum((Xc - Xc @ q @ q.T) ** 2))
            assert err_k <= other + 1e-9


# ---------------------------------------------------------------- cache


def test_feature_cache_round_trip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    mats = [FrameMatrix(rng.normal(size=(7, 80)), 0.01, "mel"),
            FrameMatrix(rng.uniform(0, 300, size=(7, 1)), 0.01, "f0"),
            FrameMatrix(rng.normal(size=(7, 4)), 0.01, "prosody")]
    a, b = tmp_path / "a.pvcf", tmp_path / "b.pvcf"
    write_feature_cache(a, mats)
    back = read_feature_cache(a)
    write_feature_cache(b, back)
    assert a.read_bytes() == b.read_bytes()
    assert [m.kind for m in back] == ["mel", "f0", "prosody"]
    assert back[0].hop_seconds == 0.01
    np.testing.assert_array_equal(back[0].data, mats[0].data)


def test_feature_cache_header_layout(tmp_path):
    path = tmp_path / "x.pvcf"
    write_feature_cache(path, [FrameMatrix(np.ones((2, 3)), 0.01, "content")])
    raw = path.read_bytes()
    assert raw[:4] == b"PVCF"
    assert np.frombuffer(raw[4:24], dtype="<u4").tolist() == [1, 1, 2, 3, 10000]
    assert len(raw) == 24 + 4 * 6


def test_feature_cache_rejects_garbage(tmp_path):
    path = tmp_path / "x.pvcf"
    path.write_bytes(b"XXXX" + b"\0" * 20)
    with pytest.raises(FormatError):
        read_feature_cache(path)
