"""Acoustic front end: log-mel filterbanks, MFCCs, per-speaker CMVN and the
TFEA1 feature file format."""

import enum
import os
import struct
import wave
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.fft import dct

from .errors import (
    DataError,
    DegenerateSpeakerError,
    EmptyInputError,
    FormatError,
    UnsupportedRateError,
)

SAMPLE_RATE = 16000
WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 512
PREEMPHASIS = 0.97
LOG_FLOOR = 1e-10


class FeatureKind(enum.IntEnum):
    FBANK = 0
    MFCC = 1
    FMLLR = 2
    OTHER = 3


DECLARED_DIM = {FeatureKind.FBANK: 80, FeatureKind.MFCC: 39, FeatureKind.FMLLR: 40}


@dataclass
class FeatureMatrix:
    utterance_id: str
    speaker_id: str
    frames: np.ndarray
    kind: FeatureKind = FeatureKind.OTHER
    frame_shift_ms: float = 10.0

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        self.kind = FeatureKind(self.kind)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise DataError(f"{self.utterance_id}: frames must be a non-empty 2-D matrix, got {self.frames.shape}")
        want = DECLARED_DIM.get(self.kind)
        if want is not None and self.frames.shape[1] != want:
            raise DataError(
                f"{self.utterance_id}: {self.kind.name} features must have {want} channels, got {self.frames.shape[1]}"
            )
        if not np.all(np.isfinite(self.frames)):
            raise DataError(f"{self.utterance_id}: non-finite feature values")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def n_channels(self):
        return self.frames.shape[1]


@dataclass
class Corpus:
    entries: list = field(default_factory=list)  # (utterance_id, speaker_id, path)
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "dev", "test"):
            raise DataError(f"unknown split {self.split!r}")
        seen = set()
        for utt, spk, _ in self.entries:
            if utt in seen:
                raise DataError(f"duplicate utterance_id {utt!r}")
            if not spk:
                raise DataError(f"utterance {utt!r} has an empty speaker_id")
            seen.add(utt)

    def __len__(self):
        return len(self.entries)


# ---------------------------------------------------------------------------
# waveform -> features

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels, sample_rate=SAMPLE_RATE):
    """Centre frequency (Hz) of each triangular filter."""
    edges = np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2)
    return mel_to_hz(edges[1:-1])


def mel_filterbank(n_mels, n_fft=N_FFT, sample_rate=SAMPLE_RATE):
    """Triangles that are linear on the mel axis, shape ``[n_mels, n_fft//2+1]``."""
    edges = np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2)
    bin_mel = hz_to_mel(np.arange(n_fft // 2 + 1) * sample_rate / n_fft)
    left, centre, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_mel - left) / (centre - left)
    down = (right - bin_mel) / (right - centre)
    return np.maximum(0.0, np.minimum(up, down))


def num_frames(n_samples):
    if n_samples < WIN_LENGTH:
        return 0
    return (n_samples - WIN_LENGTH) // HOP_LENGTH + 1


def _check_waveform(waveform, sample_rate):
    if sample_rate != SAMPLE_RATE:
        raise UnsupportedRateError(f"only {SAMPLE_RATE} Hz audio is supported, got {sample_rate}")
    x = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if x.size < WIN_LENGTH:
        raise EmptyInputError(f"waveform has {x.size} samples, need at least {WIN_LENGTH}")
    return x


def power_spectrum(waveform, sample_rate=SAMPLE_RATE):
    x = _check_waveform(waveform, sample_rate)
    x = np.concatenate([x[:1], x[1:] - PREEMPHASIS * x[:-1]])
    n = num_frames(x.size)
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(n)[:, None]
    window = np.hamming(WIN_LENGTH + 1)[:-1]  # periodic
    spec = np.fft.rfft(x[idx] * window, n=N_FFT, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def log_mel(waveform, sample_rate=SAMPLE_RATE, n_mels=80):
    energies = power_spectrum(waveform, sample_rate) @ mel_filterbank(n_mels).T
    return np.log(np.maximum(energies, LOG_FLOOR))


def fbank(waveform, sample_rate=SAMPLE_RATE, n_mels=80, utterance_id="", speaker_id=""):
    feats = log_mel(waveform, sample_rate, n_mels)
    kind = FeatureKind.FBANK if n_mels == 80 else FeatureKind.OTHER
    return FeatureMatrix(utterance_id, speaker_id, feats, kind, 1000.0 * HOP_LENGTH / SAMPLE_RATE)


def deltas(feats, window=2):
    """Regression deltas over ``±window`` frames with edge frames replicated."""
    feats = np.asarray(feats, dtype=np.float64)
    n = feats.shape[0]
    padded = np.pad(feats, ((window, window), (0, 0)), mode="edge")
    denom = 2.0 * sum(k * k for k in range(1, window + 1))
    out = np.zeros_like(feats)
    for k in range(1, window + 1):
        out += k * (padded[window + k : window + k + n] - padded[window - k : window - k + n])
    return out / denom


def mfcc(waveform, sample_rate=SAMPLE_RATE, n_ceps=13, n_mels=23, utterance_id="", speaker_id=""):
    """13 cepstra (C0 included) with deltas and delta-deltas: 39 channels."""
    cep = dct(log_mel(waveform, sample_rate, n_mels), type=2, axis=1, norm="ortho")[:, :n_ceps]
    d1 = deltas(cep)
    d2 = deltas(d1)
    feats = np.concatenate([cep, d1, d2], axis=1)
    kind = FeatureKind.MFCC if feats.shape[1] == 39 else FeatureKind.OTHER
    return FeatureMatrix(utterance_id, speaker_id, feats, kind, 1000.0 * HOP_LENGTH / SAMPLE_RATE)


def cmvn_per_speaker(features, var_floor=1e-8):
    """Normalize every speaker's pooled frames to zero mean and unit variance per channel."""
    pooled = {}
    for fm in features:
        if not fm.speaker_id:
            raise DataError(f"{fm.utterance_id}: missing speaker_id")
        pooled.setdefault(fm.speaker_id, []).append(fm.frames.astype(np.float64))
    stats = {}
    for spk, mats in pooled.items():
        allf = np.concatenate(mats, axis=0)
        if allf.shape[0] < 2:
            raise DegenerateSpeakerError(f"speaker {spk!r} has {allf.shape[0]} frame(s); CMVN needs at least 2")
        mu = allf.mean(axis=0)
        var = allf.var(axis=0)
        scale = np.where(var < var_floor, 1.0, 1.0 / np.sqrt(np.maximum(var, var_floor)))
        stats[spk] = (mu, scale)
    out = []
    for fm in features:
        mu, scale = stats[fm.speaker_id]
        out.append(replace(fm, frames=((fm.frames - mu) * scale).astype(np.float32)))
    return out


# ---------------------------------------------------------------------------
# I/O

def read_wav(path):
    """16-bit mono PCM; returns ``(int16 samples, sample_rate)``."""
    try:
        with wave.open(os.fspath(path), "rb") as w:
            if w.getnchannels() != 1:
                raise DataError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit samples, got {8 * w.getsampwidth()}-bit")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise FormatError(f"{path}: not a readable WAV file ({exc})") from exc
    return np.frombuffer(raw, dtype="<i2").copy(), rate


def write_wav(path, samples, sample_rate=SAMPLE_RATE):
    samples = np.asarray(samples)
    if samples.dtype != np.int16:
        samples = np.clip(np.round(samples), -32768, 32767).astype(np.int16)
    with wave.open(os.fspath(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(samples.astype("<i2").tobytes())


TFEA_MAGIC = b"TFEA1"
_TFEA_HEAD = struct.Struct("<5sBIIf")


def encode_tfea(fm):
    utt = fm.utterance_id.encode("utf-8")
    spk = fm.speaker_id.encode("utf-8")
    if len(utt) > 0xFFFF or len(spk) > 0xFFFF:
        raise DataError("identifiers longer than 65535 bytes cannot be stored")
    L, H = fm.frames.shape
    parts = [
        _TFEA_HEAD.pack(TFEA_MAGIC, int(fm.kind), L, H, fm.frame_shift_ms),
        struct.pack("<H", len(utt)),
        utt,
        struct.pack("<H", len(spk)),
        spk,
        fm.frames.astype("<f4").tobytes(order="C"),
    ]
    return b"".join(parts)


def decode_tfea(buf, source="<bytes>"):
    buf = memoryview(buf)
    try:
        magic, kind, L, H, shift = _TFEA_HEAD.unpack_from(buf, 0)
        if magic != TFEA_MAGIC:
            raise FormatError(f"{source}: bad magic {bytes(magic)!r}, expected {TFEA_MAGIC!r}")
        off = _TFEA_HEAD.size
        (n,) = struct.unpack_from("<H", buf, off)
        utt = bytes(buf[off + 2 : off + 2 + n]).decode("utf-8")
        off += 2 + n
        (n,) = struct.unpack_from("<H", buf, off)
        spk = bytes(buf[off + 2 : off + 2 + n]).decode("utf-8")
        off += 2 + n
    except struct.error as exc:
        raise FormatError(f"{source}: truncated header") from exc
    need = off + 4 * L * H
    if len(buf) != need:
        raise FormatError(f"{source}: expected {need} bytes for {L}x{H} frames, found {len(buf)}")
    try:
        kind = FeatureKind(kind)
    except ValueError as exc:
        raise FormatError(f"{source}: unknown feature kind code {kind}") from exc
    frames = np.frombuffer(bytes(buf[off:need]), dtype="<f4").reshape(L, H).astype(np.float32)
    return FeatureMatrix(utt, spk, frames, kind, shift)


def save_features(path, fm):
    with open(path, "wb") as fh:
        fh.write(encode_tfea(fm))


def load_features(path):
    with open(path, "rb") as fh:
        return decode_tfea(fh.read(), source=os.fspath(path))
