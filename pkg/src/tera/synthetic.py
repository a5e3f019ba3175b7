"""Seeded synthetic corpus: pseudo-phone spectral templates, per-speaker
channel offsets, and frame-level ground truth for the probe tasks."""

from dataclasses import asdict, dataclass

import numpy as np

from .features import FeatureKind, FeatureMatrix
from .rng import Rng, derive_seed

SPLIT_CODES = {"train": 11, "dev": 12, "test": 13}


@dataclass
class SyntheticSpec:
    n_speakers: int = 8
    utterances_per_speaker: int = 8
    n_phones: int = 8
    n_channels: int = 24
    min_frames: int = 60
    max_frames: int = 100
    min_segment: int = 12
    max_segment: int = 24
    phone_scale: float = 1.0
    speaker_scale: float = 2.0
    noise_std: float = 0.3
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class Utterance:
    features: FeatureMatrix
    phones: np.ndarray  # int label per frame
    speaker: int


def _bump(n, centre, width):
    c = np.arange(n, dtype=np.float64)
    return np.exp(-0.5 * ((c - centre) / width) ** 2)


def inventory(spec):
    """Phone templates ``[n_phones, H]`` and speaker offsets ``[n_speakers, H]``."""
    rng = Rng(derive_seed(spec.seed, 1))
    H = spec.n_channels
    phones = np.zeros((spec.n_phones, H))
    for p in range(spec.n_phones):
        for _ in range(2):
            centre = rng.uniform() * (H - 1)
            width = 1.0 + 2.0 * rng.uniform()
            phones[p] += (1.0 + rng.uniform()) * _bump(H, centre, width)
    phones -= phones.mean(axis=0, keepdims=True)
    phones *= spec.phone_scale / max(phones.std(), 1e-12)

    axis = np.linspace(-1.0, 1.0, H)
    speakers = np.zeros((spec.n_speakers, H))
    for s in range(spec.n_speakers):
        tilt = 2.0 * rng.uniform() - 1.0
        centre = rng.uniform() * (H - 1)
        height = 2.0 * rng.uniform() - 1.0
        speakers[s] = tilt * axis + height * _bump(H, centre, H / 6.0)
    speakers -= speakers.mean(axis=0, keepdims=True)
    speakers *= spec.speaker_scale / max(speakers.std(), 1e-12)
    return phones, speakers


def generate(spec, split="train"):
    """Utterances for ``split``; speakers and templates are shared across splits."""
    phones, speakers = inventory(spec)
    rng = Rng(derive_seed(spec.seed, SPLIT_CODES[split]))
    out = []
    for s in range(spec.n_speakers):
        for u in range(spec.utterances_per_speaker):
            L = rng.randint(spec.min_frames, spec.max_frames)
            labels = np.empty(L, dtype=np.int64)
            t = 0
            while t < L:
                seg = rng.randint(spec.min_segment, spec.max_segment)
                labels[t : t + seg] = rng.randbelow(spec.n_phones)
                t += seg
            frames = phones[labels] + speakers[s][None, :]
            frames = frames + rng.normals(frames.shape, std=spec.noise_std)
            fm = FeatureMatrix(f"{split}-spk{s:03d}-utt{u:03d}", f"spk{s:03d}", frames, FeatureKind.OTHER, 10.0)
            out.append(Utterance(fm, labels, s))
    return out
