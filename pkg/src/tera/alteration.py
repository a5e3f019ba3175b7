"""Stochastic input alteration along time, channel and magnitude axes, plus the
SpecAugment-style masks used while fine-tuning.

All draws come from an explicit :class:`tera.rng.Rng`; the draw order is part
of the contract so a record can be regenerated from a seed.
"""

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigError, UtteranceTooShortError
from .features import FeatureMatrix

MASK_ZERO = "mask_zero"
REPLACE = "replace"
KEEP = "keep"
MODES = (MASK_ZERO, REPLACE, KEEP)


@dataclass
class AlterationConfig:
    time_percent: float = 0.15  # P_T
    time_width: int = 7  # W_T
    channel_width: int = 8  # W_C
    noise_prob: float = 0.15  # P_N
    noise_variance: float = 0.2
    enable_time: bool = True
    enable_channel: bool = True
    enable_magnitude: bool = True
    time_mode_draw: str = "per_block"

    def __post_init__(self):
        if not 0.0 <= self.time_percent <= 1.0:
            raise ConfigError(f"time_percent must lie in [0, 1], got {self.time_percent}")
        if not 0.0 <= self.noise_prob <= 1.0:
            raise ConfigError(f"noise_prob must lie in [0, 1], got {self.noise_prob}")
        if self.time_width < 1:
            raise ConfigError(f"time_width must be >= 1, got {self.time_width}")
        if self.channel_width < 0:
            raise ConfigError(f"channel_width must be >= 0, got {self.channel_width}")
        if self.noise_variance < 0:
            raise ConfigError(f"noise_variance must be >= 0, got {self.noise_variance}")
        if self.time_mode_draw not in ("per_block", "per_utterance"):
            raise ConfigError(f"time_mode_draw must be per_block or per_utterance, got {self.time_mode_draw!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TimeBlock:
    start: int
    width: int
    mode: str
    source: int = None  # start of the copied segment for ``replace``


@dataclass
class AlterationRecord:
    n_frames: int
    n_channels: int
    time_blocks: list = field(default_factory=list)
    channel_block: tuple = None  # (start, width), only when width > 0
    noise_applied: bool = False
    noise: np.ndarray = None

    @property
    def altered_frame_flags(self):
        flags = np.zeros(self.n_frames, dtype=bool)
        for b in self.time_blocks:
            flags[b.start : b.start + b.width] = True
        return flags

    @property
    def altered_channel_flags(self):
        flags = np.zeros(self.n_channels, dtype=bool)
        if self.channel_block is not None:
            start, width = self.channel_block
            flags[start : start + width] = True
        return flags

    def altered_cells(self):
        """Boolean ``[L, H]`` map of every cell touched by any alteration stage."""
        if self.noise_applied:
            return np.ones((self.n_frames, self.n_channels), dtype=bool)
        return self.altered_frame_flags[:, None] | self.altered_channel_flags[None, :]

    def to_dict(self, include_noise=False):
        d = {
            "n_frames": self.n_frames,
            "n_channels": self.n_channels,
            "time_blocks": [asdict(b) for b in self.time_blocks],
            "channel_block": list(self.channel_block) if self.channel_block else None,
            "noise_applied": self.noise_applied,
        }
        if include_noise and self.noise is not None:
            d["noise"] = self.noise.tolist()
        return d

    def merge(self, other):
        """Fold a later stage's record into this one."""
        self.time_blocks.extend(other.time_blocks)
        if other.channel_block is not None:
            self.channel_block = other.channel_block
        if other.noise_applied:
            self.noise_applied = True
            self.noise = other.noise
        return self


def round_half_away(q):
    """Nearest integer, halves rounded away from zero, on an exact rational."""
    q = Fraction(q)
    r = math.floor(abs(q) + Fraction(1, 2))
    return r if q >= 0 else -r


def num_time_blocks(time_percent, n_frames, time_width):
    """T_num: nearest integer of ``P_T * L_x / W_T``.

    ``time_percent`` is taken at its shortest decimal representation, so
    0.15 means exactly 3/20 and half-way cases are decided exactly.
    """
    q = Fraction(repr(float(time_percent))) * n_frames / time_width
    return round_half_away(q)


def _as_array(x):
    if isinstance(x, FeatureMatrix):
        return x.frames
    return np.asarray(x)


def time_alteration(x, cfg, rng):
    """Alter ``T_num`` blocks of ``W_T`` frames; returns ``(x_hat, record)``.

    Draw order: block starts (without replacement from ``[0, L-W_T]``), then per
    block a mode uniform (per_utterance: one uniform before the blocks) and, for
    ``replace``, the source start.  Replacements copy from the unaltered input.
    """
    x = _as_array(x)
    L, H = x.shape
    W = cfg.time_width
    if L < W:
        raise UtteranceTooShortError(f"utterance has {L} frames, time alteration needs >= {W}")
    n_blocks = num_time_blocks(cfg.time_percent, L, W)
    starts = rng.sample_without_replacement(L - W + 1, n_blocks)
    record = AlterationRecord(L, H)
    x_hat = x.copy()
    shared_u = rng.uniform() if (cfg.time_mode_draw == "per_utterance" and starts) else None
    for s in starts:
        u = shared_u if shared_u is not None else rng.uniform()
        if u < 0.8:
            x_hat[s : s + W] = 0
            record.time_blocks.append(TimeBlock(s, W, MASK_ZERO))
        elif u < 0.9:
            src = rng.randint(0, L - W)
            x_hat[s : s + W] = x[src : src + W]
            record.time_blocks.append(TimeBlock(s, W, REPLACE, src))
        else:
            record.time_blocks.append(TimeBlock(s, W, KEEP))
    return x_hat, record


def channel_alteration(x, cfg, rng):
    """Zero one band of ``W_c ~ U{0..W_C}`` consecutive channels across all frames."""
    x = _as_array(x)
    L, H = x.shape
    if H <= cfg.channel_width:
        raise ConfigError(f"channel_width {cfg.channel_width} must be smaller than the {H} input channels")
    record = AlterationRecord(L, H)
    width = rng.randint(0, cfg.channel_width)
    if width == 0:
        return x.copy(), record
    start = rng.randint(0, H - width - 1)
    x_hat = x.copy()
    x_hat[:, start : start + width] = 0
    record.channel_block = (start, width)
    return x_hat, record


def magnitude_alteration(x, cfg, rng):
    """With probability ``P_N`` add i.i.d. Gaussian noise of ``noise_variance``."""
    x = _as_array(x)
    L, H = x.shape
    record = AlterationRecord(L, H)
    if rng.uniform() >= cfg.noise_prob:
        return x.copy(), record
    z = rng.normals((L, H), std=math.sqrt(cfg.noise_variance)).astype(x.dtype)
    record.noise_applied = True
    record.noise = z
    return x + z, record


def alter(x, cfg, rng):
    """Apply the enabled objectives in the order time, channel, magnitude.

    Each stage works on the running result, so noise lands on top of masked
    regions.  Utterances shorter than ``W_T`` skip the time stage.
    """
    if not (cfg.enable_time or cfg.enable_channel or cfg.enable_magnitude):
        raise ConfigError("at least one alteration objective must be enabled")
    arr = _as_array(x)
    L, H = arr.shape
    record = AlterationRecord(L, H)
    x_hat = arr.copy()
    if cfg.enable_time and L >= cfg.time_width:
        x_hat, r = time_alteration(x_hat, cfg, rng)
        record.merge(r)
    if cfg.enable_channel:
        x_hat, r = channel_alteration(x_hat, cfg, rng)
        record.merge(r)
    if cfg.enable_magnitude:
        x_hat, r = magnitude_alteration(x_hat, cfg, rng)
        record.merge(r)
    return x_hat, record


def specaugment_mask(x, rng, T=70, F=4, mT=2, mF=2):
    """Zero ``mT`` time spans of width ``U{0..T}`` and ``mF`` channel spans of width ``U{0..F}``.

    No time warping.  Widths are clamped to the input size; spans may overlap.
    """
    x_hat = np.array(_as_array(x), copy=True)
    L, H = x_hat.shape
    for _ in range(mT):
        w = min(rng.randint(0, T), L)
        s = rng.randint(0, L - w)
        x_hat[s : s + w] = 0
    for _ in range(mF):
        w = min(rng.randint(0, F), H)
        s = rng.randint(0, H - w)
        x_hat[:, s : s + w] = 0
    return x_hat
