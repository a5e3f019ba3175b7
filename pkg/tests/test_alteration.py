import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats
from scipy.special import comb

from tera.alteration import (
    KEEP,
    MASK_ZERO,
    REPLACE,
    AlterationConfig,
    alter,
    channel_alteration,
    magnitude_alteration,
    num_time_blocks,
    round_half_away,
    specaugment_mask,
    time_alteration,
)
from tera.errors import ConfigError, UtteranceTooShortError
from tera.rng import Rng


def ramp(L, H):
    return (np.arange(L * H, dtype=np.float32).reshape(L, H) + 1.0)


def test_t_num_examples():
    assert num_time_blocks(0.15, 980, 7) == 21
    assert num_time_blocks(0.15, 100, 7) == 2
    assert num_time_blocks(0.0, 500, 7) == 0
    assert num_time_blocks(0.15, 100, 1) == 15


def test_round_half_away():
    assert round_half_away(Fraction(5, 2)) == 3
    assert round_half_away(Fraction(-5, 2)) == -3
    assert round_half_away(Fraction(7, 3)) == 2
    # 0.05 * 10 / 1 is exactly one half: a float product would give 0.5000000000000001
    assert num_time_blocks(0.05, 10, 1) == 1
    assert num_time_blocks(0.5, 7, 7) == 1


def test_p_t_zero_is_identity():
    x = ramp(30, 4)
    x_hat, rec = time_alteration(x, AlterationConfig(time_percent=0.0), Rng(0))
    assert x_hat.tobytes() == x.tobytes()
    assert rec.time_blocks == []


def test_time_blocks_within_bounds_and_modes():
    x = ramp(120, 5)
    cfg = AlterationConfig(time_percent=0.5)
    x_hat, rec = time_alteration(x, cfg, Rng(3))
    assert len(rec.time_blocks) == num_time_blocks(0.5, 120, 7)
    starts = [b.start for b in rec.time_blocks]
    assert len(set(starts)) == len(starts)
    for b in rec.time_blocks:
        assert 0 <= b.start <= 120 - 7 and b.width == 7
        if b.mode == REPLACE:
            assert 0 <= b.source <= 120 - 7
    untouched = ~rec.altered_frame_flags
    np.testing.assert_array_equal(x_hat[untouched], x[untouched])


def test_modes_applied_as_recorded():
    x = ramp(300, 3)
    seen = set()
    for seed in range(40):
        cfg = AlterationConfig(time_percent=0.1)
        x_hat, rec = time_alteration(x, cfg, Rng(seed))
        blocks = rec.time_blocks
        for i, b in enumerate(blocks):
            # frames not overlapped by any later block show this block's effect
            later = np.zeros(300, bool)
            for c in blocks[i + 1 :]:
                later[c.start : c.start + c.width] = True
            own = np.arange(b.start, b.start + b.width)
            own = own[~later[own]]
            seen.add(b.mode)
            if b.mode == MASK_ZERO:
                assert np.all(x_hat[own] == 0)
            elif b.mode == REPLACE:
                np.testing.assert_array_equal(x_hat[own], x[own - b.start + b.source])
            else:
                np.testing.assert_array_equal(x_hat[own], x[own])
    assert seen == {MASK_ZERO, REPLACE, KEEP}


def test_per_utterance_mode_draw_shares_mode():
    cfg = AlterationConfig(time_percent=0.5, time_mode_draw="per_utterance")
    for seed in range(20):
        _, rec = time_alteration(ramp(200, 2), cfg, Rng(seed))
        assert len({b.mode for b in rec.time_blocks}) == 1


def test_time_alteration_too_short():
    with pytest.raises(UtteranceTooShortError):
        time_alteration(ramp(6, 3), AlterationConfig(), Rng(0))
    # alter() skips the time stage instead
    x_hat, rec = alter(ramp(6, 10), AlterationConfig(enable_channel=False, enable_magnitude=False), Rng(0))
    assert rec.time_blocks == []


def covered_probability(L, W, k):
    """Exact P(frame t lies in at least one of k blocks with distinct uniform starts)."""
    n = L - W + 1
    t = np.arange(L)
    c = np.minimum(t, n - 1) - np.maximum(0, t - W + 1) + 1
    return 1.0 - comb(n - c, k, exact=False) / comb(n, k, exact=False)


def test_flagged_fraction_matches_union_coverage_oracle():
    L, W = 1000, 7
    cfg = AlterationConfig()
    k = num_time_blocks(cfg.time_percent, L, W)
    expected = covered_probability(L, W, k).mean()
    rng = Rng(2024)
    x = np.zeros((L, 1), np.float32)
    fractions = np.array([time_alteration(x, cfg, rng)[1].altered_frame_flags.mean() for _ in range(3000)])
    sigma = fractions.std(ddof=1) / math.sqrt(fractions.size)
    assert abs(fractions.mean() - expected) < 3 * sigma


def test_channel_width_and_start_uniform():
    rng = Rng(77)
    x = np.zeros((1, 80), np.float32)
    widths = np.zeros(9, int)
    starts = {w: np.zeros(80 - w, int) for w in range(1, 9)}
    n = 100_000
    for _ in range(n):
        _, rec = channel_alteration(x, AlterationConfig(), rng)
        if rec.channel_block is None:
            widths[0] += 1
        else:
            s, w = rec.channel_block
            widths[w] += 1
            starts[w][s] += 1
    assert stats.chisquare(widths).pvalue > 1e-3
    for w, counts in starts.items():
        assert stats.chisquare(counts).pvalue > 1e-4
        assert counts.size == 80 - w  # start ranges over 0 .. H - w - 1


def test_channel_block_zeroes_all_frames():
    x = ramp(20, 30)
    for seed in range(30):
        x_hat, rec = channel_alteration(x, AlterationConfig(), Rng(seed))
        flags = rec.altered_channel_flags
        assert np.all(x_hat[:, flags] == 0)
        np.testing.assert_array_equal(x_hat[:, ~flags], x[:, ~flags])


def test_channel_edge_cases():
    x = ramp(5, 10)
    for seed in range(20):
        x_hat, rec = channel_alteration(x, AlterationConfig(channel_width=0), Rng(seed))
        assert rec.channel_block is None and x_hat.tobytes() == x.tobytes()
    with pytest.raises(ConfigError):
        channel_alteration(ramp(5, 8), AlterationConfig(channel_width=8), Rng(0))


def test_noise_statistics_p_one():
    cfg = AlterationConfig(noise_prob=1.0)
    rng = Rng(5)
    z = np.concatenate([magnitude_alteration(np.zeros((100, 100)), cfg, rng)[1].noise.ravel() for _ in range(100)])
    assert z.size == 10**6
    var = cfg.noise_variance
    assert abs(z.mean()) < 3 * math.sqrt(var / z.size)
    assert abs(z.var(ddof=1) - var) < 3 * var * math.sqrt(2 / (z.size - 1))


def test_noise_p_zero_identity():
    x = ramp(4, 4)
    for seed in range(50):
        x_hat, rec = magnitude_alteration(x, AlterationConfig(noise_prob=0.0), Rng(seed))
        assert not rec.noise_applied and x_hat.tobytes() == x.tobytes()


def test_alter_only_time_equals_time_alteration():
    x = ramp(90, 12)
    cfg = AlterationConfig(enable_channel=False, enable_magnitude=False)
    a, ra = alter(x, cfg, Rng(9))
    b, rb = time_alteration(x, cfg, Rng(9))
    assert a.tobytes() == b.tobytes()
    assert ra.to_dict() == rb.to_dict()


def test_mask_to_noise():
    x = ramp(100, 12)
    cfg = AlterationConfig(noise_prob=1.0, time_percent=0.5)
    x_hat, rec = alter(x, cfg, Rng(1))
    zeroed = np.zeros(100, bool)
    for b in rec.time_blocks:
        if b.mode == MASK_ZERO:
            zeroed[b.start : b.start + b.width] = True
    assert zeroed.any()
    np.testing.assert_allclose(x_hat[zeroed], rec.noise[zeroed] + 0.0, rtol=0, atol=0)
    assert np.all(x_hat[zeroed] != 0)


def test_alter_all_disabled():
    with pytest.raises(ConfigError):
        alter(ramp(10, 10), AlterationConfig(enable_time=False, enable_channel=False, enable_magnitude=False), Rng(0))


def test_alter_deterministic_and_serializable():
    x = ramp(64, 16)
    a, ra = alter(x, AlterationConfig(noise_prob=0.5), Rng(123))
    b, rb = alter(x, AlterationConfig(noise_prob=0.5), Rng(123))
    assert a.tobytes() == b.tobytes()
    assert json.dumps(ra.to_dict(include_noise=True)) == json.dumps(rb.to_dict(include_noise=True))


@given(st.integers(7, 150), st.integers(9, 40), st.integers(0, 2**32), st.booleans())
def test_unaltered_cells_agree(L, H, seed, noise):
    x = ramp(L, H)
    cfg = AlterationConfig(noise_prob=1.0 if noise else 0.0)
    x_hat, rec = alter(x, cfg, Rng(seed))
    cells = np.zeros((L, H), bool)
    for b in rec.time_blocks:
        if b.mode != KEEP:
            cells[b.start : b.start + b.width] = True
    cells |= rec.altered_channel_flags[None, :]
    if rec.noise_applied:
        cells[:] = True
    np.testing.assert_array_equal(x_hat[~cells], x[~cells])
    assert np.array_equal(rec.altered_frame_flags, np.any([_block(b, L) for b in rec.time_blocks], axis=0) if rec.time_blocks else np.zeros(L, bool))


def _block(b, L):
    f = np.zeros(L, bool)
    f[b.start : b.start + b.width] = True
    return f


def test_specaugment_identity_and_bounds():
    x = ramp(50, 80)
    assert specaugment_mask(x, Rng(0), mT=0, mF=0).tobytes() == x.tobytes()
    for seed in range(200):
        y = specaugment_mask(x, Rng(seed))
        zero_cols = np.all(y == 0, axis=0)
        zero_rows = np.all(y == 0, axis=1)
        if zero_rows.all():
            continue
        assert zero_cols.sum() <= 8


def expected_zeroed_frames(L, T, mT):
    p = np.zeros(L)
    for w in range(T + 1):
        wc = min(w, L)
        n = L - wc + 1
        t = np.arange(L)
        cover = np.clip(np.minimum(t, n - 1) - np.maximum(0, t - wc + 1) + 1, 0, None) if wc > 0 else np.zeros(L)
        p += cover / n / (T + 1)
    return float((1 - (1 - p) ** mT).sum())


def test_specaugment_zeroed_frames_match_oracle():
    L, H = 120, 6
    x = np.ones((L, H), np.float32)
    rng = Rng(31)
    counts = np.array([np.all(specaugment_mask(x, rng, F=0) == 0, axis=1).sum() for _ in range(10_000)], float)
    expected = expected_zeroed_frames(L, 70, 2)
    sigma = counts.std(ddof=1) / math.sqrt(counts.size)
    assert abs(counts.mean() - expected) < 3 * sigma


def test_specaugment_clamps_short_input():
    y = specaugment_mask(np.ones((3, 5)), Rng(0), T=70, F=10)
    assert y.shape == (3, 5)
