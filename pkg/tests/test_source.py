import math

import numpy as np
import pytest

from qrng_forge import (
    AnalyzerSchedule,
    Channel,
    CoincidenceConfig,
    SourceConfig,
    TwoPhotonState,
    encode_stream,
    expected_rates,
    find_coincidences,
    fringe_counts,
    generate_events,
    joint_outcome_probs,
    projection_probability,
    state_from_hwp,
    visibility,
)
from qrng_forge.source import EventBudgetError

BELL = TwoPhotonState.bell()


def small_config(**kwargs):
    defaults = dict(
        pump_power=1.0,
        pair_rate_coeff=10**6,
        state=BELL,
        analyzer_schedule=AnalyzerSchedule.chsh(dwell=10**7),
        duration=10**12,
        rng_seed=42,
        jitter_sigma=0.0,
    )
    defaults.update(kwargs)
    return SourceConfig(**defaults)


class TestState:
    def test_hwp_bell_point(self):
        state = state_from_hwp(22.5)
        assert state.alpha == pytest.approx(0.70711, abs=5e-6)
        assert state.beta == pytest.approx(0.70711, abs=5e-6)
        assert state.noise_p == 1.0

    def test_hwp_endpoints(self):
        vv = state_from_hwp(0.0)
        assert (vv.alpha, vv.beta) == pytest.approx((0.0, 1.0), abs=1e-15)
        hh = state_from_hwp(45.0)
        assert (hh.alpha, hh.beta) == pytest.approx((1.0, 0.0), abs=1e-15)

    def test_hwp_out_of_range(self):
        with pytest.raises(ValueError):
            state_from_hwp(-1.0)
        with pytest.raises(ValueError):
            state_from_hwp(45.1)

    def test_state_normalization_enforced(self):
        with pytest.raises(ValueError):
            TwoPhotonState(0.5, 0.5)


class TestProjection:
    def test_bell_parallel_zero(self):
        assert projection_probability(BELL, 0, 0) == pytest.approx(0.5, abs=1e-12)

    def test_bell_diagonal_null(self):
        # amplitude cos(t1 + t2)/sqrt(2) vanishes at 90 degrees total
        assert projection_probability(BELL, 45, 45) == pytest.approx(0.0, abs=1e-12)

    def test_werner_noise_floor(self):
        noisy = TwoPhotonState.bell(0.8)
        assert projection_probability(noisy, 45, 45) == pytest.approx(0.05, abs=1e-12)

    def test_bell_analytic_cos_squared(self, rng):
        for _ in range(50):
            t1, t2 = rng.uniform(0, 180, 2)
            expected = math.cos(math.radians(t1 + t2)) ** 2 / 2.0
            assert projection_probability(BELL, t1, t2) == pytest.approx(expected, abs=1e-12)

    def test_outcomes_sum_to_one(self, rng):
        for _ in range(100):
            theta = rng.uniform(0, 45)
            noise = rng.uniform(0, 1)
            state = state_from_hwp(theta, noise)
            t1, t2 = rng.uniform(-90, 270, 2)
            total = joint_outcome_probs(state, t1, t2).sum()
            assert total == pytest.approx(1.0, abs=1e-12)


class TestExpectedRates:
    def test_ud_singles(self):
        cfg = small_config(pair_rate_coeff=3 * 10**6)
        rates = expected_rates(cfg)
        assert rates.singles[Channel.U1] == pytest.approx(10**6)

    def test_eta_squared_coincidence(self):
        cfg = small_config(pair_rate_coeff=3 * 10**6, det_efficiency=0.5)
        rates = expected_rates(cfg)
        assert rates.coincidences[(Channel.U1, Channel.D2)] == pytest.approx(0.25 * 10**6)

    def test_analyzer_scaled_c_pair(self):
        fixed = AnalyzerSchedule(((0.0, 0.0),), dwell=10**6)
        cfg = small_config(pair_rate_coeff=3 * 10**6, analyzer_schedule=fixed)
        rates = expected_rates(cfg)
        # projection_probability(bell, 0, 0) = 0.5
        assert rates.coincidences[(Channel.C1, Channel.C2)] == pytest.approx(0.5 * 10**6)
        assert rates.singles[Channel.C1] == pytest.approx(0.5 * 10**6)


class TestGenerateEvents:
    def test_same_seed_byte_exact(self):
        cfg = small_config(duration=2 * 10**11)
        a = generate_events(cfg)
        b = generate_events(cfg)
        assert encode_stream(a) == encode_stream(b)

    def test_different_seeds_differ(self):
        for seed in range(10):
            s1 = generate_events(small_config(duration=10**10, rng_seed=seed))
            s2 = generate_events(small_config(duration=10**10, rng_seed=seed + 1000))
            assert encode_stream(s1) != encode_stream(s2)

    def test_section_split_is_uniform_thirds(self):
        cfg = small_config(duration=10**12)  # ~1e6 pairs
        stream = generate_events(cfg)
        counts = stream.counts_by_channel()
        n_pairs = cfg.expected_pairs()
        sigma = math.sqrt(n_pairs * (1 / 3) * (2 / 3))
        for ch in (Channel.U1, Channel.U2, Channel.D1, Channel.D2):
            assert abs(counts[ch] - n_pairs / 3) < 4 * sigma

    def test_dark_only_poisson_counts(self):
        cfg = small_config(pair_rate_coeff=0.0, dark_rate=1000.0, duration=10**12)
        stream = generate_events(cfg)
        counts = stream.counts_by_channel()
        for ch in Channel:
            assert abs(counts[ch] - 1000) < 4 * math.sqrt(1000)

    def test_sampler_matches_analytic_rates(self):
        base = dict(
            pair_rate_coeff=3 * 10**5,
            det_efficiency=0.8,
            dark_rate=200.0,
            duration=10**12,
            jitter_sigma=200.0,
        )
        for seed in range(10):
            cfg = small_config(rng_seed=seed, **base)
            expected = expected_rates(cfg)
            counts = generate_events(cfg).counts_by_channel()
            duration_s = cfg.duration * 1e-12
            for ch in Channel:
                mean = expected.singles[ch] * duration_s
                assert abs(counts[ch] - mean) < 4 * math.sqrt(mean), (seed, ch)

    def test_event_budget_error(self):
        with pytest.raises(EventBudgetError):
            small_config(pair_rate_coeff=10**13, duration=10**12)

    def test_jitter_keeps_stream_valid(self):
        cfg = small_config(jitter_sigma=500.0, duration=10**10)
        stream = generate_events(cfg)
        assert np.all(np.diff(stream.timestamps) >= 0)
        assert stream.timestamps.min() >= 0
        assert stream.timestamps.max() <= cfg.duration

    def test_dead_time_enforced_per_channel(self):
        cfg = small_config(
            pair_rate_coeff=0.0, dark_rate=10**5, dead_time=5000, duration=10**10
        )
        stream = generate_events(cfg)
        for ch in Channel:
            times = stream.channel_times(ch)
            assert times.size > 0
            assert np.diff(times).min() >= 5000


class TestNoiseMonotonicity:
    def test_noise_p_raises_diagonal_visibility(self):
        fits = []
        for noise in (0.5, 0.75, 0.95):
            sched = AnalyzerSchedule.fringe(45.0, steps=16, dwell=10**7)
            cfg = small_config(
                state=TwoPhotonState.bell(noise),
                analyzer_schedule=sched,
                pair_rate_coeff=2 * 10**6,
                duration=5 * 10**11,
            )
            stream = generate_events(cfg)
            cc = find_coincidences(
                stream.channel_times(Channel.C1),
                stream.channel_times(Channel.C2),
                CoincidenceConfig(1000),
            )
            samples = fringe_counts(cc, sched, cfg.duration)
            fits.append(visibility(samples).v)
        assert fits[0] < fits[1] < fits[2]
        for fit, noise in zip(fits, (0.5, 0.75, 0.95)):
            assert fit == pytest.approx(noise, abs=0.03)
