"""Monte-Carlo model of the three-section entangled-pair source.

Pairs are emitted as a homogeneous Poisson process and routed uniformly
to the three diametric section pairs. (U1, D2) and (U2, D1) pairs land
directly on their detectors; (C1, C2) pairs pass the scheduled
polarization analyzers, where the joint transmit/absorb outcome is
sampled from the two-photon projection probabilities. Detector
efficiency, Gaussian timing jitter, dark counts, and dead time are
applied per channel.

The polarization state is ``alpha|HH> - beta|VV>`` mixed with the
maximally mixed state: ``noise_p`` is the pure-state weight, so the
projection probability onto analyzers at angles (t1, t2) is

    noise_p * (alpha cos t1 cos t2 - beta sin t1 sin t2)^2 + (1 - noise_p)/4

which makes the diagonal-basis fringe visibility of the balanced state
exactly ``noise_p``.

Event generation is deterministic for a given ``rng_seed``: emission is
sampled slice by slice with a counter-based Philox generator keyed on
(seed, slice index), so results do not depend on how work is scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .timetags import Channel, TagStream

#: Fixed time-slice width for seeded event generation (1 ms of stream time).
SLICE_PS = 10**9

#: Hard cap on expected generated pairs per run.
PAIR_BUDGET = 2**40

_DEG = math.pi / 180.0


class EventBudgetError(RuntimeError):
    """Configured rate x duration would exceed the event budget."""


@dataclass(frozen=True)
class TwoPhotonState:
    """Polarization state amplitudes plus the purity weight ``noise_p``."""

    alpha: float
    beta: float
    noise_p: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("amplitudes must lie in [0, 1]")
        if abs(self.alpha**2 + self.beta**2 - 1.0) > 1e-12:
            raise ValueError("alpha^2 + beta^2 must equal 1 within 1e-12")
        if not 0.0 <= self.noise_p <= 1.0:
            raise ValueError("noise_p must lie in [0, 1]")

    @classmethod
    def bell(cls, noise_p: float = 1.0) -> "TwoPhotonState":
        r = math.sqrt(0.5)
        return cls(r, r, noise_p)


def state_from_hwp(theta_deg: float, noise_p: float = 1.0) -> TwoPhotonState:
    """State produced by the pump half-wave plate at ``theta_deg``.

    alpha = sin(2 theta), beta = cos(2 theta); theta = 22.5 deg gives the
    balanced (Bell) state. Valid for 0 <= theta <= 45.
    """
    if not 0.0 <= theta_deg <= 45.0:
        raise ValueError(f"half-wave-plate angle {theta_deg} outside [0, 45] degrees")
    two_theta = 2.0 * theta_deg * _DEG
    alpha = math.sin(two_theta)
    beta = math.cos(two_theta)
    # renormalize away rounding residue so the state invariant holds exactly
    norm = math.hypot(alpha, beta)
    return TwoPhotonState(alpha / norm, beta / norm, noise_p)


def projection_probability(
    state: TwoPhotonState, theta1_deg: float, theta2_deg: float
) -> float:
    """Probability that both photons transmit analyzers at (theta1, theta2)."""
    t1 = theta1_deg * _DEG
    t2 = theta2_deg * _DEG
    amp = state.alpha * math.cos(t1) * math.cos(t2) - state.beta * math.sin(t1) * math.sin(t2)
    p = state.noise_p * amp * amp + (1.0 - state.noise_p) / 4.0
    # clamp float dust; the formula is in [0, 1] analytically
    return min(max(p, 0.0), 1.0)


def joint_outcome_probs(
    state: TwoPhotonState, theta1_deg: float, theta2_deg: float
) -> np.ndarray:
    """The four joint analyzer outcomes [TT, Tx, xT, xx] at one setting.

    T means the photon transmits at the scheduled angle, x means it
    projects onto the orthogonal (+90 deg) port and is not detected.
    The four probabilities sum to 1 for any state and angles.
    """
    return np.array(
        [
            projection_probability(state, theta1_deg, theta2_deg),
            projection_probability(state, theta1_deg, theta2_deg + 90.0),
            projection_probability(state, theta1_deg + 90.0, theta2_deg),
            projection_probability(state, theta1_deg + 90.0, theta2_deg + 90.0),
        ]
    )


@dataclass(frozen=True)
class AnalyzerSchedule:
    """Round-robin analyzer settings for the C1/C2 polarization analyzers.

    ``settings`` holds (theta_C1, theta_C2) in degrees; each setting is
    held for ``dwell`` picoseconds, cycling forever. The setting active
    at time t is ``settings[(t // dwell) % len(settings)]``.
    """

    settings: tuple[tuple[float, float], ...]
    dwell: int

    def __post_init__(self):
        if not self.settings:
            raise ValueError("schedule needs at least one setting")
        if self.dwell <= 0:
            raise ValueError("dwell must be a positive picosecond count")
        object.__setattr__(
            self,
            "settings",
            tuple((float(a), float(b)) for a, b in self.settings),
        )

    @property
    def cycle_ps(self) -> int:
        return self.dwell * len(self.settings)

    def setting_index_at(self, times_ps) -> np.ndarray:
        t = np.asarray(times_ps, dtype=np.int64)
        return ((t // self.dwell) % len(self.settings)).astype(np.int64)

    @classmethod
    def chsh(
        cls,
        a: float = 0.0,
        a_prime: float = 45.0,
        b: float = 67.5,
        b_prime: float = 22.5,
        dwell: int = SLICE_PS,
    ) -> "AnalyzerSchedule":
        """The 16-combination CHSH certification schedule.

        For each analyzer pair (a,b), (a,b'), (a',b), (a',b') the four
        orthogonal-complement variants are cycled, in canonical order:
        setting 4*p + v covers pair p with variant v in
        (T,T), (T,+90), (+90,T), (+90,+90). The default angles maximize
        |S| for the balanced state.
        """
        settings = []
        for t1, t2 in ((a, b), (a, b_prime), (a_prime, b), (a_prime, b_prime)):
            for v1, v2 in ((0.0, 0.0), (0.0, 90.0), (90.0, 0.0), (90.0, 90.0)):
                settings.append((t1 + v1, t2 + v2))
        return cls(tuple(settings), dwell)

    @classmethod
    def fringe(
        cls,
        fixed_deg: float,
        steps: int = 16,
        start: float = 0.0,
        span: float = 180.0,
        dwell: int = SLICE_PS,
    ) -> "AnalyzerSchedule":
        """A visibility fringe scan: C2 fixed, C1 swept across ``span``.

        Endpoints inclusive, so the scan covers the full span required by
        the visibility fit.
        """
        if steps < 2:
            raise ValueError("fringe scan needs at least 2 steps")
        angles = np.linspace(start, start + span, steps)
        return cls(tuple((float(a), float(fixed_deg)) for a in angles), dwell)


def _per_channel(value) -> np.ndarray:
    """Expand a scalar or per-channel mapping to a 6-element float array."""
    if isinstance(value, Mapping):
        arr = np.zeros(6)
        for ch, v in value.items():
            arr[int(ch)] = float(v)
        return arr
    return np.full(6, float(value))


@dataclass(frozen=True)
class SourceConfig:
    """Full description of one simulated acquisition."""

    pump_power: float  # mW
    pair_rate_coeff: float  # generated pairs per second per mW
    state: TwoPhotonState
    analyzer_schedule: AnalyzerSchedule
    duration: int  # ps
    rng_seed: int = 0
    det_efficiency: float | Mapping[Channel, float] = 1.0
    dark_rate: float | Mapping[Channel, float] = 0.0  # counts/s per channel
    jitter_sigma: float = 350.0  # ps
    dead_time: int = 0  # ps, 0 disables

    def __post_init__(self):
        if self.pump_power <= 0:
            raise ValueError("pump_power must be > 0 mW")
        if self.pair_rate_coeff < 0:
            raise ValueError("pair_rate_coeff must be >= 0")
        if self.duration <= 0:
            raise ValueError("duration must be a positive picosecond count")
        if self.jitter_sigma < 0 or self.dead_time < 0:
            raise ValueError("jitter_sigma and dead_time must be >= 0")
        eff = _per_channel(self.det_efficiency)
        if np.any(eff <= 0) or np.any(eff > 1):
            raise ValueError("det_efficiency must lie in (0, 1] per channel")
        dark = _per_channel(self.dark_rate)
        if np.any(dark < 0):
            raise ValueError("dark_rate must be >= 0 per channel")
        if self.expected_pairs() >= PAIR_BUDGET:
            raise EventBudgetError(
                f"expected {self.expected_pairs():.3g} pairs exceeds budget 2^40"
            )

    @property
    def pair_rate(self) -> float:
        """Generated pair rate in pairs per second."""
        return self.pair_rate_coeff * self.pump_power

    def expected_pairs(self) -> float:
        return self.pair_rate * self.duration * 1e-12

    def efficiency_array(self) -> np.ndarray:
        return _per_channel(self.det_efficiency)

    def dark_array(self) -> np.ndarray:
        return _per_channel(self.dark_rate)


@dataclass(frozen=True)
class RateSummary:
    """Analytic singles and coincidence rates implied by a config (Hz)."""

    singles: dict[Channel, float]
    coincidences: dict[tuple[Channel, Channel], float]


def expected_rates(config: SourceConfig) -> RateSummary:
    """Analytic validator for :func:`generate_events`.

    Singles on U/D channels are (pair_rate/3)*eta + dark; C channels are
    additionally scaled by the schedule-averaged marginal transmit
    probability. Section-pair coincidence rates carry eta^2 and, for
    (C1, C2), the schedule-averaged joint projection probability.
    """
    eta = config.efficiency_array()
    dark = config.dark_array()
    r3 = config.pair_rate / 3.0
    sched = config.analyzer_schedule
    p_tt = 0.0
    p_c1 = 0.0
    p_c2 = 0.0
    for t1, t2 in sched.settings:
        probs = joint_outcome_probs(config.state, t1, t2)
        p_tt += probs[0]
        p_c1 += probs[0] + probs[1]
        p_c2 += probs[0] + probs[2]
    n = len(sched.settings)
    p_tt /= n
    p_c1 /= n
    p_c2 /= n

    singles: dict[Channel, float] = {}
    for ch in (Channel.U1, Channel.U2, Channel.D1, Channel.D2):
        singles[ch] = r3 * eta[int(ch)] + dark[int(ch)]
    singles[Channel.C1] = r3 * eta[int(Channel.C1)] * p_c1 + dark[int(Channel.C1)]
    singles[Channel.C2] = r3 * eta[int(Channel.C2)] * p_c2 + dark[int(Channel.C2)]

    coinc = {
        (Channel.U1, Channel.D2): r3 * eta[0] * eta[3],
        (Channel.U2, Channel.D1): r3 * eta[1] * eta[2],
        (Channel.C1, Channel.C2): r3 * eta[4] * eta[5] * p_tt,
    }
    return RateSummary(singles, coinc)


def _slice_rng(seed: int, slice_index: int) -> np.random.Generator:
    root = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, slice_index])
    return np.random.Generator(np.random.Philox(root))


def _prune_dead_time(times: np.ndarray, dead_time: int) -> np.ndarray:
    """Non-paralyzable dead time: keep a tag only if it trails the last
    kept tag on the same channel by at least ``dead_time``."""
    keep = np.ones(times.size, dtype=bool)
    last = -(1 << 62)
    for i, t in enumerate(times.tolist()):
        if t - last >= dead_time:
            last = t
        else:
            keep[i] = False
    return keep


def generate_events(config: SourceConfig) -> TagStream:
    """Sample one full acquisition into a sorted six-channel TagStream."""
    if config.expected_pairs() >= PAIR_BUDGET:
        raise EventBudgetError("event budget exceeded")

    sched = config.analyzer_schedule
    eta = config.efficiency_array()
    dark = config.dark_array()
    pair_rate_per_ps = config.pair_rate * 1e-12
    # cache outcome probabilities per schedule setting
    cum_probs = []
    for t1, t2 in sched.settings:
        probs = joint_outcome_probs(config.state, t1, t2)
        total = probs.sum()
        cum_probs.append(np.cumsum(probs / total))

    ts_parts: list[np.ndarray] = []
    ch_parts: list[np.ndarray] = []

    n_slices = (config.duration + SLICE_PS - 1) // SLICE_PS
    for s in range(n_slices):
        t0 = s * SLICE_PS
        t1 = min(t0 + SLICE_PS, config.duration)
        rng = _slice_rng(config.rng_seed, s)
        span = t1 - t0

        n_pairs = rng.poisson(pair_rate_per_ps * span)
        times = rng.integers(t0, t1, n_pairs, dtype=np.int64)
        section = rng.integers(0, 3, n_pairs, dtype=np.int64)

        slice_ts: list[np.ndarray] = []
        slice_ch: list[np.ndarray] = []

        # direct section pairs: one tag per channel at the emission time
        for sec, (ca, cb) in ((0, (Channel.U1, Channel.D2)), (1, (Channel.U2, Channel.D1))):
            t_sec = times[section == sec]
            for ch in (ca, cb):
                slice_ts.append(t_sec)
                slice_ch.append(np.full(t_sec.size, int(ch), dtype=np.uint8))

        # analyzed pair: joint outcome decides which C detectors fire
        t_c = times[section == 2]
        idx = sched.setting_index_at(t_c)
        u = rng.random(t_c.size)
        outcome = np.empty(t_c.size, dtype=np.int64)
        for k in range(len(sched.settings)):
            sel = idx == k
            if np.any(sel):
                outcome[sel] = np.minimum(
                    np.searchsorted(cum_probs[k], u[sel], side="right"), 3
                )
        c1_hit = (outcome == 0) | (outcome == 1)
        c2_hit = (outcome == 0) | (outcome == 2)
        slice_ts.append(t_c[c1_hit])
        slice_ch.append(np.full(int(c1_hit.sum()), int(Channel.C1), dtype=np.uint8))
        slice_ts.append(t_c[c2_hit])
        slice_ch.append(np.full(int(c2_hit.sum()), int(Channel.C2), dtype=np.uint8))

        ts_sig = np.concatenate(slice_ts) if slice_ts else np.empty(0, np.int64)
        ch_sig = np.concatenate(slice_ch) if slice_ch else np.empty(0, np.uint8)

        # detector efficiency thins signal tags per channel
        if np.any(eta < 1.0):
            survive = rng.random(ts_sig.size) < eta[ch_sig]
            ts_sig = ts_sig[survive]
            ch_sig = ch_sig[survive]

        # timing jitter on detected signal photons
        if config.jitter_sigma > 0 and ts_sig.size:
            ts_sig = ts_sig + np.rint(
                rng.normal(0.0, config.jitter_sigma, ts_sig.size)
            ).astype(np.int64)
            np.clip(ts_sig, 0, config.duration, out=ts_sig)

        # dark counts, uniform in the slice, per channel
        for ch in Channel:
            rate = dark[int(ch)]
            if rate > 0:
                n_dark = rng.poisson(rate * 1e-12 * span)
                if n_dark:
                    ts_parts.append(rng.integers(t0, t1, n_dark, dtype=np.int64))
                    ch_parts.append(np.full(n_dark, int(ch), dtype=np.uint8))

        ts_parts.append(ts_sig)
        ch_parts.append(ch_sig)

    ts = np.concatenate(ts_parts) if ts_parts else np.empty(0, np.int64)
    ch = np.concatenate(ch_parts) if ch_parts else np.empty(0, np.uint8)
    order = np.argsort(ts, kind="stable")
    ts = ts[order]
    ch = ch[order]

    if config.dead_time > 0 and ts.size:
        keep = np.ones(ts.size, dtype=bool)
        for c in Channel:
            sel = np.flatnonzero(ch == int(c))
            if sel.size:
                keep[sel] = _prune_dead_time(ts[sel], config.dead_time)
        ts = ts[keep]
        ch = ch[keep]

    return TagStream(ts, ch, config.duration, validate=False)
